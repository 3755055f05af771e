"""sculptfab: fabrication toolchain for sculpted physical computing prototypes"""

__version__ = "1.0.0"
