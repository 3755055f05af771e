"""
Tool-wide numeric settings.

Defaults are tuned for hand-held prototypes; a JSON file passed with
``--settings`` overrides any subset. No environment variables are read.
"""

import json
import logging
from pathlib import Path
from typing import Any, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from errors import SpecInvalid, spec_invalid_from

logger = logging.getLogger(__name__)


class ToolSettings(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    pitch: float = Field(0.2, gt=0, description="voxel pitch in mm")
    padding: int = Field(3, ge=2, description="empty voxels around a solid")
    narrow_band: int = Field(5, ge=1, description="exact-distance band in voxels")
    max_voxels: int = Field(2**28, gt=0)
    weld_epsilon: float = Field(1e-4, gt=0)
    degenerate_area: float = Field(1e-8, gt=0)
    seed: int = 0


DEFAULT_SETTINGS = ToolSettings()


def load_settings(path: Optional[Union[str, Path]] = None, **overrides) -> ToolSettings:
    """Build settings from an optional JSON file plus keyword overrides."""
    data = {}
    if path:
        logger.info(f"Loading settings from {path}")
        data = read_json(path)
        if not isinstance(data, dict):
            raise SpecInvalid(f"{path}: settings must be a JSON object", field="settings")
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ToolSettings(**data)
    except ValidationError as e:
        raise spec_invalid_from(e) from e


def read_json(path: Union[str, Path]) -> Any:
    """Parse a JSON document, reporting syntax errors as SpecInvalid with file:line."""
    with open(path, "r", encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise SpecInvalid(f"{path}:{e.lineno}: {e.msg}", field="document", line=e.lineno) from e
        except UnicodeDecodeError as e:
            raise SpecInvalid(f"{path}: not UTF-8 text", field="document") from e
