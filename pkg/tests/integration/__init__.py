"""Integration tests for sculptfab."""