"""Test fixtures for meshes, specs and stroke streams."""