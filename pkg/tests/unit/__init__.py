"""Unit tests for sculptfab."""