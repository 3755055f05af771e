"""Tests for sculptfab."""