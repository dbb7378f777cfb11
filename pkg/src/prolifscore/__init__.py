"""Automated tumor proliferation scoring from whole-slide histopathology images."""

__version__ = "0.1.0"
