"""Grid situational awareness from crowd-sourced, signed incident reports."""

__version__ = "0.1.0"
