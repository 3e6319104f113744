"""Desk-scale DML IM/DD link simulation and end-to-end DSP optimization."""

__version__ = "0.1.0"
