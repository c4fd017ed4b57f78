"""Desk-scale simulator and control stack for an SLM-fed multi-channel modulator system."""

__version__ = "0.1.0"
