"""Calibration-bundle exporter for pretrained causal language models."""

from .exporter import CaptureError, CaptureSpec, capture, default_prompts

__version__ = "0.1.0"
