"""Backdoor attacks on semantic segmentation: triggers, label manipulation, search, defenses."""

__version__ = "0.1.0"
