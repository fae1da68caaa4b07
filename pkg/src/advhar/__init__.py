"""Adversarial evasion attacks and transferability experiments for
wearable-sensor human activity recognition."""

__version__ = "0.1.0"
