"""FCOS-Lite: a compact anchor-free detector with gradient-weighted losses,
focal/global feature distillation and simulated int8 deployment."""

__version__ = "0.1.0"
