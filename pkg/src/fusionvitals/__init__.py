"""Non-contact vitals estimation from synchronized RGB and IR facial video."""

__version__ = "0.1.0"
