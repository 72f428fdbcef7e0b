"""jobpower - job power modeling, prediction and machine-wide power capping"""

__version__ = "0.1.0"
