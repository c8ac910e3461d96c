"""
3D relational convolution networks for hyperspectral image classification
"""

__version__ = "1.0.0"
__license__ = "GPL v3"
