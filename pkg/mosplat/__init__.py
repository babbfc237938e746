"""
mosplat - multi-object 4D Gaussian splatting for monocular videos.
"""
__version__ = "1.0.0"
