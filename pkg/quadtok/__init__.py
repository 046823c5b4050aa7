"""
Saliency-based Quadtree tokenization of images into mixed-resolution patch mosaics.
"""

__version__ = "0.1.0"
