"""Collaborative global-local segmentation with a bounded-memory inference path.

The package couples a coarse branch run on a downsampled whole image with a
fine branch run on overlapped crops, exchanges intermediate feature maps
between the two, and stitches per-crop predictions back to full resolution so
working memory stays bounded by the crop size rather than the image size.
"""

__version__ = "0.1.0"
