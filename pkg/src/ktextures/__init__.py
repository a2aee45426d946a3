"""k-textures: self-supervised hard clustering of 4-band rasters.

A continuous encoder map is snapped into k binary class masks by a frozen
steep-step network, one texture is generated per class, and masks times
textures reassemble the image; training minimizes a frozen-extractor feature
loss. Includes a k-means baseline and the evaluation/report tooling.
"""

__version__ = "0.1.0"
