"""Two-stage strand-based hair reconstruction at desk scale.

Stage I fits a dual signed-distance representation (hair + bust) with a 3D
orientation field from calibrated images, masks, and 2D orientation maps.
Stage II fits an explicit strand hairstyle, decoded from a latent geometry
texture on the scalp, against geometric, soft-rasterized rendering, and
diffusion-prior losses.  Everything differentiates through the small
reverse-mode tape in :mod:`hairrecon.adtape`.
"""

__version__ = "0.1.0"
