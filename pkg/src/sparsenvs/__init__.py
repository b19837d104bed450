"""Sparse-view novel view generation for indoor scenes.

A neural point cloud renders guidance images and validity masks from the
observed views, a VQ autoencoder turns images into discrete tokens, and an
autoregressive transformer generates the tokens of a target view from a
context of rendered "previews".
"""

__version__ = "0.1.0"
