"""Tooling for box-conditioned video generation experiments.

Rendering of bounding-box frames, mask and detection metrics, PSNR/SSIM,
discrete motion tokens with simple trajectory generators, and EDM
preconditioning with a toy sampler.
"""

__version__ = "0.1.0"
