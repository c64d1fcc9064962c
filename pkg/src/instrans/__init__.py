"""Instance-aware unpaired image-to-image translation with set-conditioned GANs."""

__version__ = "0.1.0"
