"""Undersampled multi-coil MRI reconstruction with DCI-Net and AGB-balanced WGAN training."""

__version__ = "0.1.0"
