"""Building damage mapping from pre/post VHR image pairs with a Siamese U-Net."""

__version__ = "0.1.0"
