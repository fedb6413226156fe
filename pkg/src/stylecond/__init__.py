"""Class-conditional style-based GAN toolkit for logo-like image corpora."""

__version__ = "0.1.0"
