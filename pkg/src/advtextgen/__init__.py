"""Adversarial text generation with a class-conditional VAE, GAN-style
discriminators, and a frozen convolutional target classifier."""

__version__ = "0.1.0"
