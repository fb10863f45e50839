"""Rotation-invariant convolutional autoencoder clustering toolkit.

Trains convolutional autoencoders under three competing objectives
(rotation-invariant, rotation-agnostic, and a plain multi-term
reconstruction loss), clusters the latent representations with Ward
agglomerative clustering, and runs a battery of quantitative evaluation
protocols on the resulting cluster assignments.
"""

__version__ = "0.1.0"
