"""
atom-steering - Steering target atoms on a toy transformer.

Trains a JumpReLU sparse autoencoder on a small language model's residual
stream, selects the atoms that separate two behaviors, and turns them (or
contrastive activations, or a prompt) into steering vectors that are swept
for behavior control and fluency.
"""

__version__ = "0.1.0"

from atom_steering.config import Settings

__all__ = [
    "Settings",
    "__version__",
]
