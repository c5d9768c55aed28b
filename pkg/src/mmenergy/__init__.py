"""mmenergy: energy-based training and inference for two-tower image-text encoders.

The toolkit treats the negative cosine similarity between image and text
embeddings as a joint energy, trains the image tower with an adversarial
contrastive loss plus a contrastive energy loss over freshly sampled
pixel-space negatives, and reuses the same energy at inference time for
text-to-image generation, diffusion guidance, and robustness scoring.
"""

from mmenergy.errors import CheckpointError, ConfigError, InputError, NumericsError

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "InputError",
    "NumericsError",
    "__version__",
]
