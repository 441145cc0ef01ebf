"""Graph-attention pooling engine for speaker embeddings.

Fuses per-frame speaker features into one utterance embedding with a
cosine-attention message-passing network, next to classical pooling
baselines expressed as graph shift operators, with training
(additive-angular-margin softmax) and verification (EER) tooling.
"""

__version__ = "0.1.0"

from . import errors  # noqa: F401
