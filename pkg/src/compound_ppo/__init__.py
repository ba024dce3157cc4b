"""PPO policy losses for compound action spaces.

Four policy-loss variants (compound, sub-action, mix-ratio, mix-loss), a
numpy actor-critic with hand-written backprop, serial and asynchronous
training loops, and two small compound-action environments.
"""

__version__ = "0.1.0"

from .config import TrainConfig, preset
from .losses import ClipStats, LossTag, LossVariant, policy_loss
from .training import evaluate, serial_train

__all__ = [
    "ClipStats", "LossTag", "LossVariant", "TrainConfig", "evaluate", "policy_loss", "preset", "serial_train",
    "__version__",
]
