"""Non-autoregressive predictive coding over masked convolutions."""

__version__ = "0.1.0"

from .model import NpcConfig, NpcModel, plan_masks, build_mask  # noqa: F401
