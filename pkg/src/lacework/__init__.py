"""lacework: filtered imitation plus online noise-steering RL on a
deterministic 2D bimanual lace-threading benchmark."""

__version__ = "0.1.0"
