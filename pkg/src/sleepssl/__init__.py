"""Self-supervised pretraining and evaluation for multi-channel sleep recordings."""

__version__ = "0.1.0"
