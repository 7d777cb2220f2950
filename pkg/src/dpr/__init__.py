"""Depth-gated pixel-contrastive pretraining and proprioception-injected behavior cloning."""

__version__ = "0.1.0"
