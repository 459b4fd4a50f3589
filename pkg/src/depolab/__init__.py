"""Decoupled policy optimization lab for state-only imitation learning."""
import torch

torch.set_num_threads(1)

__version__ = "0.1.0"
