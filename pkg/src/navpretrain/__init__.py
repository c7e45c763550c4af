"""Auxiliary-task pretraining for instruction-following navigation agents.

Synthetic navigation graphs and instructions, negative mining, a cross-modal
discriminator with a contrastive next-scene task, and an agent trained with
interleaved behavioral cloning and policy gradient.
"""

__version__ = "0.1.0"
