"""Sequential matching for multi-turn response selection.

ESIM cross-attention scoring, a Siamese self-attention prefilter, dialogue
augmentation and negative sampling, Adam training and ranking metrics, all on
top of a small numpy autodiff core.
"""

__version__ = "0.1.0"
