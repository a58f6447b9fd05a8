"""
MAMLCon Package

Meta-learning initial weights for few-shot continual learning of spoken
words: a NumPy CNN/MLP classifier with hand-written backpropagation,
first-order meta-training with template rehearsal, the OML and
no-pretraining baselines, and an experiment harness.
"""

__version__ = "1.0.0"
__author__ = "MAMLCon Team"
__description__ = "Few-shot continual meta-learning toolkit"
