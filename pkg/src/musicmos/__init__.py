"""Per-clip quality prediction for generated music.

Lightweight attention-pooling + MLP heads trained on frame features from a
frozen (or LoRA-adapted) music encoder against human mean-opinion scores,
plus the statistics, cross-validation, degradation and data-efficiency
harnesses around them.
"""

__version__ = "0.1.0"
