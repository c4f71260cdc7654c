"""Multi-view gait recognition from silhouettes: a numpy reverse-mode
autodiff engine, a dual-channel (conv + mobile attention) Siamese
backbone, additive view-feature conversion toward the side view, and a
gradual view-moving training curriculum.
"""

__version__ = "0.1.0"
