"""
Pipeline Plugins

One module per pipeline stage: augmentation, feature extraction, the
acoustic model, training and evaluation.
"""

from . import acoustic_model, augment, evaluation, features, trainer

__all__ = ["acoustic_model", "augment", "evaluation", "features", "trainer"]
