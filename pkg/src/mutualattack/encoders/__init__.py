from .base import (
    DualEncoder,
    class_text_features,
    cosine_sim,
    normalize,
    predict,
    predict_from_features,
    probs_from_features,
    similarity_matrix,
    zero_shot_probs,
)
from .tiny import MASK_TOKEN, TinyDualEncoder, TinyTokenizer

__all__ = [
    "DualEncoder",
    "MASK_TOKEN",
    "TinyDualEncoder",
    "TinyTokenizer",
    "class_text_features",
    "cosine_sim",
    "normalize",
    "predict",
    "predict_from_features",
    "probs_from_features",
    "similarity_matrix",
    "zero_shot_probs",
]
