"""Small float64 autodiff engine and the classifier families built on it."""
from .losses import bce_with_logits, focal_loss
from .models import Arch, Classifier, ModelSpec
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, no_grad

__all__ = ["Adam", "AdamState", "Arch", "Classifier", "ModelSpec", "Tensor", "adam_step",
           "bce_with_logits", "focal_loss", "no_grad"]
