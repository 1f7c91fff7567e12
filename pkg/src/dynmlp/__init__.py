"""Dynamic-MLP fusion of image features with geo-temporal metadata, on a small numpy autodiff engine."""

from .autograd import Tensor, backward, finite_difference_check, no_grad
from .encoding import MetadataRecord, encode_record
from .fusion import FusionConfig, FusionModel, block_schedule, fuse_and_classify

__all__ = [
    "Tensor",
    "backward",
    "finite_difference_check",
    "no_grad",
    "MetadataRecord",
    "encode_record",
    "FusionConfig",
    "FusionModel",
    "block_schedule",
    "fuse_and_classify",
]
