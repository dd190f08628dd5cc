from . import autograd, kernels
from .autograd import Tensor, as_tensor, no_grad, stop_gradient
from .params import Params, check_gradients, gradients, rel_error
from .rng import Rng, sample_beta, sample_normal
from .stats import EPS_STD, ChannelStats, channel_stats, destandardize, scale_shift, softmax, standardize
from .tensorio import load_tensor, save_tensor

__all__ = [
    "autograd", "kernels", "Tensor", "as_tensor", "no_grad", "stop_gradient",
    "Params", "check_gradients", "gradients", "rel_error",
    "Rng", "sample_beta", "sample_normal",
    "EPS_STD", "ChannelStats", "channel_stats", "destandardize", "scale_shift", "softmax", "standardize",
    "load_tensor", "save_tensor",
]
