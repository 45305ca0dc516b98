from .engine import CacheMismatch, ForwardCache, backward, forward, loss_ce, predict
from .kernels import BACKEND
from .layers import LayerSpec, ModelSpec, Segment, SpecError, table_ii
from .weights import (
    FormatError,
    Gradients,
    LayoutError,
    Weights,
    concat,
    deserialize,
    fedavg,
    init_model,
    serialize,
    sgd_step,
    split,
    zeros_like,
)
