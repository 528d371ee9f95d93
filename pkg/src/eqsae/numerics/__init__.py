from .etns import load as load_tensor, save as save_tensor
from .gradcheck import GradCheckReport, grad_check
from .ops import (
    ParameterError,
    add,
    conv2d,
    conv_transpose2d,
    linear,
    matmul,
    mse,
    relu,
    reshape,
    scale,
    stack_rows,
    sub,
    topk,
    topk_mask,
    total,
)
from .optim import Adam, AdamState, adam_step
from .tensor import (
    GraphError,
    NonFiniteError,
    Precision,
    PrecisionError,
    ShapeError,
    Tensor,
    no_grad,
    uniform_init,
    zeros,
)

# layer-name aliases
apply_linear = linear
apply_conv2d = conv2d
apply_conv_transpose2d = conv_transpose2d
