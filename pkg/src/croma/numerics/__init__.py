from .container import ContainerError
from .container import load as load_crma
from .container import save as save_crma
from .gradcheck import GradCheckReport, check_gradients
from .optim import LrSchedule, OptimizerState, adamw_step, lr_at
from .tensor import (
    NonFiniteError,
    Tensor,
    add,
    backward,
    clamp,
    concat,
    div,
    exp,
    finite_checks,
    gelu,
    getitem,
    l2_normalize,
    layernorm,
    linear,
    log,
    log_softmax_lastdim,
    matmul,
    mean_lastaxis,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    scatter_rows,
    set_finite_checks,
    softmax_lastdim,
    softplus,
    sqrt,
    stack,
    sub,
    swap_last,
    take_rows,
    tanh,
    tensor,
    transpose,
    tmean,
    tsum,
)
