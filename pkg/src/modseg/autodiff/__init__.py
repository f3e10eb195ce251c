from .tensor import (
    Tape,
    Tensor,
    as_tensor,
    backward,
    current_tape,
    default_dtype,
    make_result,
    precision,
    set_default_dtype,
)
from .ops import (
    add,
    apply_modulation,
    bilinear_resize,
    concat,
    conv2d,
    getitem,
    global_avg_pool,
    interp_matrix,
    linear,
    maxpool2,
    mean,
    mul,
    relu,
    reshape,
    resize_array,
    sigmoid,
    sub,
)
from .ops import sum as tsum
from .adam import Adam, AdamState, adam_step
from .gradcheck import analytic_grad, grad_check, numerical_grad, relative_errors, smooth_coords
