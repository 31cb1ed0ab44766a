from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    add,
    add_bias,
    affine,
    attention_pool,
    attention_scores,
    backward,
    bce_with_logits,
    concat,
    constant,
    cosine_matrix,
    diag_part,
    gather_rows,
    linear,
    matmul,
    mul,
    neg,
    relu,
    row_softmax,
    scale_rows,
    sigmoid,
    square,
    sub,
    take_column,
    texp,
    tlog,
    tmean,
    transpose,
    tsum,
)
from .optim import AdamW, MissingGradError, grad_check
from .checkpoint import atomic_write_bytes, atomic_write_text, load_arrays, save_arrays
