from .cluster import KMeansResult, kmeans, kmeans_fit, power_iteration
from .gradcheck import check_grads, numeric_grad, relative_error
from .linalg import (
    CholeskyError,
    SingularMatrixError,
    cholesky,
    jittered_cholesky,
    logdet_from_cholesky,
    triangular_solve,
)
from .tensor import (
    GRAD_RULES,
    Tensor,
    absolute,
    add,
    as_tensor,
    backward,
    clamp_min,
    concat,
    diagonal,
    div,
    elu,
    exp,
    log,
    log_softmax,
    logsumexp,
    matmul,
    mean,
    mul,
    neg,
    pairwise_sqdist,
    power,
    relu,
    reshape,
    softplus,
    sqrt,
    square,
    sub,
    take,
    tanh,
    transpose,
    tsum,
)
