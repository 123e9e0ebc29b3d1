from leaklab.numeric.gradcheck import grad_check
from leaklab.numeric.linalg import Matrix, l2_norm, matmul, outer
from leaklab.numeric.optim import AdamState, adam_step, clip_grad_norm
from leaklab.numeric.pca import PcaResult, jacobi_eigh, pca_fit
from leaklab.numeric.rng import Rng

__all__ = [
    "AdamState",
    "Matrix",
    "PcaResult",
    "Rng",
    "adam_step",
    "clip_grad_norm",
    "grad_check",
    "jacobi_eigh",
    "l2_norm",
    "matmul",
    "outer",
    "pca_fit",
]
