"""ckalab: a desk-scale laboratory for sparse neural-network training with
interlayer-similarity (linear CKA) regularization.

Layout:
    linalg       deterministic dense kernels, seeded Rng, matrix text IO
    autodiff     tape-based reverse-mode differentiation + gradient checker
    similarity   linear HSIC / linear CKA, pairwise heatmaps
    cka_sr       the similarity regularizer and its few-shot policies
    model        masked MLPs, capture-aware forward, seeded SGD trainer
    sparsify     epsilon-sparsity, pruning masks, iterative magnitude pruning
    diagnostics  Gaussian MI, CKA<->MI association, weight histograms
    data         synthetic datasets, IDX loader, deterministic batching
    config, cli  flat key=value experiment configs and the command line
"""

from .linalg import Rng
from .similarity import FeatureMap, linear_cka, linear_hsic, pairwise_cka
from .cka_sr import CkaSrConfig, StageCapture, aug_cka_sr_loss, cka_sr_loss
from .model import ModelSpec, Params, SparseMask, TrainConfig, train

__all__ = [
    "Rng",
    "FeatureMap",
    "linear_cka",
    "linear_hsic",
    "pairwise_cka",
    "CkaSrConfig",
    "StageCapture",
    "cka_sr_loss",
    "aug_cka_sr_loss",
    "ModelSpec",
    "Params",
    "SparseMask",
    "TrainConfig",
    "train",
]
