"""Weighted convolutional dictionary model of metal artifacts.

An artifact layer is synthesised as ``A = sum_n (sum_i D[i] K[i, n]) * M[n]``
where ``D`` (d,p,p) is a shared filter dictionary, ``K`` (d,N) holds the
per-image mixing weights and ``M`` (N,H,W) the coefficient maps.  The
fidelity ``g = ||I . (A + X - Y)||_F^2`` is the unscaled squared norm, so every
analytic gradient below carries the factor 2.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor_ops as ops
from .tensor_ops import DimensionError


@dataclass
class MaskedScene:
    """Observed image ``Y`` with its binary non-metal mask ``I``.

    ``X_gt`` (ground truth) and ``X_li`` (LI-restored image) are optional and
    must share the shape of ``Y`` when present.
    """

    Y: np.ndarray
    I: np.ndarray
    X_gt: Optional[np.ndarray] = None
    X_li: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.Y = np.asarray(self.Y, dtype=np.float64)
        self.I = np.asarray(self.I, dtype=np.float64)
        if self.Y.ndim != 2:
            raise DimensionError(f"Y must be 2-D, got {self.Y.shape}")
        if not np.all((self.I == 0) | (self.I == 1)):
            raise ValueError("non-metal mask I must be exactly binary")
        for name in ("I", "X_gt", "X_li"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != self.Y.shape:
                raise DimensionError(f"{name} has shape {arr.shape}, Y has {self.Y.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            setattr(self, name, arr)
        if not np.all(np.isfinite(self.Y)):
            raise ValueError("Y contains non-finite values")

    @property
    def shape(self):
        return self.Y.shape


@dataclass
class StepSizes:
    eta1: float = 0.5
    eta2: float = 0.5
    eta3: float = 0.5

    def __post_init__(self):
        for name in ("eta1", "eta2", "eta3"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")


def synthesize_artifact(D, K, M):
    """Artifact layer ``(D*K) (x) M`` as an (H,W) plane."""
    D = np.asarray(D, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if K.shape[1] != M.shape[0]:
        raise DimensionError(f"K has {K.shape[1]} columns, M has {M.shape[0]} channels")
    return ops.conv_bank_sum(ops.weighted_combine(D, K), M)


def masked_residual(scene, X, A):
    return scene.I * (A + X - scene.Y)


def fidelity(scene, X, A):
    """Squared Frobenius norm of the masked residual."""
    R = masked_residual(scene, X, A)
    return float(np.sum(R * R))


def grad_K(D, M, R):
    """Gradient of the fidelity with respect to K, a (d,N) matrix.

    Column n is ``2 * U3(D (x)d M_n) vec(R)``: the depthwise responses of
    ``M_n`` to every dictionary filter, unfolded along the channel mode and
    contracted with the masked residual.
    """
    D = np.asarray(D, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    r = np.asarray(R, dtype=np.float64).reshape(-1)
    G = np.empty((D.shape[0], M.shape[0]))
    for n in range(M.shape[0]):
        G[:, n] = ops.mode3_unfold(ops.depthwise_conv(D, M[n])) @ r
    return 2.0 * G


def grad_M(D, K, R):
    """Gradient of the fidelity with respect to M: ``2 (D*K) (x)^T R``."""
    return 2.0 * ops.conv_transpose_bank(ops.weighted_combine(D, K), R)


def half_step_K(K, grad, eta1):
    return np.asarray(K, dtype=np.float64) - eta1 * np.asarray(grad, dtype=np.float64)


def half_step_M(M, grad, eta2):
    return np.asarray(M, dtype=np.float64) - eta2 * np.asarray(grad, dtype=np.float64)


def half_step_X(scene, X, A, eta3):
    """Blend non-metal pixels toward ``Y - A``; metal pixels keep ``X``."""
    I = scene.I
    return (1.0 - eta3 * I) * X + eta3 * I * (scene.Y - A)
