"""Classical proximal-gradient solver for the weighted dictionary model.

K, M and X are updated in turn (Gauss-Seidel: each block sees the latest
values of the others).  The proximal maps are fixed, hand-chosen operators:
column normalisation for K, soft thresholding for M and an optional box clamp
for X.
"""
import csv
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from . import wcd
from .wcd import StepSizes

EPS = 1e-12


class DivergenceError(FloatingPointError):
    def __init__(self, step, iteration):
        super().__init__(f"non-finite value produced by the {step}-update at iteration {iteration}")
        self.step = step
        self.iteration = iteration


class DegenerateColumnWarning(RuntimeWarning):
    """A K column had (near) zero norm and was replaced by e1."""


@dataclass
class ClassicalProxConfig:
    """Solver settings.

    The M-update soft-thresholds at ``eta2 * lambda_M``, so ``lambda_M`` is the
    weight of the L1 term in the traced objective
    ``fidelity + lambda_M * ||M||_1``.
    """

    lambda_M: float = 0.0
    x_clamp: Optional[Tuple[float, float]] = None
    steps: StepSizes = field(default_factory=StepSizes)
    max_iters: int = 50
    tol: float = 1e-8
    update_order: Sequence[str] = ("K", "M", "X")

    def __post_init__(self):
        if self.lambda_M < 0:
            raise ValueError("lambda_M must be non-negative")
        if self.x_clamp is not None:
            lo, hi = self.x_clamp
            if not lo < hi:
                raise ValueError(f"x_clamp needs lo < hi, got {self.x_clamp}")
            self.x_clamp = (float(lo), float(hi))
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.tol < 0:
            raise ValueError("tol must be non-negative")
        order = tuple(s.upper() for s in self.update_order)
        if sorted(order) != ["K", "M", "X"]:
            raise ValueError(f"update_order must be a permutation of K, M, X; got {self.update_order}")
        self.update_order = order


@dataclass
class SolverState:
    K: np.ndarray
    M: np.ndarray
    X: np.ndarray
    objective_trace: list = field(default_factory=list)
    fidelity_trace: list = field(default_factory=list)
    iters_run: int = 0
    degenerate_columns: int = 0

    def copy(self):
        return SolverState(self.K.copy(), self.M.copy(), self.X.copy(),
                           list(self.objective_trace), list(self.fidelity_trace),
                           self.iters_run, self.degenerate_columns)


def degenerate_columns(K_half):
    return np.linalg.norm(K_half, axis=0) < EPS


def prox_K(K_half):
    """Project every column onto the unit sphere.

    A column with norm below ``EPS`` has no direction; it becomes e1 and a
    :class:`DegenerateColumnWarning` is issued.
    """
    K_half = np.asarray(K_half, dtype=np.float64)
    norms = np.linalg.norm(K_half, axis=0)
    out = K_half / np.maximum(norms, EPS)
    bad = norms < EPS
    if np.any(bad):
        out[:, bad] = 0.0
        out[0, bad] = 1.0
        warnings.warn(f"{int(bad.sum())} degenerate K column(s) replaced by e1",
                      DegenerateColumnWarning, stacklevel=2)
    return out


def prox_M(M_half, threshold):
    """Elementwise soft threshold ``sign(v) max(|v| - threshold, 0)``."""
    M_half = np.asarray(M_half, dtype=np.float64)
    return np.sign(M_half) * np.maximum(np.abs(M_half) - threshold, 0.0)


def prox_X(X_half, cfg):
    if cfg.x_clamp is None:
        return np.asarray(X_half, dtype=np.float64)
    return np.clip(X_half, *cfg.x_clamp)


def objective(scene, D, K, M, X, lambda_M):
    """Return (fidelity, L1 term, total)."""
    fid = wcd.fidelity(scene, X, wcd.synthesize_artifact(D, K, M))
    l1 = lambda_M * float(np.abs(M).sum())
    return fid, l1, fid + l1


def solver_step(scene, D, K, M, X, which, cfg):
    """Apply one block update; returns the new (K, M, X)."""
    steps = cfg.steps
    if which == "K":
        R = wcd.masked_residual(scene, X, wcd.synthesize_artifact(D, K, M))
        K = prox_K(wcd.half_step_K(K, wcd.grad_K(D, M, R), steps.eta1))
    elif which == "M":
        R = wcd.masked_residual(scene, X, wcd.synthesize_artifact(D, K, M))
        M = prox_M(wcd.half_step_M(M, wcd.grad_M(D, K, R), steps.eta2), steps.eta2 * cfg.lambda_M)
    else:
        A = wcd.synthesize_artifact(D, K, M)
        X = prox_X(wcd.half_step_X(scene, X, A, steps.eta3), cfg)
    return K, M, X


def run_solver(scene, D, init, cfg, trace_path=None):
    """Iterate the K/M/X proximal updates from ``init``.

    Stops after ``cfg.max_iters`` iterations or once the objective decreases
    by less than ``cfg.tol``.  ``objective_trace[0]`` is the objective at
    ``init``; entry t is the value after iteration t.  Raises
    :class:`DivergenceError` if any iterate becomes non-finite.
    """
    D = np.asarray(D, dtype=np.float64)
    state = init.copy()
    K, M, X = state.K, state.M, state.X
    rows = []
    fid, l1, total = objective(scene, D, K, M, X, cfg.lambda_M)
    state.objective_trace = [total]
    state.fidelity_trace = [fid]
    rows.append((0, fid, l1, total))
    for it in range(1, cfg.max_iters + 1):
        for which in cfg.update_order:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", DegenerateColumnWarning)
                K, M, X = solver_step(scene, D, K, M, X, which, cfg)
            state.degenerate_columns += sum(
                issubclass(w.category, DegenerateColumnWarning) for w in caught)
            new = {"K": K, "M": M, "X": X}[which]
            if not np.all(np.isfinite(new)):
                raise DivergenceError(which, it)
        fid, l1, total = objective(scene, D, K, M, X, cfg.lambda_M)
        if not np.isfinite(total):
            raise DivergenceError("objective", it)
        state.objective_trace.append(total)
        state.fidelity_trace.append(fid)
        rows.append((it, fid, l1, total))
        state.iters_run = it
        if state.objective_trace[-2] - total < cfg.tol:
            break
    state.K, state.M, state.X = K, M, X
    if trace_path is not None:
        with open(trace_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "fidelity", "l1", "total"])
            for it, f_, l_, t_ in rows:
                w.writerow([it, repr(f_), repr(l_), repr(t_)])
    return state


def initial_state(scene, D, n_atoms, rng=None, X0=None):
    """Zero codes, random unit-norm K and ``X0`` (default: ``scene.X_li`` or ``Y``)."""
    rng = np.random.default_rng(rng)
    d = np.asarray(D).shape[0]
    K = prox_K(rng.standard_normal((d, n_atoms)))
    M = np.zeros((n_atoms,) + scene.shape)
    if X0 is None:
        X0 = scene.X_li if scene.X_li is not None else scene.Y
    return SolverState(K, M, np.array(X0, dtype=np.float64))
