"""The unrolled K-net / M-net / X-net network and its training loss.

Every stage applies one proximal-gradient update to each of K, M and X and
replaces the hand-chosen proximal maps by small learned networks:

* K-net: per column ``normalize(k + fc2(relu(fc1(k))))``;
* M-net, X-net: residual blocks ``x + BN(conv(relu(BN(conv(x)))))``.

X-net carries ``N_p`` auxiliary feature channels alongside the image.  All
trainable arrays live in one flat name -> array dict so the optimizer,
checkpoint code and finite-difference tests can treat them uniformly.
"""
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag


class InitializationError(ValueError):
    """The scene lacks what initialisation needs (the LI image)."""


class StageDivergenceError(FloatingPointError):
    def __init__(self, stage, what):
        super().__init__(f"non-finite {what} produced at stage {stage}")
        self.stage = stage


@dataclass
class NetConfig:
    p: int = 9
    d: int = 32
    N: int = 6
    T: int = 10
    N_p: int = 32
    n_resblocks: int = 3
    kernel: int = 3
    update_order: Sequence[str] = ("K", "M", "X")
    eta_init: float = 0.5
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.p % 2 == 0 or self.kernel % 2 == 0:
            raise ValueError("filter sizes must be odd")
        if self.N > self.d:
            raise ValueError("N must not exceed d (M0 takes the first N of d channels)")
        if self.T < 0 or self.n_resblocks < 1:
            raise ValueError("T must be >= 0 and n_resblocks >= 1")
        order = tuple(s.upper() for s in self.update_order)
        if sorted(order) != ["K", "M", "X"]:
            raise ValueError(f"update_order must permute K, M, X; got {self.update_order}")
        self.update_order = order

    def to_dict(self):
        d = asdict(self)
        d["update_order"] = list(self.update_order)
        return d


@dataclass
class LossWeights:
    mu_last: float = 1.0
    mu_other: float = 0.1
    omega1: float = 5e-4
    omega2: float = 5e-4

    def mu(self, T):
        return [self.mu_other] * T + [self.mu_last]


def softplus_inv(y):
    return math.log(math.expm1(y))


# --- parameter registry ----------------------------------------------------

def _proxnet_tensor_shapes(prefix, C, cfg):
    k = cfg.kernel
    out = OrderedDict()
    for j in range(cfg.n_resblocks):
        b = f"{prefix}.b{j}"
        for c in ("conv1", "conv2"):
            out[f"{b}.{c}.w"] = (C, C, k, k)
            out[f"{b}.{c}.b"] = (C,)
        for n in ("bn1", "bn2"):
            out[f"{b}.{n}.gamma"] = (C,)
            out[f"{b}.{n}.beta"] = (C,)
    return out


def _proxnet_K_shapes(prefix, cfg):
    d = cfg.d
    return OrderedDict([(f"{prefix}.fc1.w", (d, d)), (f"{prefix}.fc1.b", (d,)),
                        (f"{prefix}.fc2.w", (d, d)), (f"{prefix}.fc2.b", (d,))])


def parameter_shapes(cfg):
    """Ordered name -> shape map of every trainable array."""
    C_x = 1 + cfg.N_p
    shapes = OrderedDict()
    shapes["D"] = (cfg.d, cfg.p, cfg.p)
    shapes["init.Cp.w"] = (cfg.N_p, 1, 3, 3)
    shapes["init.Cp.b"] = (cfg.N_p,)
    shapes.update(_proxnet_tensor_shapes("init.proxX0", C_x, cfg))
    shapes.update(_proxnet_tensor_shapes("init.proxM0", cfg.d, cfg))
    shapes.update(_proxnet_tensor_shapes("init.proxM1", cfg.d, cfg))
    shapes.update(_proxnet_tensor_shapes("init.proxX1", C_x, cfg))
    shapes.update(_proxnet_K_shapes("init.proxK", cfg))
    shapes["init.eta"] = (3,)
    for t in range(cfg.T):
        shapes.update(_proxnet_K_shapes(f"s{t}.K", cfg))
        shapes.update(_proxnet_tensor_shapes(f"s{t}.M", cfg.N, cfg))
        shapes.update(_proxnet_tensor_shapes(f"s{t}.X", C_x, cfg))
        shapes[f"s{t}.eta"] = (3,)
    return shapes


def buffer_names(cfg):
    """Names of the batch-norm layers (each owns running mean/var)."""
    return sorted({n.rsplit(".", 1)[0] for n in parameter_shapes(cfg) if n.endswith(".gamma")})


def _init_value(name, shape, cfg, rng):
    leafname = name.rsplit(".", 1)[-1]
    if name == "D":
        D = rng.standard_normal(shape)
        D -= D.mean(axis=(1, 2), keepdims=True)
        # unit Frobenius norm for the whole dictionary keeps eta = 0.5 stable
        norms = np.linalg.norm(D.reshape(shape[0], -1), axis=1)[:, None, None]
        return D / (norms * math.sqrt(shape[0]))
    if name.endswith(".eta"):
        return np.full(shape, softplus_inv(cfg.eta_init))
    if leafname in ("b", "beta"):
        return np.zeros(shape)
    if leafname == "gamma":
        # second BN of every block starts at zero so each block is the identity
        return np.zeros(shape) if ".bn2." in name else np.ones(shape)
    if name.endswith(".fc2.w"):
        return np.zeros(shape)
    fan_in = int(np.prod(shape[1:]))
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class NetworkParams:
    """Trainable arrays, batch-norm running statistics and the architecture config."""

    def __init__(self, config, params, buffers=None):
        self.config = config
        expected = parameter_shapes(config)
        extra = sorted(set(params) - set(expected))
        missing = sorted(set(expected) - set(params))
        if extra:
            raise ValueError(f"unregistered trainable tensor(s): {extra}")
        if missing:
            raise ValueError(f"missing trainable tensor(s): {missing}")
        self.params = OrderedDict()
        for name, shape in expected.items():
            arr = np.array(params[name], dtype=np.float64)
            if arr.shape != tuple(shape):
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
            self.params[name] = arr
        self.buffers = {}
        for bn in buffer_names(config):
            C = expected[f"{bn}.gamma"][0]
            st = {"mean": np.zeros(C), "var": np.ones(C), "recorded": False}
            if buffers and bn in buffers:
                st["mean"] = np.array(buffers[bn]["mean"], dtype=np.float64)
                st["var"] = np.array(buffers[bn]["var"], dtype=np.float64)
                st["recorded"] = bool(buffers[bn].get("recorded", True))
            self.buffers[bn] = st

    @classmethod
    def initialize(cls, config=None, seed=0):
        config = config or NetConfig()
        rng = np.random.default_rng(seed)
        params = OrderedDict((n, _init_value(n, s, config, rng))
                             for n, s in parameter_shapes(config).items())
        return cls(config, params)

    def copy(self):
        return NetworkParams(self.config, {k: v.copy() for k, v in self.params.items()},
                             {k: dict(v) for k, v in self.buffers.items()})

    def param_count(self):
        return int(sum(v.size for v in self.params.values()))

    def eta(self, prefix):
        """Positive step sizes (eta1, eta2, eta3) of a stage or of ``init``."""
        return np.logaddexp(0.0, self.params[f"{prefix}.eta"])

    def bn_fallback_used(self):
        return any(st.get("identity_fallback", False) for st in self.buffers.values())


def param_count(net):
    return net.param_count()


# --- batched scenes --------------------------------------------------------

@dataclass
class Batch:
    Y: np.ndarray
    I: np.ndarray
    X_gt: np.ndarray = None
    X_li: np.ndarray = None

    @classmethod
    def from_scenes(cls, scenes):
        def stack(attr):
            vals = [getattr(s, attr) for s in scenes]
            if any(v is None for v in vals):
                return None
            return np.stack(vals)[:, None]
        return cls(stack("Y"), stack("I"), stack("X_gt"), stack("X_li"))

    @property
    def size(self):
        return self.Y.shape[0]


# --- forward ---------------------------------------------------------------

class _Run:
    """One forward pass: leaf tensors for every parameter plus the BN mode."""

    def __init__(self, net, train, update_stats):
        self.net = net
        self.cfg = net.config
        self.train = train
        self.update_stats = update_stats
        self.leaves = OrderedDict((n, ag.leaf(v, n)) for n, v in net.params.items())

    def P(self, name):
        try:
            return self.leaves[name]
        except KeyError:
            raise KeyError(f"forward pass referenced unregistered parameter {name!r}") from None

    def bn(self, prefix, x):
        return ag.batchnorm2d(x, self.P(f"{prefix}.gamma"), self.P(f"{prefix}.beta"),
                              self.net.buffers[prefix], self.train, eps=self.cfg.bn_eps,
                              momentum=self.cfg.bn_momentum, update_stats=self.update_stats)


def resblock(run, prefix, x):
    h = ag.bias2d(ag.conv2d(x, run.P(f"{prefix}.conv1.w")), run.P(f"{prefix}.conv1.b"))
    h = ag.relu(run.bn(f"{prefix}.bn1", h))
    h = ag.bias2d(ag.conv2d(h, run.P(f"{prefix}.conv2.w")), run.P(f"{prefix}.conv2.b"))
    return x + run.bn(f"{prefix}.bn2", h)


def proxnet_tensor(run, prefix, x):
    for j in range(run.cfg.n_resblocks):
        x = resblock(run, f"{prefix}.b{j}", x)
    return x


def proxnet_K(run, prefix, K):
    """Column-wise residual MLP followed by L2 normalisation over d; K is (B,d,N)."""
    d = run.cfg.d
    h = ag.einsum("ij,bjn->bin", run.P(f"{prefix}.fc1.w"), K)
    h = ag.relu(h + ag.reshape(run.P(f"{prefix}.fc1.b"), (1, d, 1)))
    h = ag.einsum("ij,bjn->bin", run.P(f"{prefix}.fc2.w"), h)
    h = h + ag.reshape(run.P(f"{prefix}.fc2.b"), (1, d, 1))
    return ag.normalize_columns(K + h)


def _dict_conv_weight(run):
    d, p = run.cfg.d, run.cfg.p
    D = run.P("D")
    return ag.reshape(D, (1, d, p, p)), ag.reshape(D, (d, 1, p, p))


def synthesize(run, K, M):
    """Batched ``(D*K) (x) M`` as sum_i D_i conv (sum_n K[i,n] M_n); (B,1,H,W)."""
    w_sum, _ = _dict_conv_weight(run)
    Z = ag.einsum("bin,bnhw->bihw", K, M)
    return ag.conv2d(Z, w_sum, flip=True)


def dict_synthesize(run, M):
    """Simplified (unweighted) model ``D (x) M`` with one map per filter."""
    w_sum, _ = _dict_conv_weight(run)
    return ag.conv2d(M, w_sum, flip=True)


def dict_correlate(run, R):
    """Correlate a (B,1,H,W) residual with every dictionary filter -> (B,d,H,W)."""
    _, w_each = _dict_conv_weight(run)
    return ag.conv2d(R, w_each)


def _eta(run, prefix):
    e = ag.softplus(run.P(f"{prefix}.eta"))
    return e[0], e[1], e[2]


def _check(stage, **tensors):
    for what, t in tensors.items():
        if not np.all(np.isfinite(t.value)):
            raise StageDivergenceError(stage, what)


def init_state(run, batch):
    """K0, M0, X0, P0 from the LI image through the warm-up sub-networks."""
    if batch.X_li is None:
        raise InitializationError("scene has no X_li; run the LI baseline (ctsim.li_mar) first")
    cfg = run.cfg
    Y, I = ag.const(batch.Y), ag.const(batch.I)
    x_li = ag.const(batch.X_li)
    e1, e2, e3 = _eta(run, "init")

    feat = ag.bias2d(ag.conv2d(x_li, run.P("init.Cp.w")), run.P("init.Cp.b"))
    Z = proxnet_tensor(run, "init.proxX0", ag.concat([x_li, feat], axis=1))
    X, P = Z[:, :1], Z[:, 1:]

    # weighting-free model, d coefficient maps, starting from M = 0
    R = I * (X - Y)
    M = proxnet_tensor(run, "init.proxM0", -(e2 * ag.scale(dict_correlate(run, R), 2.0)))
    # one refinement iteration of M then X
    R = I * (dict_synthesize(run, M) + X - Y)
    M = proxnet_tensor(run, "init.proxM1", M - e2 * ag.scale(dict_correlate(run, R), 2.0))
    R = I * (dict_synthesize(run, M) + X - Y)
    Z = proxnet_tensor(run, "init.proxX1", ag.concat([X - e3 * R, P], axis=1))
    X, P = Z[:, :1], Z[:, 1:]

    M0 = M[:, :cfg.N]
    # K-net step from K = 0, where the synthesised artifact vanishes
    R = I * (X - Y)
    G = ag.scale(ag.einsum("bihw,bnhw->bin", dict_correlate(run, R), M0), 2.0)
    K0 = proxnet_K(run, "init.proxK", -(e1 * G))
    _check(0, K=K0, M=M0, X=X)
    return {"K": K0, "M": M0, "X": X, "P": P}


def stage_forward(run, t, batch, state):
    """One unrolled iteration; returns the new state and its artifact layer."""
    Y, I = ag.const(batch.Y), ag.const(batch.I)
    e1, e2, e3 = _eta(run, f"s{t}")
    K, M, X, P = state["K"], state["M"], state["X"], state["P"]
    A = None
    for which in run.cfg.update_order:
        if A is None:
            A = synthesize(run, K, M)
        R = I * (A + X - Y)
        if which == "K":
            G = ag.scale(ag.einsum("bihw,bnhw->bin", dict_correlate(run, R), M), 2.0)
            K = proxnet_K(run, f"s{t}.K", K - e1 * G)
            A = None
        elif which == "M":
            G = ag.scale(ag.einsum("bin,bihw->bnhw", K, dict_correlate(run, R)), 2.0)
            M = proxnet_tensor(run, f"s{t}.M", M - e2 * G)
            A = None
        else:
            Z = proxnet_tensor(run, f"s{t}.X", ag.concat([X - e3 * R, P], axis=1))
            X, P = Z[:, :1], Z[:, 1:]
    if A is None:
        A = synthesize(run, K, M)
    _check(t + 1, K=K, M=M, X=X, P=P)
    return {"K": K, "M": M, "X": X, "P": P}, A


def network_forward(net, batch, train=False, update_stats=None, run=None):
    """Initialisation plus ``T`` stages.

    Returns ``(outputs, run)`` where ``outputs`` holds per-stage tensors under
    ``X``, ``A`` and ``K`` (lists of length T+1).
    """
    if update_stats is None:
        update_stats = train
    run = run or _Run(net, train, update_stats)
    state = init_state(run, batch)
    out = {"X": [state["X"]], "A": [synthesize(run, state["K"], state["M"])], "K": [state["K"]]}
    for t in range(net.config.T):
        state, A = stage_forward(run, t, batch, state)
        out["X"].append(state["X"])
        out["A"].append(A)
        out["K"].append(state["K"])
    return out, run


def loss_tensor(outputs, batch, weights):
    """Multi-stage loss, averaged over the batch."""
    if batch.X_gt is None:
        raise ValueError("loss needs ground-truth X_gt")
    I = ag.const(batch.I)
    Xgt = ag.const(batch.X_gt)
    art = ag.const(batch.I * (batch.Y - batch.X_gt))
    T = len(outputs["X"]) - 1
    total = None
    for mu, X, A in zip(weights.mu(T), outputs["X"], outputs["A"]):
        e = I * (Xgt - X)
        term = ag.sum_(ag.square(e))
        term = term + ag.scale(ag.sum_(ag.abs_(e)), weights.omega1)
        term = term + ag.scale(ag.sum_(ag.abs_(art - I * A)), weights.omega2)
        term = ag.scale(term, mu)
        total = term if total is None else total + term
    return ag.scale(total, 1.0 / batch.size)


def loss_and_grads(net, batch, weights, train=True, update_stats=None):
    """Forward, loss and exact reverse-mode gradients for every parameter."""
    outputs, run = network_forward(net, batch, train=train, update_stats=update_stats)
    L = loss_tensor(outputs, batch, weights)
    ag.backward(L)
    grads = OrderedDict()
    for name, lf in run.leaves.items():
        grads[name] = lf.grad if lf.grad is not None else np.zeros_like(lf.value)
    return float(L.value), grads, outputs


def forward_arrays(net, batch, train=False, update_stats=None):
    """Per-stage X and A as plain (B,H,W) arrays."""
    outputs, _ = network_forward(net, batch, train=train, update_stats=update_stats)
    return {"X": [x.value[:, 0] for x in outputs["X"]],
            "A": [a.value[:, 0] for a in outputs["A"]],
            "K": [k.value for k in outputs["K"]]}


def reconstruct(net, scene, return_stages=False):
    """Eval-mode reconstruction ``X^(T)`` of one scene (and optionally every stage)."""
    out = forward_arrays(net, Batch.from_scenes([scene]), train=False)
    if return_stages:
        return [x[0] for x in out["X"]], [a[0] for a in out["A"]]
    return out["X"][-1][0]
