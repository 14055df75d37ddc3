"""Acceptance criteria 1-10, each printed as one PASS/FAIL line."""
import json
import math
import time
import warnings

import numpy as np
import pytest

from acdmar import ctsim, solver, tensor_ops as T, wcd
from acdmar.acdnet import model as m
from acdmar.acdnet import train as tr
from acdmar.config import load_run_config
from acdmar.ctsim import LIEdgeWarning
from acdmar.metrics import masked_psnr
from acdmar.solver import ClassicalProxConfig
from cliutil import run, tree_bytes, write_ini
from oracles import central_diff, corr_same_naive, rel_err, synthesize_naive
from planted import certify_steps, planted_instance

TOY_STEPS = 200
TOY_TRAIN, TOY_HELD_OUT = 20, 10


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return emit


# --- 1. gradient exactness -------------------------------------------------------

def test_c01_gradient_exactness(report):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        H = int(rng.integers(8, 17))
        d, N, p = int(rng.integers(2, 9)), int(rng.integers(1, 4)), int(rng.choice([3, 5]))
        I = np.ones((H, H))
        I[H // 3:H // 3 + 2, H // 2:H // 2 + 2] = 0
        scene = wcd.MaskedScene(Y=rng.random((H, H)), I=I)
        D = rng.standard_normal((d, p, p))
        K = rng.standard_normal((d, N))
        M = rng.standard_normal((N, H, H))
        X = rng.random((H, H))
        R = wcd.masked_residual(scene, X, wcd.synthesize_artifact(D, K, M))
        fd_K = central_diff(lambda Kv: wcd.fidelity(scene, X, wcd.synthesize_artifact(D, Kv, M)), K.copy())
        fd_M = central_diff(lambda Mv: wcd.fidelity(scene, X, wcd.synthesize_artifact(D, K, Mv)), M.copy())
        worst = max(worst, rel_err(wcd.grad_K(D, M, R), fd_K), rel_err(wcd.grad_M(D, K, R), fd_M))
    dt = time.perf_counter() - t0
    ok = report(1, worst < 1e-6 and dt < 10, f"max rel err {worst:.2e} over 20 instances, {dt:.1f} s")
    assert ok


# --- 2. oracle equivalence -------------------------------------------------------

def test_c02_oracle_equivalence(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    err_syn = err_tr = 0.0
    for _ in range(20):
        H, W = (int(v) for v in rng.integers(3, 9, size=2))
        d, N = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        p = int(rng.choice([1, 3, 5]))
        D = rng.standard_normal((d, p, p))
        K = rng.standard_normal((d, N))
        M = rng.standard_normal((N, H, W))
        err_syn = max(err_syn, np.abs(wcd.synthesize_artifact(D, K, M) - synthesize_naive(D, K, M)).max())
        B = rng.standard_normal((N, p, p))
        R = rng.standard_normal((H, W))
        ref = np.stack([corr_same_naive(B[n], R) for n in range(N)])
        err_tr = max(err_tr, np.abs(T.conv_transpose_bank(B, R) - ref).max())
    err_adj = 0.0
    for _ in range(100):
        N = int(rng.integers(1, 5))
        p = int(rng.choice([1, 3, 5]))
        H, W = (int(v) for v in rng.integers(3, 9, size=2))
        B = rng.standard_normal((N, p, p))
        M = rng.standard_normal((N, H, W))
        R = rng.standard_normal((H, W))
        err_adj = max(err_adj, abs(np.vdot(T.conv_bank_sum(B, M), R) - np.vdot(M, T.conv_transpose_bank(B, R))))
    dt = time.perf_counter() - t0
    ok = err_syn <= 1e-12 and err_tr <= 1e-12 and err_adj <= 1e-10 and dt < 5
    report(2, ok, f"synthesis {err_syn:.1e}, transpose {err_tr:.1e}, adjoint {err_adj:.1e}, {dt:.2f} s")
    assert ok


# --- 4. classical recovery -------------------------------------------------------

def test_c04_classical_recovery(report):
    t0 = time.perf_counter()
    scene, D, _, _ = planted_instance(0)
    init = solver.initial_state(scene, D, 3, rng=0, X0=scene.X_gt)
    cfg = certify_steps(scene, D, init, ClassicalProxConfig(max_iters=50, tol=0.0))
    st = solver.run_solver(scene, D, init, cfg)
    drop = 1 - st.fidelity_trace[-1] / st.fidelity_trace[0]
    rise = float(np.max(np.diff(st.objective_trace)))
    dt = time.perf_counter() - t0
    ok = drop >= 0.9 and rise <= 1e-9 and st.iters_run <= 50 and dt < 30
    report(4, ok, f"fidelity drop {100 * drop:.2f}% in {st.iters_run} iterations, "
                  f"max objective rise {rise:.1e}, {dt:.1f} s")
    assert ok


# --- 5. network backprop exactness ------------------------------------------------

def test_c05_backprop_exactness(report):
    t0 = time.perf_counter()
    cfg = m.NetConfig(d=8, N=3, T=2, N_p=4)
    net = m.NetworkParams.initialize(cfg, seed=1)
    rng = np.random.default_rng(0)
    # move off the identity init so no branch is dead
    for k, v in net.params.items():
        net.params[k] = v + 0.05 * rng.standard_normal(v.shape)
    B, H = 2, 16
    Y = rng.random((B, 1, H, H))
    I = np.ones((B, 1, H, H))
    I[:, :, 5:7, 6:9] = 0
    batch = m.Batch(Y, I, rng.random((B, 1, H, H)), Y + 0.05 * rng.standard_normal(Y.shape))
    w = m.LossWeights()
    L, grads, _ = m.loss_and_grads(net, batch, w, train=True, update_stats=False)

    def f():
        out, _ = m.network_forward(net, batch, train=True, update_stats=False)
        return float(m.loss_tensor(out, batch, w).value)

    flat = [(n, i) for n, v in net.params.items() for i in np.ndindex(v.shape)]
    pick = rng.choice(len(flat), size=math.ceil(0.05 * len(flat)), replace=False)
    h = 1e-6
    an, fd = [], []
    for j in pick:
        name, idx = flat[j]
        v = net.params[name]
        old = v[idx]
        v[idx] = old + h
        fp = f()
        v[idx] = old - h
        fm = f()
        v[idx] = old
        an.append(grads[name][idx])
        fd.append((fp - fm) / (2 * h))
    an, fd = np.array(an), np.array(fd)
    vec = rel_err(an, fd)
    # central differences cannot resolve values below ~eps*|L|/h
    resolution = 100 * np.finfo(float).eps * abs(L) / h
    big = np.maximum(np.abs(an), np.abs(fd)) > resolution
    per = float((np.abs(an - fd)[big] / np.maximum(np.abs(an), np.abs(fd))[big]).max())
    small_ok = bool(np.all(np.abs(an - fd)[~big] <= resolution))
    dt = time.perf_counter() - t0
    ok = vec < 1e-3 and per < 1e-3 and small_ok and dt < 120
    report(5, ok, f"{len(pick)} of {len(flat)} params: sample rel err {vec:.1e}, worst per-component "
                  f"{per:.1e} ({int(big.sum())} above FD resolution {resolution:.0e}, "
                  f"{int((~big).sum())} below), {dt:.0f} s")
    assert ok


# --- 7. tomography round trip ---------------------------------------------------------

def test_c07_round_trip(report):
    t0 = time.perf_counter()
    ph = ctsim.make_phantom("shepp_logan", 128)
    rt = ctsim.fbp(ctsim.radon(ph, 180), 128)
    p = masked_psnr(rt, ph, np.ones_like(ph))
    dt = time.perf_counter() - t0
    ok = p >= 25.0 and dt < 10
    report(7, ok, f"round-trip PSNR {p:.2f} dB, {dt:.2f} s")
    assert ok


# --- 8. LI direction ------------------------------------------------------------------

def test_c08_li_direction(report, tmp_path):
    t0 = time.perf_counter()
    rc = load_run_config()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LIEdgeWarning)
        assert run("simulate", "--out", tmp_path / "desk") == 0
    index = json.loads((tmp_path / "desk" / "corpus.json").read_text())
    scenes = [ctsim.read_bundle(tmp_path / "desk" / e["path"]) for e in index["cases"]]
    y = float(np.mean([masked_psnr(s.Y, s.X_gt, s.I) for s in scenes]))
    li = float(np.mean([masked_psnr(s.X_li, s.X_gt, s.I) for s in scenes]))
    dt = time.perf_counter() - t0
    ok = li > y and dt < 60 and len(scenes) == rc.section("sim")["n_train"] + rc.section("sim")["n_test"]
    report(8, ok, f"{len(scenes)} desk cases: input {y:.2f} dB, LI {li:.2f} dB, {dt:.1f} s")
    assert ok


# --- 9. determinism -----------------------------------------------------------------

def test_c09_determinism(report, tmp_path):
    ini = write_ini(tmp_path / "tiny.ini")
    trees = []
    for k in range(2):
        base = tmp_path / f"run{k}"
        assert run("simulate", "--config", ini, "--out", base / "corpus") == 0
        assert run("train", "--config", ini, "--corpus", base / "corpus", "--out", base / "train") == 0
        assert run("reconstruct", "--config", ini, "--checkpoint", base / "train" / "checkpoint.ckpt",
                   "--corpus", base / "corpus", "--out", base / "rec") == 0
        trees.append({part: tree_bytes(base / part) for part in ("corpus", "train", "rec")})
    same = {part: trees[0][part] == trees[1][part] for part in trees[0]}
    n_files = sum(len(v) for v in trees[0].values())
    ok = all(same.values())
    report(9, ok, f"{n_files} files compared; " + ", ".join(f"{k} {'identical' if v else 'DIFFER'}"
                                                            for k, v in same.items()))
    assert ok


# --- 3, 6, 10: the toy training run ---------------------------------------------------------

def _toy_scene(cfg, phantom_seed, mask_seed):
    ph = ctsim.make_phantom("random_ellipses", cfg.image_size, seed=phantom_seed)
    s = ctsim.simulate_case(ph, ctsim.make_metal_mask(cfg.image_size, seed=mask_seed), cfg,
                            seed=phantom_seed)
    ctsim.li_mar(s, cfg)
    return s


@pytest.fixture(scope="module")
def toy():
    """T=3 network trained for 200 steps on 20 simulated 64x64 desk cases."""
    rc = load_run_config(overrides={"sim.image_size": 64})
    cfg = rc.sim_config()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LIEdgeWarning)
        train_set = [_toy_scene(cfg, i, 1000 + i) for i in range(TOY_TRAIN)]
        held_out = [_toy_scene(cfg, 100 + i, 2000 + i) for i in range(TOY_HELD_OUT)]
    steps_per_epoch = math.ceil(TOY_TRAIN / rc.section("train")["batch_size"])
    rc = load_run_config(overrides={"sim.image_size": 64,
                                    "train.epochs": math.ceil(TOY_STEPS / steps_per_epoch)})
    tcfg = rc.train_config()
    net = m.NetworkParams.initialize(rc.net_config(), seed=rc.seed)
    L0 = tr.dataset_loss(net, train_set, tcfg.weights)
    t0 = time.perf_counter()
    res = tr.train(net, train_set, tcfg)
    elapsed = time.perf_counter() - t0
    L1 = tr.dataset_loss(net, train_set, tcfg.weights)
    return dict(net=net, res=res, train=train_set, held_out=held_out, L0=L0, L1=L1,
                elapsed=elapsed, tcfg=tcfg)


def test_c03_unit_columns(report, toy):
    worst = 0.0
    # classical solver, every iteration of a full run
    scene, D, _, _ = planted_instance(1)
    state = solver.initial_state(scene, D, 3, rng=1, X0=scene.X_gt)
    cfg = ClassicalProxConfig(max_iters=1, tol=0.0)
    for _ in range(50):
        state = solver.run_solver(scene, D, state, cfg)
        worst = max(worst, np.abs(np.linalg.norm(state.K, axis=0) - 1).max())
    # every unrolled stage of the trained toy network on every toy case
    for s in toy["train"] + toy["held_out"]:
        out = m.forward_arrays(toy["net"], m.Batch.from_scenes([s]))
        for K in out["K"]:
            worst = max(worst, np.abs(np.linalg.norm(K, axis=1) - 1).max())
    ok = worst <= 1e-6
    report(3, ok, f"max | ||K_n|| - 1 | = {worst:.1e} (50 solver iterations, "
                  f"{len(toy['train']) + len(toy['held_out'])} cases x {toy['net'].config.T + 1} stages)")
    assert ok


def test_c06_toy_training(report, toy):
    drop = 1 - toy["L1"] / toy["L0"]
    pin, pli, pout = [], [], []
    for s in toy["held_out"]:
        pin.append(masked_psnr(s.Y, s.X_gt, s.I))
        pli.append(masked_psnr(s.X_li, s.X_gt, s.I))
        pout.append(masked_psnr(m.reconstruct(toy["net"], s), s.X_gt, s.I))
    pin, pli, pout = (float(np.mean(v)) for v in (pin, pli, pout))
    steps = len(toy["res"].step_losses)
    ok = (drop >= 0.5 and pout >= pin + 3 and pout > pli and steps == TOY_STEPS
          and toy["elapsed"] < 15 * 60)
    report(6, ok, f"{steps} steps in {toy['elapsed'] / 60:.1f} min; loss {toy['L0']:.3f} -> "
                  f"{toy['L1']:.3f} ({100 * drop:.1f}% drop); held-out PSNR input {pin:.2f}, "
                  f"LI {pli:.2f}, X^(T) {pout:.2f} dB")
    assert ok


def test_c10_fidelity_monotone(report, toy):
    mono, traces = 0, []
    for s in toy["held_out"]:
        Xs, As = m.reconstruct(toy["net"], s, return_stages=True)
        f = [float(np.linalg.norm(s.I * (s.Y - x - a))) for x, a in zip(Xs, As)]
        traces.append(f)
        mono += all(b <= a for a, b in zip(f, f[1:]))
    frac = mono / len(traces)
    ok = frac >= 0.8
    detail = "; ".join("[" + ", ".join(f"{v:.3f}" for v in tr_) + "]" for tr_ in traces)
    report(10, ok, f"{mono}/{len(traces)} held-out cases non-increasing ({100 * frac:.0f}%); "
                   f"per-case masked fidelity by stage: {detail}")
    assert ok
