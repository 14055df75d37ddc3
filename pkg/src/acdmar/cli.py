"""``acdmar`` command line: simulate, solve, train, reconstruct, eval, bench.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence,
4 missing input.
"""
import argparse
import csv
import json
import os
import platform
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import backend, ctsim, solver, viz, wcd
from .acdnet import checkpoint
from .acdnet.model import (Batch, InitializationError, NetworkParams, StageDivergenceError,
                           forward_arrays)
from .acdnet.train import train as train_net
from .config import ConfigError, dump_run_config, load_run_config
from .metrics import evaluate

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISSING = 0, 2, 3, 4
REFERENCE_PARAM_COUNT = 1602809
CONFIG_NAME = "config.ini"


class MissingInput(FileNotFoundError):
    pass


# --- helpers ---------------------------------------------------------------

def _prepare_out(rc, out):
    os.makedirs(out, exist_ok=True)
    dump_run_config(rc, os.path.join(out, CONFIG_NAME))


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_case(path):
    if not os.path.isfile(os.path.join(path, "meta.json")):
        raise MissingInput(f"no case bundle at {path}")
    return ctsim.read_bundle(path)


def _corpus_cases(corpus, split):
    index = os.path.join(corpus, "corpus.json")
    if not os.path.isfile(index):
        raise MissingInput(f"{corpus} has no corpus.json; run `acdmar simulate` first")
    with open(index) as fh:
        entries = json.load(fh)["cases"]
    return [e for e in entries if split is None or e["split"] == split]


def _metal_groups(areas, n_groups):
    """Group label per mask: G1 holds the largest masks, G<n> the smallest."""
    order = np.argsort(-np.asarray(areas), kind="stable")
    labels = [None] * len(areas)
    for rank, i in enumerate(order):
        labels[i] = f"G{1 + rank * n_groups // len(areas)}"
    return labels


# --- simulate --------------------------------------------------------------

def _simulate_one(job):
    cfg = ctsim.SimConfig(**job["sim"])
    phantom = ctsim.make_phantom(job["phantom"], cfg.image_size, seed=job["phantom_seed"])
    mask = ctsim.make_metal_mask(cfg.image_size, seed=job["mask_seed"])
    scene = ctsim.simulate_case(phantom, mask, cfg, seed=job["noise_seed"])
    ctsim.li_mar(scene, cfg)
    extra = {k: job[k] for k in ("case_id", "split", "mask_id", "size_group")}
    extra["phantom_seed"] = job["phantom_seed"]
    ctsim.write_bundle(job["path"], scene, extra)
    return job["case_id"]


def cmd_simulate(rc, args):
    out = args.out
    _prepare_out(rc, out)
    s = rc.section("sim")
    cfg = rc.sim_config()
    n_train = args.n_train if args.n_train is not None else s["n_train"]
    n_test = args.n_test if args.n_test is not None else s["n_test"]
    rng = np.random.default_rng(rc.seed)
    mask_seeds = rng.integers(0, 2**31 - 1, size=s["n_masks"])
    # the mask pool is split once: train cases never see a test mask
    n_tm = s["n_train_masks"]
    test_ids = list(range(n_tm, s["n_masks"]))
    test_areas = [ctsim.make_metal_mask(cfg.image_size, seed=int(mask_seeds[i])).sum()
                  for i in test_ids]
    groups = dict(zip(test_ids, _metal_groups(test_areas, s["n_size_groups"])))
    sim_dict = ctsim.sim_config_dict(cfg)
    jobs = []
    for split, n in (("train", n_train), ("test", n_test)):
        for j in range(n):
            if split == "train":
                mid = int(rng.integers(0, n_tm))
            else:
                mid = test_ids[j % len(test_ids)]
            case_id = f"{split}_{j:04d}"
            jobs.append({"sim": sim_dict, "phantom": s["phantom"], "case_id": case_id,
                         "split": split, "mask_id": mid, "size_group": groups.get(mid),
                         "mask_seed": int(mask_seeds[mid]),
                         "phantom_seed": int(rng.integers(0, 2**31 - 1)),
                         "noise_seed": int(rng.integers(0, 2**31 - 1)),
                         "path": os.path.join(out, split, case_id)})
    if rc.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=rc.jobs) as ex:
            list(ex.map(_simulate_one, jobs))
    else:
        for job in jobs:
            _simulate_one(job)
    index = {"cases": [{"case_id": j["case_id"], "split": j["split"],
                        "path": os.path.relpath(j["path"], out), "mask_id": j["mask_id"],
                        "size_group": j["size_group"]} for j in jobs],
             "train_mask_ids": list(range(n_tm)), "test_mask_ids": test_ids,
             "sim": sim_dict, "seed": rc.seed}
    _write_json(os.path.join(out, "corpus.json"), index)
    print(f"wrote {len(jobs)} case(s) to {out}")
    return EXIT_OK


# --- solve -----------------------------------------------------------------

def _random_dictionary(d, p, seed):
    rng = np.random.default_rng(seed)
    D = rng.standard_normal((d, p, p))
    D -= D.mean(axis=(1, 2), keepdims=True)
    return D / np.linalg.norm(D)


def cmd_solve(rc, args):
    scene = _load_case(args.case)
    sv = rc.section("solver")
    if args.checkpoint:
        net, _, _ = _load_checkpoint(args.checkpoint)
        D = net.params["D"]
    else:
        D = _random_dictionary(sv["d"], sv["p"], rc.seed)
    cfg = rc.solver_config()
    _prepare_out(rc, args.out)
    init = solver.initial_state(scene, D, sv["n_atoms"], rng=rc.seed)
    state = solver.run_solver(scene, D, init, cfg, trace_path=os.path.join(args.out, "trace.csv"))
    A = wcd.synthesize_artifact(D, state.K, state.M)
    ctsim.write_raw(os.path.join(args.out, "X.raw"), state.X)
    ctsim.write_raw(os.path.join(args.out, "A.raw"), A)
    f0, f1 = state.fidelity_trace[0], state.fidelity_trace[-1]
    _write_json(os.path.join(args.out, "meta.json"), {
        "shape": list(scene.shape), "dtype": "float32-le", "iterations": state.iters_run,
        "fidelity_initial": f0, "fidelity_final": f1,
        "degenerate_columns": state.degenerate_columns})
    panel = [scene.Y, state.X, A + 0.5]
    if scene.X_gt is not None:
        panel.append(scene.X_gt)
    viz.save_panel(os.path.join(args.out, "panel.png"), panel)
    print(f"solver: {state.iters_run} iterations, fidelity {f0:.6g} -> {f1:.6g}")
    return EXIT_OK


# --- train -----------------------------------------------------------------

def _load_checkpoint(path):
    if not os.path.isfile(path):
        raise MissingInput(f"checkpoint {path} not found")
    return checkpoint.load(path)


def _scenes(corpus, entries):
    return [_load_case(os.path.join(corpus, e["path"])) for e in entries]


def cmd_train(rc, args):
    entries = _corpus_cases(args.corpus, "train")
    if not entries:
        raise MissingInput(f"{args.corpus} has no training cases")
    n_val = rc.section("train")["n_val"]
    if n_val >= len(entries):
        raise ConfigError("n_val leaves no training cases")
    fit_entries = entries[:len(entries) - n_val] if n_val else entries
    val_entries = entries[len(entries) - n_val:] if n_val else _corpus_cases(args.corpus, "test")
    train_scenes, val_scenes = _scenes(args.corpus, fit_entries), _scenes(args.corpus, val_entries)
    tcfg = rc.train_config()
    _prepare_out(rc, args.out)
    ckpt = os.path.join(args.out, "checkpoint.ckpt")
    log_path = os.path.join(args.out, "train_log.csv")
    start, adam = 0, None
    if args.resume:
        net, adam, meta = _load_checkpoint(args.resume)
        if adam is None or not meta:
            raise ConfigError(f"{args.resume} holds no optimizer state to resume from")
        start = int(meta["epoch"]) + 1
        # carry over the log rows that precede the resume point
        src_log = os.path.join(os.path.dirname(os.path.abspath(args.resume)), "train_log.csv")
        keep = []
        if os.path.exists(src_log):
            with open(src_log) as fh:
                rows = fh.read().splitlines()
            keep = rows[:1] + [r for r in rows[1:] if int(r.split(",")[0]) < start]
        if keep:
            with open(log_path, "w") as fh:
                fh.write("\n".join(keep) + "\n")
        elif os.path.exists(log_path):
            os.remove(log_path)
    else:
        net = NetworkParams.initialize(rc.net_config(), seed=rc.seed)
        checkpoint.save(os.path.join(args.out, "init.ckpt"), net)

    def report(row):
        print(f"epoch {row[0]:4d}  step {row[1]:6d}  loss {row[2]:.6g}  "
              f"val_psnr {row[3]:.3f}  lr {row[4]:.3g}", flush=True)

    train_net(net, train_scenes, tcfg, val_scenes=val_scenes, log_path=log_path,
              ckpt_path=ckpt, resume=adam, start_epoch=start, progress=report)
    with open(log_path) as fh:
        rows = list(csv.DictReader(fh))
    if rows:
        viz.save_loss_curve(os.path.join(args.out, "loss_curve.png"),
                            [int(r["epoch"]) for r in rows], [float(r["loss"]) for r in rows],
                            [float(r["val_psnr"]) for r in rows])
    return EXIT_OK


# --- reconstruct -----------------------------------------------------------

def masked_fidelity(scene, X, A):
    return float(np.linalg.norm(scene.I * (scene.Y - X - A)))


def _reconstruct_one(net, scene, out):
    os.makedirs(os.path.join(out, "stages"), exist_ok=True)
    res = forward_arrays(net, Batch.from_scenes([scene]), train=False)
    Xs = [x[0] for x in res["X"]]
    As = [a[0] for a in res["A"]]
    ctsim.write_raw(os.path.join(out, "X.raw"), Xs[-1])
    for t, (x, a) in enumerate(zip(Xs, As)):
        ctsim.write_raw(os.path.join(out, "stages", f"X_{t:02d}.raw"), x)
        ctsim.write_raw(os.path.join(out, "stages", f"A_{t:02d}.raw"), a)
    with open(os.path.join(out, "fidelity.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "masked_fidelity"])
        for t, (x, a) in enumerate(zip(Xs, As)):
            w.writerow([t, repr(masked_fidelity(scene, x, a))])
    _write_json(os.path.join(out, "meta.json"), {
        "shape": list(scene.shape), "dtype": "float32-le", "stages": len(Xs),
        "case": scene.meta.get("case_id"), "bn_identity_fallback": net.bn_fallback_used()})
    viz.save_gallery(os.path.join(out, "gallery.png"), [Xs, [a + 0.5 for a in As]])
    return Xs, As


def cmd_reconstruct(rc, args):
    net, _, _ = _load_checkpoint(args.checkpoint)
    if bool(args.case) == bool(args.corpus):
        raise ConfigError("give exactly one of --case or --corpus")
    _prepare_out(rc, args.out)
    if args.case:
        targets = [(os.path.basename(os.path.normpath(args.case)), args.case)]
    else:
        targets = [(e["case_id"], os.path.join(args.corpus, e["path"]))
                   for e in _corpus_cases(args.corpus, args.split)]
    for name, path in targets:
        scene = _load_case(path)
        _reconstruct_one(net, scene, os.path.join(args.out, name))
    print(f"reconstructed {len(targets)} case(s) into {args.out}")
    return EXIT_OK


# --- eval ------------------------------------------------------------------

METRIC_FIELDS = ["case_id", "method", "size_group", "psnr", "ssim", "psnr_infinite",
                 "n_pixels"]
SUMMARY_FIELDS = ["method", "size_group", "n_cases", "psnr_mean", "ssim_mean"]


def _parse_methods(items):
    out = []
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--method expects NAME=DIR, got {item!r}")
        name, path = item.split("=", 1)
        out.append((name, path))
    return out


def cmd_eval(rc, args):
    entries = _corpus_cases(args.corpus, args.split)
    methods = _parse_methods(args.method)
    if args.recon:
        methods.append(("acdnet", args.recon))
    rows = []
    for e in entries:
        scene = _load_case(os.path.join(args.corpus, e["path"]))
        cands = [("input", scene.Y)]
        if scene.X_li is not None:
            cands.append(("li", scene.X_li))
        if args.with_gt:
            cands.append(("gt", scene.X_gt))
        for name, root in methods:
            p = os.path.join(root, e["case_id"], "X.raw")
            if not os.path.isfile(p):
                raise MissingInput(f"method {name}: {p} not found")
            cands.append((name, ctsim.read_raw(p, scene.shape)))
        for name, img in cands:
            rep = evaluate(img, scene.X_gt, scene.I)
            rows.append({"case_id": e["case_id"], "method": name,
                         "size_group": e.get("size_group") or "all",
                         "psnr": rep.psnr_db, "ssim": rep.ssim,
                         "psnr_infinite": int(rep.psnr_infinite),
                         "n_pixels": rep.n_pixels_evaluated})
    _prepare_out(rc, args.out)
    with open(os.path.join(args.out, "metrics.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "psnr": repr(r["psnr"]), "ssim": repr(r["ssim"])})
    summary = []
    method_names = list(dict.fromkeys(r["method"] for r in rows))
    group_names = sorted({r["size_group"] for r in rows}) + ["all"]
    for m in method_names:
        for g in group_names:
            sel = [r for r in rows if r["method"] == m and (g == "all" or r["size_group"] == g)]
            if not sel:
                continue
            summary.append({"method": m, "size_group": g, "n_cases": len(sel),
                            "psnr_mean": statistics.fmean(r["psnr"] for r in sel),
                            "ssim_mean": statistics.fmean(r["ssim"] for r in sel)})
    with open(os.path.join(args.out, "summary.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in summary:
            w.writerow({**r, "psnr_mean": repr(r["psnr_mean"]), "ssim_mean": repr(r["ssim_mean"])})
    for r in summary:
        if r["size_group"] == "all":
            print(f"{r['method']:10s} PSNR {r['psnr_mean']:.3f} dB  SSIM {r['ssim_mean']:.4f}"
                  f"  ({r['n_cases']} cases)")
    return EXIT_OK


# --- bench -----------------------------------------------------------------

def hardware_string():
    uname = platform.uname()
    return (f"{uname.system} {uname.release} {uname.machine}; cpus={os.cpu_count()}; "
            f"python {platform.python_version()}; numpy {np.__version__}; "
            f"kernels={backend.name}")


def cmd_bench(rc, args):
    from . import bench

    if args.checkpoint:
        net, _, _ = _load_checkpoint(args.checkpoint)
    else:
        net = NetworkParams.initialize(rc.net_config(), seed=rc.seed)
    size = args.size or rc.section("sim")["image_size"]
    rng = np.random.default_rng(rc.seed)
    I = np.ones((size, size))
    c = size // 2
    I[c - 2:c + 2, c - 2:c + 2] = 0.0
    Y = rng.random((size, size))
    scene = wcd.MaskedScene(Y=Y, I=I, X_li=Y.copy())
    batch = Batch.from_scenes([scene])
    forward_arrays(net, batch)  # warm-up
    times = []
    for _ in range(args.runs):
        t = time.perf_counter()
        forward_arrays(net, batch)
        times.append(time.perf_counter() - t)
    report = {
        "param_count": net.param_count(),
        "reference_param_count": REFERENCE_PARAM_COUNT,
        "param_count_diff": net.param_count() - REFERENCE_PARAM_COUNT,
        "image_size": size, "runs": args.runs,
        "time_mean_s": statistics.fmean(times),
        "time_sd_s": statistics.stdev(times) if len(times) > 1 else 0.0,
        "hardware": hardware_string(),
        "config": net.config.to_dict(),
    }
    if not args.skip_kernels:
        report["kernels"] = [dict(zip(("kernel", "compiled_mean_s", "compiled_sd_s",
                                       "python_mean_s", "python_sd_s"), r))
                             for r in bench.compare(repeats=3)]
    _prepare_out(rc, args.out)
    _write_json(os.path.join(args.out, "bench.json"), report)
    print(f"parameters: {report['param_count']} (reference network: {REFERENCE_PARAM_COUNT}, "
          f"diff {report['param_count_diff']:+d})")
    print(f"reconstruct {size}x{size}: {report['time_mean_s']:.4f} ± {report['time_sd_s']:.4f} s "
          f"over {args.runs} runs")
    print(f"hardware: {report['hardware']}")
    if "kernels" in report:
        print(bench.format_rows([tuple(r.values()) for r in report["kernels"]]))
    return EXIT_OK


# --- entry point -----------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--scale", choices=("desk", "full"), default="desk")
    common.add_argument("--jobs", type=int, help="worker processes for corpus commands")

    ap = argparse.ArgumentParser(prog="acdmar", description="Metal artifact reduction toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate a corpus of case bundles")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("solve", parents=[common], help="run the classical solver on one case")
    p.add_argument("--case", required=True)
    p.add_argument("--checkpoint", help="take the dictionary from a trained network")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("train", parents=[common], help="train the unrolled network")
    p.add_argument("--corpus", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", parents=[common], help="apply a trained network")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--case")
    p.add_argument("--corpus")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", parents=[common], help="masked PSNR/SSIM tables")
    p.add_argument("--corpus", required=True)
    p.add_argument("--recon", help="reconstruction directory (method 'acdnet')")
    p.add_argument("--method", action="append", help="extra method as NAME=DIR")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--with-gt", action="store_true", help="also score X_gt against itself")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="timing and parameter count")
    p.add_argument("--checkpoint")
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--size", type=int)
    p.add_argument("--skip-kernels", action="store_true")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        overrides = {}
        if args.seed is not None:
            overrides["run.seed"] = args.seed
        if args.jobs is not None:
            overrides["run.jobs"] = args.jobs
        if args.config and not os.path.isfile(args.config):
            raise MissingInput(f"config file {args.config} not found")
        rc = load_run_config(args.config, args.scale, overrides)
        return args.func(rc, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (solver.DivergenceError, StageDivergenceError, FloatingPointError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FileNotFoundError, InitializationError) as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
