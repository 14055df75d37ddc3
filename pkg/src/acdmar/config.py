"""INI run configuration shared by every CLI command.

Unknown sections and keys are errors.  :func:`load_run_config` returns a
fully resolved :class:`RunConfig`; :func:`dump_run_config` writes it back so
every output directory records exactly what was run.
"""
import configparser
import io
from dataclasses import dataclass

from .acdnet.model import LossWeights, NetConfig
from .acdnet.train import TrainConfig
from .ctsim import SimConfig
from .solver import ClassicalProxConfig
from .wcd import StepSizes


class ConfigError(ValueError):
    pass


def _bool(s):
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s):
    return tuple(int(x) for x in s.replace(",", " ").split())


def _floats(s):
    return tuple(float(x) for x in s.replace(",", " ").split())


def _optional_float(s):
    return None if s.strip().lower() in ("", "none") else float(s)


def _optional_int(s):
    return None if s.strip().lower() in ("", "none") else int(s)


def _words(s):
    return tuple(x for x in s.replace(",", " ").split())


# section -> key -> parser
SCHEMA = {
    "run": {"seed": int, "jobs": int},
    "sim": {
        "image_size": int, "n_views": int, "n_bins": _optional_int, "span_deg": float,
        "hu_window": _floats, "metal_hu": float, "trace_amplification": float,
        "noise_level": float, "phantom": str, "n_train": int, "n_test": int,
        "n_masks": int, "n_train_masks": int, "n_size_groups": int,
    },
    "solver": {
        "lambda_M": float, "eta1": float, "eta2": float, "eta3": float, "max_iters": int,
        "tol": float, "update_order": _words, "x_clamp": _floats, "n_atoms": int,
        "p": int, "d": int,
    },
    "model": {
        "p": int, "d": int, "N": int, "T": int, "N_p": int, "n_resblocks": int,
        "kernel": int, "eta_init": float, "update_order": _words,
    },
    "train": {
        "batch_size": int, "patch_size": int, "lr": float, "milestones": _ints,
        "epochs": int, "flip": _bool, "clip_norm": float, "max_steps": _optional_int,
        "n_val": int, "mu_last": float, "mu_other": float, "omega1": float, "omega2": float,
    },
}

DESK = {
    "run": {"seed": 0, "jobs": 1},
    "sim": {"image_size": 128, "n_views": 180, "n_bins": None, "span_deg": 180.0,
            "hu_window": (-1000.0, 2000.0), "metal_hu": 4000.0, "trace_amplification": 1.25,
            "noise_level": 0.02, "phantom": "random_ellipses", "n_train": 20, "n_test": 10,
            "n_masks": 100, "n_train_masks": 90, "n_size_groups": 5},
    "solver": {"lambda_M": 0.0, "eta1": 0.5, "eta2": 0.5, "eta3": 0.5, "max_iters": 50,
               "tol": 1e-8, "update_order": ("K", "M", "X"), "x_clamp": (),
               "n_atoms": 6, "p": 9, "d": 16},
    "model": {"p": 9, "d": 16, "N": 6, "T": 3, "N_p": 8, "n_resblocks": 3, "kernel": 3,
              "eta_init": 0.5, "update_order": ("K", "M", "X")},
    "train": {"batch_size": 4, "patch_size": 64, "lr": 1e-3, "milestones": (),
              "epochs": 40, "flip": True, "clip_norm": 10.0, "max_steps": None, "n_val": 0,
              "mu_last": 1.0, "mu_other": 0.1, "omega1": 5e-4, "omega2": 5e-4},
}


def _full_defaults():
    out = {k: dict(v) for k, v in DESK.items()}
    out["sim"].update(image_size=416, n_views=640, n_bins=641, span_deg=360.0,
                      n_train=1000, n_test=200)
    out["solver"].update(d=32)
    out["model"].update(d=32, T=10, N_p=32)
    out["train"].update(batch_size=32, lr=2e-4, milestones=(50, 100, 150, 200), epochs=300)
    return out


@dataclass
class RunConfig:
    scale: str
    values: dict

    def section(self, name):
        return self.values[name]

    @property
    def seed(self):
        return self.values["run"]["seed"]

    @property
    def jobs(self):
        return self.values["run"]["jobs"]

    def sim_config(self):
        s = self.values["sim"]
        return SimConfig(image_size=s["image_size"], n_views=s["n_views"], n_bins=s["n_bins"],
                         span_deg=s["span_deg"], hu_window=tuple(s["hu_window"]),
                         metal_hu=s["metal_hu"], trace_amplification=s["trace_amplification"],
                         noise_level=s["noise_level"], seed=self.seed)

    def solver_config(self):
        s = self.values["solver"]
        clamp = tuple(s["x_clamp"]) if s["x_clamp"] else None
        return ClassicalProxConfig(lambda_M=s["lambda_M"], x_clamp=clamp,
                                   steps=StepSizes(s["eta1"], s["eta2"], s["eta3"]),
                                   max_iters=s["max_iters"], tol=s["tol"],
                                   update_order=s["update_order"])

    def net_config(self):
        m = self.values["model"]
        return NetConfig(p=m["p"], d=m["d"], N=m["N"], T=m["T"], N_p=m["N_p"],
                         n_resblocks=m["n_resblocks"], kernel=m["kernel"],
                         eta_init=m["eta_init"], update_order=m["update_order"])

    def train_config(self):
        t = self.values["train"]
        milestones = t["milestones"] or TrainConfig.short_run_milestones(t["epochs"])
        return TrainConfig(batch_size=t["batch_size"], patch_size=t["patch_size"], lr=t["lr"],
                           milestones=milestones, epochs=t["epochs"], seed=self.seed,
                           flip=t["flip"], clip_norm=t["clip_norm"], max_steps=t["max_steps"],
                           weights=LossWeights(t["mu_last"], t["mu_other"],
                                               t["omega1"], t["omega2"]))


def _format(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def load_run_config(path=None, scale="desk", overrides=None):
    """Defaults for ``scale``, then the INI file at ``path``, then ``overrides``.

    ``overrides`` maps ``"section.key"`` to a value already of the right type.
    """
    if scale not in ("desk", "full"):
        raise ConfigError(f"unknown scale {scale!r}")
    values = _full_defaults() if scale == "full" else {k: dict(v) for k, v in DESK.items()}
    if path is not None:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for sec in cp.sections():
            if sec not in SCHEMA:
                raise ConfigError(f"{path}: unknown section [{sec}]")
            for key, raw in cp.items(sec):
                if key not in SCHEMA[sec]:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{sec}]")
                try:
                    values[sec][key] = SCHEMA[sec][key](raw)
                except ValueError as exc:
                    raise ConfigError(f"{path}: bad value for {sec}.{key}: {exc}") from None
    for dotted, v in (overrides or {}).items():
        sec, key = dotted.split(".", 1)
        if sec not in SCHEMA or key not in SCHEMA[sec]:
            raise ConfigError(f"unknown override {dotted!r}")
        values[sec][key] = v
    rc = RunConfig(scale, values)
    try:
        # construct everything once so invalid combinations fail early
        rc.sim_config(), rc.solver_config(), rc.net_config(), rc.train_config()
        s = values["sim"]
        if not 0 < s["n_train_masks"] < s["n_masks"]:
            raise ValueError("need 0 < n_train_masks < n_masks")
        if s["phantom"] not in ("random_ellipses", "shepp_logan"):
            raise ValueError(f"unknown phantom kind {s['phantom']!r}")
        if values["run"]["jobs"] < 1:
            raise ValueError("jobs must be >= 1")
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return rc


def dump_run_config(rc, path=None):
    """Serialise the resolved config as INI; returns the text."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for sec in SCHEMA:
        cp[sec] = {k: _format(rc.values[sec][k]) for k in SCHEMA[sec]}
    buf = io.StringIO()
    buf.write(f"# resolved configuration ({rc.scale} scale defaults)\n")
    cp.write(buf)
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
