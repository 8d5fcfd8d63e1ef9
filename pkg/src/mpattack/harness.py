"""Experiment driver: synthetic data, victims, attack matrices, sweeps and reports.

Configuration is one JSON document; :func:`default_config` documents every
field. Work is split into fixed-size chunks of test examples, so results are
the same whatever the number of worker processes.
"""

import copy
import csv
import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from mpattack.attacks import AttackConfig, desk_budgets, run_attack
from mpattack.classifier import (
    TrainConfig,
    load_checkpoint,
    predict,
    save_checkpoint,
    train_msd,
    train_standard,
)
from mpattack.metrics import filtered_metrics

log = logging.getLogger(__name__)

VICTIM_KINDS = ("standard", "msd", "l1", "l2", "linf")


def default_config():
    """The desk-scale experiment, as a plain dict ready for JSON.

    ``budget_scale`` multiplies the dimension-scaled reference budgets and
    ``l1_step_ratio`` sets the l1 step to that fraction of the l1 budget.
    ``attack`` holds the shared attack settings; each entry of ``attacks``
    names an attack, its kind (``pgd`` or ``mpa``) and optional overrides of
    any :class:`AttackConfig` field. Victims are trained from ``train`` unless
    ``checkpoints`` maps the victim name to a file.
    """
    return {
        "seed": 0,
        "dataset": {"n_classes": 4, "dim": 64, "n_train": 2000, "n_test": 500, "sigma": 0.15},
        "image_shape": [8, 8],
        "train": TrainConfig().to_dict(),
        "budget_scale": 6.0,
        "l1_step_ratio": 0.1,
        "attack": {"n_iter": 20, "n_inner": 17, "coef_lr": 1e-3, "tau": 0.01, "reuse": True,
                   "topk": None, "coef_init": None},
        "victims": ["standard", "linf", "msd"],
        "checkpoints": {},
        "attacks": [
            {"name": "pgd-l1", "kind": "pgd", "norms": ["l1"]},
            {"name": "pgd-l2", "kind": "pgd", "norms": ["l2"]},
            {"name": "pgd-linf", "kind": "pgd", "norms": ["linf"]},
            {"name": "mpa", "kind": "mpa"},
        ],
        "n_eval": 500,
        "metrics": True,
        "wasserstein": {"reg": 0.01, "iters": 200},
        "sweep": {"victim": "msd", "tau": [0.01, 1.0], "n_inner": [0, 1, 5, 10, 15, 17, 20],
                  "reuse": [True, False]},
        "chunk_size": 100,
    }


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("checkpoints",):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path=None, **overrides):
    """Default config, updated by the JSON file at ``path`` and then ``overrides``."""
    cfg = default_config()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            cfg = _merge(cfg, json.load(fh))
    cfg = _merge(cfg, {k: v for k, v in overrides.items() if v is not None})
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    names = [a["name"] for a in cfg["attacks"]]
    if len(set(names)) != len(names):
        raise ValueError("attack names must be unique")
    for v in cfg["victims"]:
        if v not in VICTIM_KINDS and v not in cfg.get("checkpoints", {}):
            raise ValueError(f"unknown victim {v!r}; expected one of {VICTIM_KINDS} or a checkpoint")
    ds = cfg["dataset"]
    if ds["n_classes"] < 2 or ds["dim"] < 4:
        raise ValueError("need at least 2 classes and 4 input dimensions")
    if math.prod(cfg["image_shape"]) != ds["dim"]:
        raise ValueError("image_shape must multiply out to the input dimension")


# dataset

@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)

    def head(self, n):
        return Dataset(self.x[:n], self.y[:n])


def generate_dataset(seed, n_classes, dim, n_train, n_test, sigma):
    """Noisy copies of ``n_classes`` random prototypes in ``[0.2, 0.8]^dim``.

    Labels cycle through the classes before shuffling, so every class gets
    ``n // n_classes`` or one more examples. Samples are clipped to
    ``[0, 1]``.
    """
    if n_classes < 2 or dim < 4:
        raise ValueError("need at least 2 classes and 4 input dimensions")
    rng = np.random.default_rng(seed)
    prototypes = rng.uniform(0.2, 0.8, size=(n_classes, dim))

    def draw(n):
        y = rng.permutation(np.arange(n) % n_classes)
        x = prototypes[y] + sigma * rng.standard_normal((n, dim))
        return Dataset(np.clip(x, 0.0, 1.0), y)

    return draw(n_train), draw(n_test)


def dataset_from_config(cfg):
    ds = cfg["dataset"]
    return generate_dataset(cfg["seed"], ds["n_classes"], ds["dim"], ds["n_train"], ds["n_test"], ds["sigma"])


# configs

def base_attack_config(cfg):
    eps, step = desk_budgets(cfg["dataset"]["dim"], cfg["budget_scale"], cfg["l1_step_ratio"])
    return AttackConfig(eps=eps, step=step, seed=cfg["seed"], **cfg["attack"])


def attack_configs(cfg, names=None):
    """``{name: (kind, AttackConfig)}`` for the configured attacks, in config order."""
    base = base_attack_config(cfg)
    out = {}
    for spec in cfg["attacks"]:
        if names is not None and spec["name"] not in names:
            continue
        overrides = {k: v for k, v in spec.items() if k not in ("name", "kind")}
        if "eps" in overrides:
            overrides["eps"] = {**base.eps, **overrides["eps"]}
        if "step" in overrides:
            overrides["step"] = {**base.step, **overrides["step"]}
        out[spec["name"]] = (spec["kind"], base.replace(**overrides))
    if names is not None:
        missing = set(names) - set(out)
        if missing:
            raise ValueError(f"unknown attacks: {sorted(missing)}")
    return out


def train_config(cfg):
    return TrainConfig(**{**cfg["train"], "seed": cfg["seed"]})


# victims

def train_victim(kind, train, cfg):
    """Train a victim of ``kind``: ``standard``, ``msd`` (all norms) or a single norm name."""
    tcfg = train_config(cfg)
    n_classes = cfg["dataset"]["n_classes"]
    if kind == "standard":
        model = train_standard(train.x, train.y, tcfg, n_classes=n_classes)
    elif kind == "msd":
        model = train_msd(train.x, train.y, tcfg, base_attack_config(cfg), n_classes=n_classes)
    elif kind in ("l1", "l2", "linf"):
        atk = base_attack_config(cfg).replace(norms=[kind])
        model = train_msd(train.x, train.y, tcfg, atk, n_classes=n_classes)
    else:
        raise ValueError(f"unknown victim kind {kind!r}")
    model.meta["victim"] = kind
    return model


def get_victim(name, train, cfg, cache_dir=None):
    """Load ``name`` from ``cfg["checkpoints"]`` or ``cache_dir``, else train it (and cache it)."""
    path = cfg.get("checkpoints", {}).get(name)
    if path is not None:
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing checkpoint for victim {name!r}: {path}")
        return load_checkpoint(path)
    cached = Path(cache_dir) / victim_filename(name, cfg) if cache_dir is not None else None
    if cached is not None and cached.exists():
        return load_checkpoint(cached)
    log.info("training victim %s", name)
    model = train_victim(name, train, cfg)
    if cached is not None:
        cached.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, cached)
    return model


def victim_filename(name, cfg):
    """Checkpoint name that changes whenever a setting affecting training changes."""
    keys = ("seed", "dataset", "train", "budget_scale", "l1_step_ratio", "attack")
    blob = json.dumps({k: cfg[k] for k in keys}, sort_keys=True)
    return f"{name}-{hashlib.sha256(blob.encode()).hexdigest()[:12]}.json"


# evaluation

def _chunks(n, size):
    return [(i, min(i + size, n)) for i in range(0, n, size)]


def _attack_chunk(args):
    model, x, y, kind, atk, offset, image_shape, wd, with_metrics = args
    reports = run_attack(model, x, y, kind, atk, index_offset=offset)
    correct = np.atleast_1d(predict(model, x)) == y
    robust = np.array([c and not r.success for c, r in zip(correct, reports)])
    iters = np.array([r.iterations_used for r in reports])
    scores = None
    if with_metrics:
        rep = filtered_metrics(model, x, y, None, image_shape, wd["reg"], wd["iters"], reports=reports)
        scores = (rep.n_evaluated, rep.psnr, rep.ssim, rep.wasserstein)
    return correct, robust, iters, scores


def _map(fn, jobs_args, jobs):
    if jobs is None or jobs <= 1:
        return [fn(a) for a in jobs_args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, jobs_args))


def evaluate_attack(model, data, kind, atk, cfg, jobs=1, with_metrics=None):
    """Attack every example of ``data``; returns a dict of summary statistics."""
    with_metrics = cfg["metrics"] if with_metrics is None else with_metrics
    args = [
        (model, data.x[a:b], data.y[a:b], kind, atk, a, tuple(cfg["image_shape"]), cfg["wasserstein"], with_metrics)
        for a, b in _chunks(len(data), cfg["chunk_size"])
    ]
    parts = _map(_attack_chunk, args, jobs)
    correct = np.concatenate([p[0] for p in parts])
    robust = np.concatenate([p[1] for p in parts])
    iters = np.concatenate([p[2] for p in parts])
    out = {
        "n_examples": len(data),
        "clean_accuracy": float(correct.mean()),
        "robust_accuracy": float(robust.mean()),
        "mean_iterations": float(iters[correct].mean()) if correct.any() else float("nan"),
        "psnr": float("nan"),
        "ssim": float("nan"),
        "wasserstein": float("nan"),
        "n_evaluated": 0,
    }
    if with_metrics:
        n_eval = sum(p[3][0] for p in parts)
        out["n_evaluated"] = int(n_eval)
        if n_eval:
            for j, key in enumerate(("psnr", "ssim", "wasserstein"), start=1):
                out[key] = float(sum(p[3][0] * p[3][j] for p in parts if p[3][0]) / n_eval)
    return out


@dataclass
class ResultRow:
    victim: str
    attack: str
    n_examples: int
    clean_accuracy: float
    robust_accuracy: float
    mean_iterations: float
    psnr: float
    ssim: float
    wasserstein: float
    n_evaluated: int


RESULT_FIELDS = [f.name for f in fields(ResultRow)]


@dataclass
class SweepRow:
    victim: str
    tau: float
    n_inner: int
    reuse: bool
    robust_accuracy: float
    psnr: float
    n_evaluated: int


SWEEP_FIELDS = [f.name for f in fields(SweepRow)]


def run_attack_matrix(cfg, victims=None, attacks=None, jobs=1, cache_dir=None, models=None):
    """Robust accuracy (and metrics) for every (victim, attack) pair on the first ``n_eval`` test examples."""
    train, test = dataset_from_config(cfg)
    test = test.head(cfg["n_eval"])
    victims = list(cfg["victims"] if victims is None else victims)
    atks = attack_configs(cfg, attacks)
    rows = []
    for v in victims:
        model = (models or {}).get(v) or get_victim(v, train, cfg, cache_dir)
        for name, (kind, atk) in atks.items():
            log.info("attacking %s with %s", v, name)
            stats = evaluate_attack(model, test, kind, atk, cfg, jobs=jobs)
            rows.append(ResultRow(victim=v, attack=name, **stats))
    return rows


def run_sweep(cfg, jobs=1, cache_dir=None, model=None):
    """MPA robust accuracy and PSNR over the (tau, n_inner, reuse) grid on one victim."""
    sw = cfg["sweep"]
    if not (sw["tau"] and sw["n_inner"] and sw["reuse"]):
        raise ValueError("sweep grid must be nonempty")
    train, test = dataset_from_config(cfg)
    test = test.head(cfg["n_eval"])
    victim = sw["victim"]
    model = model or get_victim(victim, train, cfg, cache_dir)
    base = base_attack_config(cfg)
    rows = []
    for tau in sw["tau"]:
        for n_inner in sw["n_inner"]:
            for reuse in sw["reuse"]:
                atk = base.replace(tau=tau, n_inner=n_inner, reuse=reuse)
                stats = evaluate_attack(model, test, "mpa", atk, cfg, jobs=jobs)
                rows.append(SweepRow(victim, float(tau), int(n_inner), bool(reuse),
                                     stats["robust_accuracy"], stats["psnr"], stats["n_evaluated"]))
    return rows


# reports

def _cell(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def table_csv(rows, header):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in rows:
        d = asdict(r)
        writer.writerow([_cell(d[h]) for h in header])
    return buf.getvalue()


def _json_safe(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None if math.isnan(v) else ("inf" if v > 0 else "-inf")
    return v


def result_json(rows):
    """Nest result rows as ``{victim: {attack: {field: value}}}``."""
    nested = {}
    for r in rows:
        d = {k: _json_safe(v) for k, v in asdict(r).items() if k not in ("victim", "attack")}
        nested.setdefault(r.victim, {})[r.attack] = d
    return json.dumps(nested, indent=2) + "\n"


def parse_result_json(text):
    rows = []
    for victim, attacks in json.loads(text).items():
        for attack, d in attacks.items():
            vals = {}
            for f in fields(ResultRow):
                if f.name in ("victim", "attack"):
                    continue
                v = d[f.name]
                vals[f.name] = float("nan") if v is None else (float(v) if f.type is float else v)
            rows.append(ResultRow(victim=victim, attack=attack, **vals))
    return rows


def emit_reports(rows, out_dir, stem="results"):
    """Write ``<stem>.csv`` and ``<stem>.json`` under ``out_dir``; returns both paths.

    Result rows get a JSON nested by victim then attack; sweep rows are
    written as a JSON list of records.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sweep = bool(rows) and isinstance(rows[0], SweepRow)
    header = SWEEP_FIELDS if sweep else RESULT_FIELDS
    csv_path = out_dir / f"{stem}.csv"
    json_path = out_dir / f"{stem}.json"
    if sweep:
        text = json.dumps([{k: _json_safe(v) for k, v in asdict(r).items()} for r in rows], indent=2) + "\n"
    else:
        text = result_json(rows)
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(table_csv(rows, header))
    with open(json_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return csv_path, json_path
