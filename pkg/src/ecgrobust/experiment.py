"""Experiment configs, training runs, parameter sweeps and evaluation pipelines.

A config is a YAML mapping::

    preset: mitbih            # optional: mitbih | cpsc, fills unset keys
    seed: 0
    dataset:
      source: synth           # synth | beats | recordings
      n_train_per_class: 400  # synth only
      n_test_per_class: 100   # synth only
      train: path/train.csv   # beats only
      test: path/test.csv     # beats only
      corpus: dir, manifest: path  # recordings only
      val_fraction: 0.2
      split_seed: 0
      balance: true
    model: {kind: mlp}
    method: {name: nsr, beta: 0.4, warmup_epochs: 0}
    optimizer: {algorithm: adamax, lr: 0.001, epochs: 50, batch_size: 128}
    eval:
      grid: [0, 0.01, 0.03, 0.05, 0.1, 0.2, 0.3]
      eps_max: 0.1
      attacks: [{family: pgd, iters: 100, alpha: 0.01}]

Outputs go to ``<out_dir>/checkpoints``, ``<out_dir>/records`` and ``<out_dir>/reports``.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .attacks import AttackConfig
from .classifiers import load_checkpoint, save_checkpoint
from .estimator import RobustSignalClassifier
from .robustness_eval import (CPSC_EPS_MAX, CPSC_GRID, MITBIH_EPS_MAX, MITBIH_GRID,
                              RobustnessCurve, evaluate_curve, render_report, summarize)
from . import signal_data as sd

logger = logging.getLogger(__name__)

PRESETS = {
    "mitbih": {
        "model": {"kind": "mlp"},
        "optimizer": {"algorithm": "adamax", "lr": 0.001, "epochs": 50, "batch_size": 128},
        "method": {"attack_iters": 10, "warmup_epochs": 0, "normalized": False},
        "eval": {"grid": list(MITBIH_GRID), "eps_max": MITBIH_EPS_MAX,
                 "attacks": [{"family": "pgd", "iters": 100, "alpha": 0.01}]},
    },
    "cpsc": {
        "model": {"kind": "masked_cnn"},
        "optimizer": {"algorithm": "adam", "lr": 0.001, "epochs": 70, "batch_size": 64},
        "method": {"attack_iters": 20, "warmup_epochs": 10, "normalized": True,
                   "schedule": "linear_after_warmup"},
        "eval": {"grid": list(CPSC_GRID), "eps_max": CPSC_EPS_MAX,
                 "attacks": [{"family": "pgd", "iters": 100, "alpha": 0.01}]},
    },
}

DEFAULTS = {
    "seed": 0,
    "dataset": {"source": "synth", "n_train_per_class": 400, "n_test_per_class": 100,
                "length": sd.BEAT_LENGTH, "n_classes": 5, "val_fraction": 0.2,
                "split_seed": 0, "balance": True},
    "model": {"kind": "mlp"},
    "method": {"name": "ce"},
    "optimizer": {"algorithm": "adamax", "lr": 0.001, "epochs": 50, "batch_size": 128},
    "eval": {"grid": list(MITBIH_GRID), "eps_max": MITBIH_EPS_MAX,
             "attacks": [{"family": "pgd", "iters": 100, "alpha": 0.01}]},
}

CONFIG_KEYS = """\
config keys:
  preset                  mitbih | cpsc (fills any key left unset)
  seed                    integer seed for init, shuffling, padding and noise
  dataset.source          synth | beats | recordings
  dataset.n_train_per_class, dataset.n_test_per_class, dataset.length,
  dataset.n_classes       synthetic corpus size and shape
  dataset.train, dataset.test     beat CSV paths (188 columns)
  dataset.corpus, dataset.manifest  recording directory and manifest CSV
  dataset.val_fraction    validation share of the training split
  dataset.split_seed      seed for splits and upsampling
  dataset.balance         upsample train and test to class balance
  dataset.pad_length      padded length for recordings (default 33792)
  model.kind              mlp | beat_cnn | masked_cnn
  method.name             ce | nsr | jacob | adv
  method.beta             NSR weight           method.eps_delta   NSR noise bound
  method.lam              Jacobian weight      method.normalized  normalized Jacobian loss
  method.eps              adversarial-training noise level
  method.attack_iters     PGD steps for adversarial training
  method.alpha            PGD step size for adversarial training
  method.schedule         none | linear_after_warmup
  method.warmup_epochs    epochs before gated terms switch on
  optimizer.algorithm     adam | adamax
  optimizer.lr, optimizer.epochs, optimizer.batch_size
  eval.grid               noise levels, starting at 0
  eval.eps_max            upper noise level of the AUC
  eval.attacks            list of {family: pgd|sap|white_noise, iters, alpha,
                          smooth_width, smooth_sigma, rand_init, seed}
"""


class ConfigError(ValueError):
    pass


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(raw: dict) -> dict:
    raw = dict(raw or {})
    preset = raw.pop("preset", None)
    cfg = copy.deepcopy(DEFAULTS)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        cfg = _merge(cfg, PRESETS[preset])
    cfg = _merge(cfg, raw)
    validate_config(cfg)
    return cfg


def validate_config(cfg):
    method = cfg["method"].get("name")
    if method not in ("ce", "nsr", "jacob", "adv"):
        raise ConfigError(f"method.name must be one of ce|nsr|jacob|adv, got {method!r}")
    epochs = cfg["optimizer"]["epochs"]
    warm = cfg["method"].get("warmup_epochs", 0) if method != "ce" else 0
    if warm and epochs <= warm:
        raise ConfigError(f"optimizer.epochs ({epochs}) must exceed method.warmup_epochs ({warm})")
    grid = cfg["eval"]["grid"]
    if not grid or grid[0] != 0:
        raise ConfigError("eval.grid must start at 0")
    if method == "adv":
        eval_k = max((a.get("iters", 100) for a in cfg["eval"]["attacks"] if a.get("family", "pgd") == "pgd"),
                     default=None)
        train_k = cfg["method"].get("attack_iters", 10)
        if eval_k is not None and train_k >= eval_k:
            warnings.warn(f"adversarial training uses {train_k}-PGD, not weaker than the "
                          f"{eval_k}-PGD evaluation attack", stacklevel=2)


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return resolve_config(raw)


def canonical(cfg) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg) -> str:
    return hashlib.sha256(canonical(cfg).encode()).hexdigest()


def model_name(method: str, parameter=None) -> str:
    if method == "ce":
        return "CE"
    if method == "nsr":
        return f"{parameter:g}NSR" if float(parameter) != int(parameter) else f"{float(parameter):.1f}NSR"
    if method == "jacob":
        return f"{parameter:g}Jacob" if float(parameter) != int(parameter) else f"{float(parameter):.1f}Jacob"
    if method == "adv":
        return f"adv{parameter:g}"
    raise ValueError(f"unknown method {method!r}")


def method_parameter(cfg):
    m = cfg["method"]
    return {"nsr": m.get("beta"), "jacob": m.get("lam"), "adv": m.get("eps")}.get(m["name"])


# ---------------------------------------------------------------------------
# datasets

@dataclass
class Splits:
    X_train: object
    y_train: np.ndarray
    X_val: object
    y_val: np.ndarray
    X_test: object
    y_test: np.ndarray
    num_classes: int


def _beats_split(train, test, ds, seed):
    train, val = sd.split_train_val(train, ds.get("val_fraction", 0.2), seed)
    if ds.get("balance", True):
        train = sd.balance_by_upsampling(train, seed)
        if test:
            test = sd.balance_by_upsampling(test, seed + 1)
    Xtr, ytr = sd.beats_to_arrays(train)
    Xva, yva = sd.beats_to_arrays(val)
    Xte, yte = sd.beats_to_arrays(test)
    return Xtr, ytr, Xva, yva, Xte, yte


def load_splits(cfg) -> Splits:
    ds = cfg["dataset"]
    seed = int(ds.get("split_seed", 0))
    src = ds.get("source", "synth")
    if src == "synth":
        n_classes = int(ds.get("n_classes", 5))
        length = int(ds.get("length", sd.BEAT_LENGTH))
        train = sd.synth_beats(int(ds["n_train_per_class"]), n_classes, length, seed)
        test = sd.synth_beats(int(ds["n_test_per_class"]), n_classes, length, seed + 10_000)
        ds = {**ds, "balance": False}
        return Splits(*_beats_split(train, test, ds, seed), num_classes=n_classes)
    if src == "beats":
        train = sd.load_beat_dataset(ds["train"], "train")
        test = sd.load_beat_dataset(ds["test"], "test") if ds.get("test") else []
        return Splits(*_beats_split(train, test, ds, seed), num_classes=len(sd.BEAT_CLASSES))
    if src == "recordings":
        recs = sd.load_recording_corpus(ds["corpus"], ds["manifest"])
        n_classes = int(ds.get("n_classes", len(sd.CPSC_CLASSES)))
        train, val, test, _ = sd.prepare_cpsc_corpus(recs, seed, n_classes, ds.get("balance", True))

        def unpack(part):
            part = [sd.scale_leads_maxabs(r) for r in part]
            return [r.leads for r in part], np.array([r.label for r in part], dtype=np.int64)

        return Splits(*unpack(train), *unpack(val), *unpack(test), num_classes=n_classes)
    raise ConfigError(f"unknown dataset.source {src!r}")


# ---------------------------------------------------------------------------
# training

@dataclass
class RunRecord:
    name: str
    config_hash: str
    parameter: object
    epoch_losses: list
    checkpoint: str
    val_summary: dict
    val_curve: dict
    wall_seconds: float
    config: dict = field(default_factory=dict)

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        return cls(**json.loads(Path(path).read_text()))


def make_estimator(cfg) -> RobustSignalClassifier:
    m, o = cfg["method"], cfg["optimizer"]
    return RobustSignalClassifier(
        architecture=cfg["model"]["kind"], method=m["name"],
        beta=m.get("beta", 0.4), lam=m.get("lam", 0.9), jacob_normalized=m.get("normalized", False),
        adv_eps=m.get("eps", 0.1), adv_iters=m.get("attack_iters", 10), adv_alpha=m.get("alpha", 0.01),
        adv_schedule=m.get("schedule", "none"), warmup_epochs=m.get("warmup_epochs", 0),
        eps_delta=m.get("eps_delta", 1.0), optimizer=o["algorithm"], learning_rate=o["lr"],
        epochs=o["epochs"], batch_size=o["batch_size"],
        pad_length=cfg["dataset"].get("pad_length", sd.CPSC_PAD_LENGTH), random_state=cfg["seed"])


def attack_configs(eval_block, seed=0):
    out = []
    for a in eval_block.get("attacks", []):
        a = dict(a)
        a.setdefault("seed", seed)
        if a.get("clip_range") is not None:
            a["clip_range"] = tuple(a["clip_range"])
        out.append(AttackConfig(**a))
    return out


def evaluate_arrays(model, X, y, eval_block, name, seed=0, pad_length=sd.CPSC_PAD_LENGTH):
    """One RobustnessCurve per configured attack."""
    mask = None
    if isinstance(X, list):
        pairs = [sd.pad_and_mask(x, pad_length, "eval_left") for x in X]
        X, mask = np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])
    return [evaluate_curve(model, X, y, atk, eval_block["grid"], mask=mask, model_name=name)
            for atk in attack_configs(eval_block, seed)]


def train(cfg, out_dir, splits: Splits | None = None, checkpoint_every: int = 0) -> RunRecord:
    """Fit one model, checkpoint it and score it on the validation split."""
    out_dir = Path(out_dir)
    t0 = time.perf_counter()
    h = config_hash(cfg)
    splits = splits or load_splits(cfg)
    est = make_estimator(cfg)
    param = method_parameter(cfg)
    name = model_name(cfg["method"]["name"], param)

    def snapshot(epoch, model):
        if checkpoint_every and epoch % checkpoint_every == 0 and epoch < est.epochs:
            save_checkpoint(model, out_dir / "checkpoints" / f"{name}-{h[:12]}-e{epoch}.safetensors",
                            extra={"config": cfg, "epoch": epoch})

    est.fit(splits.X_train, splits.y_train, epoch_callback=snapshot)
    ckpt = save_checkpoint(est.model_, out_dir / "checkpoints" / f"{name}-{h[:12]}.safetensors",
                           extra={"config": cfg, "classes": est.classes_.tolist()})
    val_curve = evaluate_arrays(est.model_, splits.X_val, est.label_encoder_.transform(splits.y_val),
                                cfg["eval"], name, cfg["seed"], est.pad_length)[0]
    summary = summarize(val_curve, cfg["eval"]["eps_max"])
    rec = RunRecord(name, h, param, [float(v) for v in est.loss_curve_], str(ckpt),
                    summary.to_dict(), val_curve.to_dict(), time.perf_counter() - t0, cfg)
    rec.save(out_dir / "records" / f"{name}-{h[:12]}.json")
    logger.info("%s: validation ACC_robust %.4f", name, summary.acc_robust)
    return rec


def select_best(records) -> RunRecord:
    """Highest validation ACC_robust; ties go to the smaller parameter."""
    if not records:
        raise ValueError("no runs to select from")
    return sorted(records, key=lambda r: (-r.val_summary["acc_robust"],
                                          r.parameter if r.parameter is not None else 0))[0]


SWEEP_KEYS = {"nsr": "beta", "jacob": "lam", "adv": "eps"}


def sweep(base_cfg, grid, out_dir):
    if not grid:
        raise ValueError("sweep grid is empty")
    key = SWEEP_KEYS.get(base_cfg["method"]["name"])
    if key is None:
        raise ConfigError("sweeps need a parameterized method (nsr, jacob, adv)")
    splits = load_splits(base_cfg)
    records = []
    for value in grid:
        cfg = _merge(base_cfg, {"method": {key: float(value)}})
        try:
            records.append(train(cfg, out_dir, splits))
        except Exception:
            _save_sweep(out_dir, key, records, None)
            raise
    best = select_best(records)
    _save_sweep(out_dir, key, records, best)
    return best.parameter, records


def _save_sweep(out_dir, key, records, best):
    path = Path(out_dir) / "records" / "sweep.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"parameter": key, "best": None if best is None else best.parameter,
               "runs": [{"parameter": r.parameter, "name": r.name,
                         "val_acc_robust": r.val_summary["acc_robust"], "checkpoint": r.checkpoint}
                        for r in records]}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def evaluate(checkpoint, cfg, out_dir, split="test"):
    """Attack a checkpoint on a split; writes curve JSON, summaries and report tables."""
    model, extra = load_checkpoint(checkpoint)
    train_cfg = extra.get("config", {})
    name = model_name(train_cfg["method"]["name"], method_parameter(train_cfg)) if train_cfg else Path(checkpoint).stem
    splits = load_splits(cfg)
    X = {"train": splits.X_train, "val": splits.X_val, "test": splits.X_test}[split]
    y = {"train": splits.y_train, "val": splits.y_val, "test": splits.y_test}[split]
    classes = extra.get("classes")
    if classes is not None:
        lookup = {c: i for i, c in enumerate(classes)}
        y = np.array([lookup[int(v)] for v in y], dtype=np.int64)
    curves = evaluate_arrays(model, X, y, cfg["eval"], name, cfg["seed"],
                             cfg["dataset"].get("pad_length", sd.CPSC_PAD_LENGTH))
    out_dir = Path(out_dir) / "reports"
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for curve in curves:
        tag = curve.attack["name"]
        summary = summarize(curve, cfg["eval"]["eps_max"])
        stem = f"{name}_{tag}_{split}"
        (out_dir / f"{stem}_curve.json").write_text(
            json.dumps({"curve": curve.to_dict(), "summary": summary.to_dict()}, indent=2, sort_keys=True) + "\n")
        render_report([curve], cfg["eval"]["eps_max"], out_dir, stem)
        results.append((curve, summary))
    return results


def report(curve_files, eps_max, out_dir, stem="report"):
    curves = []
    for f in curve_files:
        payload = json.loads(Path(f).read_text())
        curves.append(RobustnessCurve(**payload["curve"]))
    return render_report(curves, eps_max, out_dir, stem)
