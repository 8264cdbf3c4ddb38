"""Beat- and recording-level signal datasets.

Beat files follow the layout of the public processed MIT-BIH split: one
sample per row, 187 amplitude values followed by the integer class label.
Recording corpora are a directory of ``<id>.npy`` arrays (leads x time)
plus a manifest CSV with columns ``id,labels`` where ``labels`` is a
``;``-separated list of class indices.

All randomness goes through :func:`numpy.random.default_rng` (PCG64) seeded
with the caller's integer seed.
"""
from __future__ import annotations

import csv
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

logger = logging.getLogger(__name__)

BEAT_LENGTH = 187
BEAT_CLASSES = ("N", "S", "V", "F", "Q")
CPSC_CLASSES = ("Normal", "AF", "I-AVB", "LBBB", "RBBB", "PAC", "PVC", "STD", "STE")
CPSC_PAD_LENGTH = 33792
CPSC_MAX_LENGTH = 72000
# 0-based indices of Leads 3, 4, 5, 6 (III, aVR, aVL, aVF)
CPSC_DROPPED_LEADS = (2, 3, 4, 5)
CPSC_VAL_PER_CLASS = 5
CPSC_TEST_PER_CLASS = 50


class DataFormatError(ValueError):
    """A dataset file could not be parsed."""


class DataValidationError(ValueError):
    """Parsed data violates a dataset contract."""


@dataclass
class BeatSample:
    values: np.ndarray
    label: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (BEAT_LENGTH,):
            raise DataValidationError(
                f"beat must have {BEAT_LENGTH} values, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise DataValidationError("beat contains non-finite values")
        if not 0 <= int(self.label) < len(BEAT_CLASSES):
            raise DataValidationError(f"beat label {self.label} outside 0..4")
        self.label = int(self.label)


@dataclass
class Recording:
    leads: np.ndarray
    label: int | None
    id: str
    labels: tuple[int, ...] = field(default=())

    def __post_init__(self):
        self.leads = np.asarray(self.leads, dtype=np.float64)
        if self.leads.ndim != 2:
            raise DataValidationError(f"recording {self.id}: leads must be 2-D (leads x T)")
        if not self.labels and self.label is not None:
            self.labels = (int(self.label),)
        self.labels = tuple(int(v) for v in self.labels)
        if self.label is None and len(self.labels) == 1:
            self.label = self.labels[0]

    @property
    def length(self) -> int:
        return self.leads.shape[1]


@dataclass
class MaskedBatch:
    """Padded signals ``(batch, leads, L)`` with a ``(batch, 1, L)`` validity mask."""

    signals: np.ndarray
    mask: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.signals.ndim != 3 or self.mask.ndim != 3:
            raise DataValidationError("signals and mask must be 3-D")
        if self.mask.shape != (self.signals.shape[0], 1, self.signals.shape[2]):
            raise DataValidationError(
                f"mask shape {self.mask.shape} does not match signals {self.signals.shape}")

    def __len__(self):
        return self.signals.shape[0]


@dataclass
class SplitSpec:
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]
    seed: int

    def __post_init__(self):
        sets = [set(self.train_ids), set(self.val_ids), set(self.test_ids)]
        if (sets[0] & sets[1]) or (sets[0] & sets[2]) or (sets[1] & sets[2]):
            raise DataValidationError("split id sets overlap")

    def save(self, path):
        payload = {"seed": self.seed, "train": sorted(self.train_ids),
                   "val": sorted(self.val_ids), "test": sorted(self.test_ids)}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        payload = json.loads(Path(path).read_text())
        return cls(payload["train"], payload["val"], payload["test"], payload["seed"])


# ---------------------------------------------------------------------------
# beat datasets

def load_beat_dataset(path, split: str = "train") -> list[BeatSample]:
    """Parse a 188-column beat table. ``split`` is informational only."""
    if split not in ("train", "test", "val"):
        raise ValueError(f"unknown split {split!r}")
    samples = []
    with open(path, newline="") as fh:
        for row_no, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != BEAT_LENGTH + 1:
                raise DataFormatError(
                    f"{path}: row {row_no} has {len(row)} columns, expected {BEAT_LENGTH + 1}")
            try:
                values = np.array([float(c) for c in row[:-1]])
                label_f = float(row[-1])
            except ValueError as exc:
                raise DataFormatError(f"{path}: row {row_no} has a non-numeric cell ({exc})") from None
            if label_f != int(label_f) or not 0 <= label_f < len(BEAT_CLASSES):
                raise DataValidationError(f"{path}: row {row_no} label {row[-1]} outside 0..4")
            samples.append(BeatSample(values, int(label_f)))
    logger.info("loaded %d beats from %s", len(samples), path)
    return samples


def write_beat_dataset(samples: Iterable[BeatSample], path) -> None:
    # repr() of a float64 round-trips exactly
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for s in samples:
            writer.writerow([repr(float(v)) for v in s.values] + [int(s.label)])


def beats_to_arrays(samples: Sequence[BeatSample]) -> tuple[np.ndarray, np.ndarray]:
    if not samples:
        return np.zeros((0, BEAT_LENGTH)), np.zeros(0, dtype=np.int64)
    X = np.stack([s.values for s in samples])
    y = np.array([s.label for s in samples], dtype=np.int64)
    return X, y


def _label_of(sample) -> int:
    return int(sample.label)


def balance_by_upsampling(samples: Sequence, seed: int) -> list:
    """Upsample minority classes to the majority count.

    Originals are kept in order; duplicates for each class are drawn uniformly
    with replacement and appended class by class in ascending label order.
    """
    if len(samples) == 0:
        raise DataValidationError("cannot balance an empty dataset")
    by_class = defaultdict(list)
    for idx, s in enumerate(samples):
        by_class[_label_of(s)].append(idx)
    target = max(len(v) for v in by_class.values())
    rng = np.random.default_rng(seed)
    out = list(samples)
    for label in sorted(by_class):
        members = by_class[label]
        need = target - len(members)
        if need > 0:
            picks = rng.integers(0, len(members), size=need)
            out.extend(samples[members[i]] for i in picks)
    return out


def split_train_val(train: Sequence, fraction: float, seed: int) -> tuple[list, list]:
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    n_val = int(round(fraction * len(train)))
    perm = np.random.default_rng(seed).permutation(len(train))
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return [train[i] for i in train_idx], [train[i] for i in val_idx]


@dataclass
class _LooseBeat:
    # synthetic beats outside the 187 / 5-class contract
    values: np.ndarray
    label: int


def synth_beats(n_per_class: int, n_classes: int = 5, length: int = BEAT_LENGTH,
                seed: int = 0, bump: float = 0.25, jitter: int = 6, noise: float = 0.05) -> list:
    """Synthetic beats: a shared R-peak/T-wave morphology plus one class-specific bump.

    The bump's position and width depend on the class; each sample draws a
    time shift in ``[-jitter, jitter]``, a bump amplitude in
    ``bump * [0.7, 1.3]`` and white noise, and is clipped to [-1, 1]. The
    classes are separable but close enough that an unregularized network is
    easy to fool with small perturbations.
    """
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    rng = np.random.default_rng(seed)
    t = np.arange(length, dtype=np.float64)
    centers = np.linspace(0.35, 0.75, n_classes) * length
    widths = np.linspace(2.5, 6.0, n_classes)
    strict = length == BEAT_LENGTH and n_classes <= len(BEAT_CLASSES)
    samples = []
    for label in range(n_classes):
        for _ in range(n_per_class):
            s = rng.integers(-jitter, jitter + 1)
            wave = 0.9 * np.exp(-0.5 * ((t - 0.15 * length - s) / 3.0) ** 2)
            wave += 0.3 * np.exp(-0.5 * ((t - 0.5 * length - s) / 12.0) ** 2)
            amp = bump * (0.7 + 0.6 * rng.random())
            wave += amp * np.exp(-0.5 * ((t - centers[label] - s) / widths[label]) ** 2)
            wave += noise * rng.standard_normal(length)
            values = np.clip(wave, -1.0, 1.0)
            samples.append(BeatSample(values, label) if strict else _LooseBeat(values, label))
    return samples


# ---------------------------------------------------------------------------
# recording corpora

def remove_leads(rec: Recording, drop: Sequence[int] = CPSC_DROPPED_LEADS) -> Recording:
    keep = [i for i in range(rec.leads.shape[0]) if i not in set(drop)]
    return Recording(rec.leads[keep], rec.label, rec.id, rec.labels)


def scale_leads_maxabs(rec: Recording) -> Recording:
    leads = rec.leads
    peak = np.max(np.abs(leads), axis=1, keepdims=True)
    # all-zero leads are left as-is
    peak = np.where(peak > 0, peak, 1.0)
    return Recording(leads / peak, rec.label, rec.id, rec.labels)


class MaxAbsLeadScaler(TransformerMixin, BaseEstimator):
    """Stateless per-sample, per-lead max-abs scaling for ``(n, leads, T)`` arrays."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        peak = np.max(np.abs(X), axis=-1, keepdims=True)
        return X / np.where(peak > 0, peak, 1.0)


def prepare_cpsc_corpus(recordings: Sequence[Recording], seed: int = 0,
                        num_classes: int = len(CPSC_CLASSES), balance: bool = True,
                        drop_leads: Sequence[int] = CPSC_DROPPED_LEADS):
    """Single-label filter, 5/50 per-class val/test draw, lead removal, upsampling.

    Returns ``(train, val, test, split)`` where ``split`` is a :class:`SplitSpec`
    over the retained recording ids.
    """
    single = [r for r in recordings if len(r.labels) == 1]
    dropped = len(recordings) - len(single)
    if dropped:
        logger.info("removed %d multi-label recordings", dropped)
    by_class = defaultdict(list)
    for r in single:
        by_class[r.labels[0]].append(r)
    need = CPSC_VAL_PER_CLASS + CPSC_TEST_PER_CLASS
    for c in range(num_classes):
        if len(by_class[c]) < need:
            raise DataValidationError(
                f"class {c} ({_class_name(c)}) has {len(by_class[c])} single-label "
                f"recordings, need at least {need}")
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for c in sorted(by_class):
        members = sorted(by_class[c], key=lambda r: r.id)
        perm = rng.permutation(len(members))
        val += [members[i] for i in perm[:CPSC_VAL_PER_CLASS]]
        test += [members[i] for i in perm[CPSC_VAL_PER_CLASS:need]]
        train += [members[i] for i in perm[need:]]
    split = SplitSpec([r.id for r in train], [r.id for r in val], [r.id for r in test], seed)
    train, val, test = ([remove_leads(r, drop_leads) for r in part] for part in (train, val, test))
    if balance and train:
        train = balance_by_upsampling(train, seed)
    return train, val, test, split


def _class_name(c: int) -> str:
    return CPSC_CLASSES[c] if 0 <= c < len(CPSC_CLASSES) else str(c)


def pad_and_mask(rec: Recording | np.ndarray, target_len: int = CPSC_PAD_LENGTH,
                 mode: str = "eval_left", seed: int | np.random.Generator | None = None):
    """Pad or truncate one recording to ``target_len``.

    Returns ``(signal, mask)`` with shapes ``(leads, target_len)`` and
    ``(1, target_len)``.
    """
    leads = rec.leads if isinstance(rec, Recording) else np.asarray(rec, dtype=np.float64)
    n_leads, T = leads.shape
    signal = np.zeros((n_leads, target_len), dtype=leads.dtype)
    mask = np.zeros((1, target_len), dtype=leads.dtype)
    if T >= target_len:
        signal[:] = leads[:, :target_len]
        mask[:] = 1.0
        return signal, mask
    if mode == "eval_left":
        offset = 0
    elif mode == "train_random":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        offset = int(rng.integers(0, target_len - T + 1))
    else:
        raise ValueError(f"unknown padding mode {mode!r}")
    signal[:, offset:offset + T] = leads
    mask[:, offset:offset + T] = 1.0
    return signal, mask


def collate_recordings(recs: Sequence[Recording], target_len: int = CPSC_PAD_LENGTH,
                       mode: str = "eval_left", seed: int | None = None) -> MaskedBatch:
    rng = np.random.default_rng(seed)
    pairs = [pad_and_mask(r, target_len, mode, rng) for r in recs]
    signals = np.stack([p[0] for p in pairs])
    mask = np.stack([p[1] for p in pairs])
    labels = np.array([r.label for r in recs], dtype=np.int64)
    return MaskedBatch(signals, mask, labels)


def load_recording_corpus(directory, manifest) -> list[Recording]:
    directory = Path(directory)
    recs = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            rid = row["id"]
            labels = tuple(int(v) for v in row["labels"].split(";") if v.strip())
            leads = np.load(directory / f"{rid}.npy")
            recs.append(Recording(leads, None, rid, labels))
    return recs


def write_recording_corpus(recs: Iterable[Recording], directory, manifest=None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = Path(manifest) if manifest else directory / "manifest.csv"
    seen = Counter()
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "labels"])
        for r in recs:
            # upsampled copies share an id; store them once
            seen[r.id] += 1
            if seen[r.id] > 1:
                continue
            np.save(directory / f"{r.id}.npy", r.leads)
            writer.writerow([r.id, ";".join(str(v) for v in r.labels)])
    return manifest


def synth_recordings(n_per_class: int, n_classes: int = 9, n_leads: int = 12,
                     min_len: int = 3000, max_len: int = 6000, seed: int = 0,
                     multi_label_every: int = 0) -> list[Recording]:
    """Synthetic variable-length multi-lead recordings (desk-scale stand-in)."""
    rng = np.random.default_rng(seed)
    recs = []
    k = 0
    for label in range(n_classes):
        period = 200 + 40 * label
        for j in range(n_per_class):
            T = int(rng.integers(min_len, max_len + 1))
            t = np.arange(T)
            phase = rng.integers(0, period)
            beat = np.exp(-0.5 * (((t + phase) % period - period / 2) / (4 + label)) ** 2)
            gains = rng.uniform(0.5, 2.0, size=(n_leads, 1))
            leads = gains * beat + 0.05 * rng.standard_normal((n_leads, T))
            labels = (label,)
            k += 1
            if multi_label_every and k % multi_label_every == 0:
                labels = (label, (label + 1) % n_classes)
            recs.append(Recording(leads, None, f"R{label:02d}{j:05d}", labels))
    return recs
