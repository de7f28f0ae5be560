"""Irregular series containers, triplet file I/O, folds, corruption, synthetic data."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

NIRTS = "nirts"
AIRTS = "airts"


class ParseError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class IrtsSample:
    """One series. ``values`` is L x N_s with NaN at missing cells."""

    values: np.ndarray
    time_mask: np.ndarray
    label: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.time_mask = np.asarray(self.time_mask, dtype=np.float64)
        if self.values.shape != self.time_mask.shape or self.values.ndim != 2:
            raise ValueError(
                f"values {self.values.shape} and mask {self.time_mask.shape} must be equal 2-D shapes"
            )
        if not np.array_equal(self.time_mask == 0, np.isnan(self.values)):
            raise ValueError("mask and value missingness disagree")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_sensors(self) -> int:
        return self.values.shape[1]

    @property
    def sensor_mask(self) -> np.ndarray:
        return self.time_mask.T


def build_masks(sample: IrtsSample) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(m_t, m_s, x)``: time mask, sensor mask (its transpose), zero-filled values."""
    m_t = (sample.time_mask != 0).astype(np.float64)
    x = np.where(m_t == 1, sample.values, 0.0)
    return m_t, m_t.T.copy(), x


@dataclass
class Dataset:
    samples: list[IrtsSample]
    num_classes: int
    sensor_names: list[str] | None = None
    normalization_stats: dict | None = None
    meta: dict = field(default_factory=dict)
    access_count: int = field(default=0, compare=False)

    def __post_init__(self):
        sizes = {s.n_sensors for s in self.samples}
        if len(sizes) > 1:
            raise ValueError(f"samples disagree on sensor count: {sorted(sizes)}")
        for s in self.samples:
            if not 0 <= s.label < self.num_classes:
                raise ValueError(f"label {s.label} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_sensors(self) -> int:
        return self.samples[0].n_sensors if self.samples else 0

    @property
    def length(self) -> int:
        return max((s.length for s in self.samples), default=0)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def missing_ratio(self) -> float:
        total = sum(s.time_mask.size for s in self.samples)
        observed = sum(float(s.time_mask.sum()) for s in self.samples)
        return 1.0 - observed / total if total else 1.0

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stacked ``(values, masks, labels)``; missing values are 0. Samples must share L."""
        self.access_count += 1
        if len({s.length for s in self.samples}) > 1:
            raise ValueError("samples have different lengths; pad_or_truncate first")
        masks = np.stack([(s.time_mask != 0).astype(np.float64) for s in self.samples])
        values = np.stack([np.nan_to_num(s.values, nan=0.0) for s in self.samples])
        return values * masks, masks, self.labels

    def subset(self, idx: Sequence[int]) -> "Dataset":
        return replace(self, samples=[self.samples[i] for i in idx], meta=dict(self.meta), access_count=0)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(f"{self.num_classes}:{self.n_sensors}:{len(self.samples)}".encode())
        for s in self.samples:
            h.update(np.int64(s.label).tobytes())
            h.update(np.int64(s.length).tobytes())
            h.update(s.time_mask.astype(np.uint8).tobytes())
            h.update(np.nan_to_num(s.values, nan=0.0).astype("<f8").tobytes())
        return h.hexdigest()


# -- triplet format -----------------------------------------------------------

HEADER_TAG = "#irts"


def load_triplets(path: str | Path) -> Dataset:
    """Parse the ``#irts v1`` triplet format into a Dataset.

    Duplicate (sample, t, sensor) records keep the last value; the count is in
    ``dataset.meta["duplicates"]``.
    """
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(HEADER_TAG):
        raise ParseError("line 1: missing '#irts v1 ...' header")
    head = lines[0].split()
    if len(head) < 2 or head[1] != "v1":
        raise ParseError(f"line 1: unsupported version in header {lines[0]!r}")
    opts = {}
    for tok in head[2:]:
        if "=" not in tok:
            raise ParseError(f"line 1: bad header field {tok!r}")
        k, v = tok.split("=", 1)
        opts[k] = v
    try:
        n_sensors = int(opts["sensors"])
        n_classes = int(opts["classes"])
        fixed_len = int(opts["length"]) if "length" in opts else None
    except (KeyError, ValueError) as exc:
        raise ParseError(f"line 1: header needs integer sensors= and classes= ({exc})") from None

    labels: dict[str, int] = {}
    obs: dict[str, dict[tuple[int, int], float]] = {}
    duplicates = 0
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        kind = parts[0]
        try:
            if kind == "L" and len(parts) == 3:
                sid, cls = parts[1], int(parts[2])
                if not 0 <= cls < n_classes:
                    raise ParseError(f"line {lineno}: class {cls} outside [0, {n_classes})")
                labels[sid] = cls
                obs.setdefault(sid, {})
            elif kind == "O" and len(parts) == 5:
                sid, t, s, val = parts[1], int(parts[2]), int(parts[3]), float(parts[4])
                if sid not in labels:
                    raise ParseError(f"line {lineno}: observation for undeclared sample {sid!r}")
                if not 0 <= s < n_sensors:
                    raise ParseError(f"line {lineno}: unknown sensor id {s}")
                if t < 0 or (fixed_len is not None and t >= fixed_len):
                    raise ParseError(f"line {lineno}: time index {t} outside the declared length")
                if not np.isfinite(val):
                    raise ParseError(f"line {lineno}: non-finite value {parts[4]!r}")
                if (t, s) in obs[sid]:
                    duplicates += 1
                obs[sid][(t, s)] = val
            else:
                raise ParseError(f"line {lineno}: malformed record {line!r}")
        except ValueError as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"line {lineno}: {exc}") from None

    if fixed_len is None:
        fixed_len = 1 + max((t for o in obs.values() for (t, _) in o), default=0)
    samples = []
    for sid, cls in labels.items():
        values = np.full((fixed_len, n_sensors), np.nan)
        for (t, s), val in obs[sid].items():
            values[t, s] = val
        samples.append(IrtsSample(values, ~np.isnan(values), cls))
    if duplicates:
        log.warning("%s: %d duplicate observations (last value kept)", path, duplicates)
    return Dataset(
        samples,
        n_classes,
        meta={"source": str(path), "duplicates": duplicates, "sample_ids": list(labels)},
    )


def save_triplets(dataset: Dataset, path: str | Path) -> None:
    out = [
        f"{HEADER_TAG} v1 sensors={dataset.n_sensors} classes={dataset.num_classes} "
        f"length={dataset.length}"
    ]
    ids = dataset.meta.get("sample_ids") or [f"s{i}" for i in range(len(dataset))]
    for sid, s in zip(ids, dataset.samples):
        out.append(f"L {sid} {s.label}")
    for sid, s in zip(ids, dataset.samples):
        for t, k in zip(*np.nonzero(s.time_mask)):
            out.append(f"O {sid} {t} {k} {float(s.values[t, k])!r}")
    Path(path).write_text("\n".join(out) + "\n")


def pad_or_truncate(dataset: Dataset, length: int) -> Dataset:
    """Fix every sample to ``length`` steps; padded steps are missing."""
    samples = []
    for s in dataset.samples:
        values = np.full((length, s.n_sensors), np.nan)
        n = min(length, s.length)
        values[:n] = s.values[:n]
        samples.append(IrtsSample(values, ~np.isnan(values), s.label))
    return replace(dataset, samples=samples, meta=dict(dataset.meta), access_count=0)


# -- normalisation --------------------------------------------------------------

def fit_normalization(dataset: Dataset) -> dict:
    """Per-sensor mean/std over observed cells only."""
    n_s = dataset.n_sensors
    mean = np.zeros(n_s)
    std = np.ones(n_s)
    count = np.zeros(n_s, dtype=np.int64)
    for k in range(n_s):
        vals = np.concatenate(
            [s.values[:, k][s.time_mask[:, k] != 0] for s in dataset.samples]
        ) if dataset.samples else np.zeros(0)
        count[k] = vals.size
        if vals.size:
            mean[k] = vals.mean()
            sd = vals.std()
            std[k] = sd if sd > 0 else 1.0
    return {"mean": mean, "std": std, "count": count}


def normalize(dataset: Dataset, stats: dict | None = None) -> Dataset:
    """Z-score observed values per sensor.

    Sensors with no observations are untouched; zero-variance sensors are only
    centred. Stats default to those of ``dataset`` itself.
    """
    stats = fit_normalization(dataset) if stats is None else stats
    mean, std, count = stats["mean"], stats["std"], stats["count"]
    active = count > 0
    samples = []
    for s in dataset.samples:
        values = s.values.copy()
        values[:, active] = (values[:, active] - mean[active]) / std[active]
        samples.append(IrtsSample(values, s.time_mask, s.label))
    meta = dict(dataset.meta)
    meta["unobserved_sensors"] = int((~active).sum())
    return replace(dataset, samples=samples, normalization_stats=stats, meta=meta, access_count=0)


# -- folds ------------------------------------------------------------------------

def stratified_kfold(
    labels: Sequence[int] | Dataset, k: int, seed: int
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Stratified folds as ``(train_idx, val_idx, test_idx)``.

    Fold ``f`` tests on the f-th stratified block, so test blocks partition the
    index set. Validation is a stratified slice of the remaining indices half
    the size of the test block (at least one per class).
    """
    y = labels.labels if isinstance(labels, Dataset) else np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    classes, counts = np.unique(y, return_counts=True)
    if (counts < k).any():
        bad = classes[counts < k].tolist()
        raise ConfigError(f"classes {bad} have fewer than k={k} members")
    rng = np.random.Generator(np.random.Philox(seed))
    blocks: list[list[int]] = [[] for _ in range(k)]
    offset = 0
    for c in classes:
        members = rng.permutation(np.flatnonzero(y == c))
        for j, i in enumerate(members):
            blocks[(offset + j) % k].append(int(i))
        offset += len(members)
    folds = []
    val_frac = 1.0 / (2 * (k - 1))
    for f in range(k):
        test = np.array(sorted(blocks[f]), dtype=np.int64)
        rest = np.array(sorted(i for g in range(k) if g != f for i in blocks[g]), dtype=np.int64)
        val = []
        for c in classes:
            members = rng.permutation(rest[y[rest] == c])
            take = max(1, int(round(val_frac * len(members))))
            val.extend(members[:take].tolist())
        val = np.array(sorted(val), dtype=np.int64)
        train = np.setdiff1d(rest, val)
        folds.append((train, val, test))
    return folds


# -- corruption ---------------------------------------------------------------------

@dataclass(frozen=True)
class CorruptionSpec:
    drop_ratio: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.drop_ratio <= 1.0:
            raise ValueError(f"drop_ratio must lie in [0, 1], got {self.drop_ratio}")


def dropped_sensors(n_sensors: int, spec: CorruptionSpec) -> list[int]:
    """One seeded permutation; the dropped set is its leading prefix."""
    order = np.random.Generator(np.random.Philox(spec.seed)).permutation(n_sensors)
    n_drop = int(np.floor(spec.drop_ratio * n_sensors + 0.5))
    return sorted(int(i) for i in order[:n_drop])


def leave_random_sensor_out(dataset: Dataset, spec: CorruptionSpec) -> Dataset:
    """Zero the values and masks of one random sensor subset in every sample."""
    drop = dropped_sensors(dataset.n_sensors, spec)
    samples = []
    for s in dataset.samples:
        values = s.values.copy()
        values[:, drop] = np.nan
        samples.append(IrtsSample(values, ~np.isnan(values), s.label))
    meta = dict(dataset.meta)
    meta["dropped_sensors"] = drop
    meta["drop_ratio"] = spec.drop_ratio
    return replace(dataset, samples=samples, meta=meta, access_count=0)


# -- synthetic data -----------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Synthetic corpus in which either the mask (nirts) or the values (airts) carry the label.

    nirts: sensor k of class c is observed with probability
    ``q + sign[c, k] * signal * min(q, 1 - q)`` where ``q = 1 - base_missing``
    and ``sign`` is +1 for ``k % C == c`` and ``-1/(C-1)`` otherwise, so the
    class-averaged observation rate is exactly ``q``. Values are N(0, 1) for
    every class.

    airts: every cell is missing with probability ``base_missing`` regardless
    of class; observed values are N(signal * sign[c, k], 1).
    """

    regime: str = NIRTS
    n_samples: int = 500
    length: int = 8
    n_sensors: int = 4
    num_classes: int = 2
    base_missing: float = 0.5
    signal: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.regime not in (NIRTS, AIRTS):
            raise ValueError(f"regime must be {NIRTS!r} or {AIRTS!r}, got {self.regime!r}")
        if self.signal <= 0:
            raise ValueError("signal strength must be positive")
        if self.regime == NIRTS and self.signal > 1:
            raise ValueError("nirts signal strength must be <= 1 (probabilities stay in [0, 1])")
        if not 0.0 <= self.base_missing < 1.0:
            raise ValueError("base_missing must lie in [0, 1)")
        if self.num_classes < 2 or self.n_samples < self.num_classes:
            raise ValueError("need >= 2 classes and at least one sample per class")
        if self.length < 1 or self.n_sensors < 1:
            raise ValueError("length and n_sensors must be >= 1")


def _class_signs(num_classes: int, n_sensors: int) -> np.ndarray:
    signs = np.full((num_classes, n_sensors), -1.0 / (num_classes - 1))
    for k in range(n_sensors):
        signs[k % num_classes, k] = 1.0
    return signs


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    rng = np.random.Generator(np.random.Philox(spec.seed))
    c, n_s, length = spec.num_classes, spec.n_sensors, spec.length
    labels = rng.permutation(np.arange(spec.n_samples) % c)
    signs = _class_signs(c, n_s)
    q = 1.0 - spec.base_missing
    samples = []
    for y in labels:
        if spec.regime == NIRTS:
            p_obs = q + signs[y] * spec.signal * min(q, 1.0 - q)
            mu = np.zeros(n_s)
        else:
            p_obs = np.full(n_s, q)
            mu = spec.signal * signs[y]
        observed = rng.random((length, n_s)) < p_obs
        values = mu + rng.standard_normal((length, n_s))
        values[~observed] = np.nan
        samples.append(IrtsSample(values, observed, int(y)))
    meta = {
        "synthetic": {
            "regime": spec.regime,
            "n_samples": spec.n_samples,
            "length": length,
            "n_sensors": n_s,
            "num_classes": c,
            "base_missing": spec.base_missing,
            "signal": spec.signal,
            "seed": spec.seed,
        },
        "generative_process": (SyntheticSpec.__doc__ or "").strip(),
    }
    return Dataset(samples, c, sensor_names=[f"sensor{k}" for k in range(n_s)], meta=meta)
