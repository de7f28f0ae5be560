"""Training loop, cross-validation, sensor-dropout sweeps and ablation drivers."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .data import CorruptionSpec, Dataset, fit_normalization, leave_random_sensor_out, normalize, stratified_kfold
from .metrics import MetricUndefined, auprc, auroc, multiclass_report
from .model import VARIANTS, ModelConfig, ablation_config, forward_batch, init_params, predict_proba, save_checkpoint
from .optim import AdamState, adam_step
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    class_weighting: str = "auto"   # auto | on | off; auto weights binary tasks
    patience: int = 10
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.class_weighting not in ("auto", "on", "off"):
            raise ValueError("class_weighting must be auto, on or off")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def fold_seed(master: int, index: int) -> int:
    """Independent per-fold stream derived from (master seed, fold index)."""
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


def _check_shapes(dataset: Dataset, cfg: ModelConfig) -> None:
    got = (dataset.length, dataset.n_sensors, dataset.num_classes)
    want = (cfg.length, cfg.n_sensors, cfg.num_classes)
    if got != want:
        raise T.DimensionError(f"dataset (L, N_s, classes) = {got} but model config has {want}")


def class_weights(labels: np.ndarray, num_classes: int, mode: str) -> np.ndarray | None:
    if mode == "off" or (mode == "auto" and num_classes != 2):
        return None
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    w = np.where(counts > 0, len(labels) / (num_classes * np.maximum(counts, 1)), 0.0)
    return w


def predict(params, cfg: ModelConfig, dataset: Dataset, batch: int = 256) -> np.ndarray:
    values, masks, _ = dataset.arrays()
    out = [
        predict_proba(forward_batch(values[i:i + batch], masks[i:i + batch], params, cfg))
        for i in range(0, len(values), batch)
    ]
    return np.concatenate(out) if out else np.zeros((0, cfg.num_classes))


def _selection_metric(probs: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    if num_classes == 2:
        try:
            return auroc(probs[:, 1], labels)
        except MetricUndefined:
            return float("nan")
    return multiclass_report(probs, labels, num_classes)["f1"]


def train_model(
    train_set: Dataset, val_set: Dataset, model_cfg: ModelConfig, train_cfg: TrainConfig
) -> tuple[dict[str, Tensor], list[dict]]:
    """Mini-batch Adam on (optionally class-weighted) cross-entropy.

    Returns the parameters of the epoch with the best validation metric
    (AUROC for binary, macro F1 otherwise) and the per-epoch history.
    """
    _check_shapes(train_set, model_cfg)
    rng = np.random.Generator(np.random.Philox(train_cfg.seed))
    params = init_params(model_cfg, train_cfg.seed)
    state = AdamState(lr=train_cfg.lr)
    values, masks, labels = train_set.arrays()
    weights = class_weights(labels, model_cfg.num_classes, train_cfg.class_weighting)
    val_labels = val_set.labels
    plist = list(params.values())

    history: list[dict] = []
    best_metric = -math.inf
    best = {k: p.data.copy() for k, p in params.items()}
    stale = 0
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(len(labels))
        losses = []
        for b, lo in enumerate(range(0, len(order), train_cfg.batch_size)):
            idx = order[lo:lo + train_cfg.batch_size]
            T.zero_grad(plist)
            with T.Tape() as tape:
                logits = forward_batch(values[idx], masks[idx], params, model_cfg, rng=rng)
                loss = T.cross_entropy(logits, labels[idx], weights)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"loss is {float(loss.data)} at epoch {epoch}, batch {b}")
            tape.backward(loss, plist)
            adam_step(params, {k: p.grad for k, p in params.items()}, state)
            losses.append(float(loss.data))
        probs = predict(params, model_cfg, val_set)
        metric = _selection_metric(probs, val_labels, model_cfg.num_classes)
        val_loss = float(
            T.cross_entropy(T.Tensor(np.log(np.clip(probs, 1e-300, None))), val_labels).data
        )
        # undefined val metric (single-class val) falls back to -val_loss
        score = metric if np.isfinite(metric) else -val_loss
        history.append({
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_metric": metric,
            "val_loss": val_loss,
            "selection_score": score,
        })
        if score > best_metric:
            best_metric = score
            best = {k: p.data.copy() for k, p in params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= train_cfg.patience:
                break
    out = {k: Tensor(v, requires_grad=True, name=k) for k, v in best.items()}
    if train_cfg.checkpoint_path:
        save_checkpoint(train_cfg.checkpoint_path, out, model_cfg)
    return out, history


# -- reports --------------------------------------------------------------------

@dataclass
class EvalReport:
    task: str
    metrics: dict[str, float]
    n: int
    class_counts: list[int]
    notes: dict = field(default_factory=dict)

    def to_lines(self) -> list[str]:
        counts = ",".join(str(c) for c in self.class_counts)
        head = f"task={self.task} n={self.n} class_counts={counts}"
        if self.notes:
            head += " " + " ".join(f"{k}={_enc(v)}" for k, v in sorted(self.notes.items()))
        return [head] + [f"metric={k} value={v!r}" for k, v in self.metrics.items()]

    @classmethod
    def from_lines(cls, lines: Sequence[str]) -> "EvalReport":
        head = _kv(lines[0])
        notes = {k: _dec(v) for k, v in head.items() if k not in ("task", "n", "class_counts")}
        metrics = {}
        for line in lines[1:]:
            kv = _kv(line)
            metrics[kv["metric"]] = float(kv["value"])
        counts = [int(c) for c in head["class_counts"].split(",") if c]
        return cls(head["task"], metrics, int(head["n"]), counts, notes)


@dataclass
class CvReport:
    folds: list[EvalReport]
    manifest: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> dict[str, tuple[float, float]]:
        out = {}
        for name in self.folds[0].metrics if self.folds else []:
            vals = np.array([f.metrics[name] for f in self.folds])
            std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            out[name] = (float(vals.mean()), std)
        return out

    def mean(self, metric: str) -> float:
        return self.aggregate[metric][0]

    def to_text(self) -> str:
        lines = ["#mvirts-report v1"]
        for i, f in enumerate(self.folds):
            lines.append(f"[fold {i}]")
            lines.extend(f.to_lines())
        lines.append("[aggregate]")
        for name, (m, s) in self.aggregate.items():
            lines.append(f"metric={name} mean={m!r} std={s!r}")
        lines.append("[manifest]")
        for k in sorted(self.manifest):
            lines.append(f"{k}={_enc(self.manifest[k])}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CvReport":
        lines = text.splitlines()
        if not lines or lines[0] != "#mvirts-report v1":
            raise ValueError("not an mvirts report")
        sections: list[tuple[str, list[str]]] = []
        for line in lines[1:]:
            if line.startswith("["):
                sections.append((line.strip("[]"), []))
            elif line:
                sections[-1][1].append(line)
        folds, manifest = [], {}
        for name, body in sections:
            if name.startswith("fold"):
                folds.append(EvalReport.from_lines(body))
            elif name == "manifest":
                for line in body:
                    k, v = line.split("=", 1)
                    manifest[k] = _dec(v)
        return cls(folds, manifest)

    def summary(self) -> dict:
        return {
            "folds": [{"task": f.task, "n": f.n, **f.metrics} for f in self.folds],
            "aggregate": {k: {"mean": m, "std": s} for k, (m, s) in self.aggregate.items()},
        }


def _enc(v) -> str:
    return json.dumps(v, sort_keys=True, separators=(",", ":"))


def _dec(s: str):
    try:
        return json.loads(s)
    except json.JSONDecodeError:
        return s


def _kv(line: str) -> dict[str, str]:
    return dict(tok.split("=", 1) for tok in line.split(" "))


def evaluate(params, cfg: ModelConfig, test_set: Dataset, task_kind: str | None = None) -> EvalReport:
    """AUROC/AUPRC for binary tasks, accuracy and macro P/R/F1 otherwise."""
    if len(test_set) == 0:
        raise ValueError("evaluate needs a non-empty test set")
    task = task_kind or ("binary" if cfg.num_classes == 2 else "multiclass")
    probs = predict(params, cfg, test_set)
    labels = test_set.labels
    counts = np.bincount(labels, minlength=cfg.num_classes).tolist()
    if task == "binary":
        try:
            metrics = {"auroc": auroc(probs[:, 1], labels), "auprc": auprc(probs[:, 1], labels)}
        except MetricUndefined as exc:
            raise MetricUndefined(f"test set of {len(labels)} samples, class counts {counts}: {exc}") from None
        notes = {}
    else:
        rep = multiclass_report(probs, labels, cfg.num_classes)
        metrics = {k: rep[k] for k in ("accuracy", "precision", "recall", "f1")}
        notes = {"averaging": "macro", "absent_classes": rep["absent_classes"]}
    return EvalReport(task, metrics, len(labels), counts, notes)


# -- cross-validation drivers ----------------------------------------------------

def _base_manifest(dataset: Dataset, k: int, model_cfg: ModelConfig, train_cfg: TrainConfig) -> dict:
    return {
        "dataset_fingerprint": dataset.fingerprint(),
        "folds": k,
        "master_seed": train_cfg.seed,
        "model_config": model_cfg.to_dict(),
        "train_config": {k: v for k, v in train_cfg.to_dict().items() if k != "checkpoint_path"},
    }


def _train_folds(dataset: Dataset, k: int, model_cfg: ModelConfig, train_cfg: TrainConfig) -> Iterable[dict]:
    """Yield, per fold, the trained parameters and the normalised splits."""
    _check_shapes(dataset, model_cfg)
    folds = stratified_kfold(dataset, k, train_cfg.seed)
    for f, (tr, va, te) in enumerate(folds):
        seed = fold_seed(train_cfg.seed, f)
        train_raw = dataset.subset(tr)
        stats = fit_normalization(train_raw)
        train_set = normalize(train_raw, stats)
        val_set = normalize(dataset.subset(va), stats)
        test_set = normalize(dataset.subset(te), stats)
        cfg = TrainConfig(**{**train_cfg.to_dict(), "seed": seed})
        if train_cfg.checkpoint_path:
            cfg.checkpoint_path = f"{train_cfg.checkpoint_path}.fold{f}"
        params, history = train_model(train_set, val_set, model_cfg, cfg)
        if __debug__ and test_set.access_count:
            raise AssertionError("test split was read during training")
        yield {
            "fold": f,
            "seed": seed,
            "params": params,
            "history": history,
            "test": test_set,
            "indices": {"train": tr.tolist(), "val": va.tolist(), "test": te.tolist()},
        }


def run_cv(dataset: Dataset, k: int, model_cfg: ModelConfig, train_cfg: TrainConfig) -> CvReport:
    reports, seeds, test_idx, epochs = [], [], [], []
    for fold in _train_folds(dataset, k, model_cfg, train_cfg):
        reports.append(evaluate(fold["params"], model_cfg, fold["test"]))
        seeds.append(fold["seed"])
        test_idx.append(fold["indices"]["test"])
        epochs.append(len(fold["history"]))
    manifest = _base_manifest(dataset, k, model_cfg, train_cfg)
    manifest.update({"fold_seeds": seeds, "fold_test_indices": test_idx, "epochs_run": epochs})
    return CvReport(reports, manifest)


def run_sensor_dropout_sweep(
    dataset: Dataset,
    ratios: Sequence[float],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    k: int = 5,
) -> list[tuple[float, CvReport]]:
    """Train once per fold on complete data; evaluate each ratio on a corrupted test split.

    The dropped set for (fold, ratio) is a prefix of one permutation drawn from
    the fold seed, so sets grow monotonically with the ratio.
    """
    ratios = [float(r) for r in ratios]
    for r in ratios:
        CorruptionSpec(r)
    per_ratio: dict[float, list[EvalReport]] = {r: [] for r in ratios}
    dropped: dict[float, list[list[int]]] = {r: [] for r in ratios}
    seeds, test_idx = [], []
    for fold in _train_folds(dataset, k, model_cfg, train_cfg):
        seeds.append(fold["seed"])
        test_idx.append(fold["indices"]["test"])
        for r in ratios:
            corrupted = leave_random_sensor_out(fold["test"], CorruptionSpec(r, fold["seed"]))
            dropped[r].append(corrupted.meta["dropped_sensors"])
            per_ratio[r].append(evaluate(fold["params"], model_cfg, corrupted))
    out = []
    for r in ratios:
        manifest = _base_manifest(dataset, k, model_cfg, train_cfg)
        manifest.update({
            "fold_seeds": seeds,
            "fold_test_indices": test_idx,
            "drop_ratio": r,
            "dropped_sensors": dropped[r],
        })
        out.append((r, CvReport(per_ratio[r], manifest)))
    return out


def resolve_configuration(name: str, base: ModelConfig) -> ModelConfig:
    """``v1``..``v4`` select a variant; anything else is an ablation row name."""
    if name.lower() in VARIANTS:
        return ModelConfig.from_dict({**base.to_dict(), "variant": name.lower()})
    return ablation_config(base, name)


def run_variant_ablation(
    dataset: Dataset,
    variants: Sequence[str],
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    k: int = 5,
) -> dict[str, CvReport]:
    """One CvReport per configuration, all on the same folds and seeds."""
    if not variants:
        raise ValueError("need at least one variant or ablation row")
    configs = {name: resolve_configuration(name, model_cfg) for name in variants}
    table = {name: run_cv(dataset, k, cfg, train_cfg) for name, cfg in configs.items()}
    for name, rep in table.items():
        rep.manifest["configuration"] = name
    return table
