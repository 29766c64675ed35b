"""Training and evaluation for the four setups.

``vanilla``       predictor trained on the data as given
``augment``       predictor trained with one random group element per sample
``equiadapt``     G-CNN canonicalizer + predictor, delta prior on the G-CNN
``equioptadapt``  plain-backbone canonicalizer + predictor, orbit separation
                  and delta prior on the energy distribution
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from canonkit import tensor as T
from canonkit.canon import (
    BatchCanon,
    CanonConfig,
    add_reference_parameter,
    canonicalize_batch,
    delta_prior,
    direct_canonicalize_batch,
    gumbel_select,
    mean_orbit_cosine,
    pairwise_similarity,
    st_select,
    top2_gap,
)
from canonkit.checkpoint import load_checkpoint, save_checkpoint
from canonkit.data import Dataset
from canonkit.errors import BudgetMismatchError, CheckpointFormatError, ConfigError
from canonkit.nets import NetSpec, backbone_spec, gcnn_spec, init_params, predictor_forward, predictor_spec
from canonkit.symmetry import Group, act_image, make_group
from canonkit.tensor import Adam, Parameters, Tensor

log = logging.getLogger(__name__)

SETUPS = ("vanilla", "augment", "equiadapt", "equioptadapt")
CANONICALIZED = ("equiadapt", "equioptadapt")
LOG_COLUMNS = ("epoch", "task_loss", "opt_loss", "prior_loss", "total_loss", "identity_metric", "wall_seconds")


def _strict(cls, d: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown {where} key(s): {', '.join(unknown)}")
    return cls(**d)


@dataclass
class DatasetConfig:
    source: str = "synthetic"
    data_dir: str | None = None
    num_classes: int = 4
    n_train_per_class: int = 500
    n_test_per_class: int = 125
    size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.source not in ("synthetic", "idx"):
            raise ConfigError(f"dataset source must be 'synthetic' or 'idx', got {self.source!r}")


@dataclass
class TrainConfig:
    setup: str = "equioptadapt"
    group: str = "c4"
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    lambda_task: float = 1.0
    canon: CanonConfig = field(default_factory=CanonConfig)
    predictor: dict = field(default_factory=dict)
    canonicalizer: dict = field(default_factory=dict)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)

    def __post_init__(self):
        if isinstance(self.canon, dict):
            self.canon = _strict(CanonConfig, self.canon, "canon")
        if isinstance(self.dataset, dict):
            self.dataset = _strict(DatasetConfig, self.dataset, "dataset")
        if self.setup not in SETUPS:
            raise ConfigError(f"setup must be one of {SETUPS}, got {self.setup!r}")
        make_group(self.group)
        if self.setup == "equiadapt" and self.group not in ("c4", "d4"):
            raise ConfigError("equiadapt needs a G-CNN group: c4 or d4")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lambda_task < 0:
            raise ConfigError("lambda_task must be nonnegative")
        if self.lambda_task == 0 and self.setup not in CANONICALIZED:
            raise ConfigError("lambda_task = 0 leaves nothing to train for a non-canonicalized setup")
        for name, d in (("predictor", self.predictor), ("canonicalizer", self.canonicalizer)):
            unknown = set(d) - {f.name for f in dataclasses.fields(NetSpec)}
            if unknown:
                raise ConfigError(f"unknown {name} key(s): {', '.join(sorted(unknown))}")

    @property
    def canonicalized(self) -> bool:
        return self.setup in CANONICALIZED

    def group_obj(self) -> Group:
        return make_group(self.group)

    def pred_spec(self, num_classes: int, in_channels: int = 1, image_size: int = 16) -> NetSpec:
        return predictor_spec(**{"num_classes": num_classes, "in_channels": in_channels,
                                 "image_size": image_size, **self.predictor})

    def canon_spec(self, in_channels: int = 1, image_size: int = 16) -> NetSpec | None:
        base = {"in_channels": in_channels, "image_size": image_size, **self.canonicalizer}
        if self.setup == "equioptadapt":
            return backbone_spec(**{"embed_dim": self.canon.embed_dim, **base})
        if self.setup == "equiadapt":
            return gcnn_spec(self.group, **base)
        return None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return _strict(cls, dict(d), "config")


# --------------------------------------------------------------------------
# model bundle
# --------------------------------------------------------------------------


@dataclass
class Canonicalizer:
    """Either canonicalizer behind one call signature."""

    kind: str  # "opt" or "direct"
    params: Parameters
    spec: NetSpec
    cfg: CanonConfig | None = None
    name: str = ""

    def batch(self, x: np.ndarray, group: Group) -> BatchCanon:
        if self.kind == "opt":
            return canonicalize_batch(self.params, self.spec, x, group, self.cfg)
        return direct_canonicalize_batch(self.params, self.spec, x, group)

    @property
    def param_count(self) -> int:
        return self.params.count()


@dataclass
class Model:
    cfg: TrainConfig
    pred_spec: NetSpec
    pred_params: Parameters
    canon_spec: NetSpec | None = None
    canon_params: Parameters | None = None

    @property
    def group(self) -> Group:
        return self.cfg.group_obj()

    @property
    def canonicalizer(self) -> Canonicalizer | None:
        if self.canon_spec is None:
            return None
        kind = "opt" if self.cfg.setup == "equioptadapt" else "direct"
        return Canonicalizer(kind, self.canon_params, self.canon_spec, self.cfg.canon, self.cfg.setup)

    def canonicalize(self, x: np.ndarray) -> BatchCanon | None:
        c = self.canonicalizer
        return None if c is None else c.batch(x, self.group)

    def predict(self, x: np.ndarray, batch_size: int = 250) -> tuple[np.ndarray, np.ndarray | None]:
        """Predicted labels and (for canonicalized setups) selected element indices."""
        labels, selected = [], []
        for s in range(0, len(x), batch_size):
            xb = x[s:s + batch_size]
            bc = self.canonicalize(xb)
            xin = xb if bc is None else bc.canonical
            logits = predictor_forward(self.pred_params, self.pred_spec, xin).data
            labels.append(np.argmax(logits, axis=-1))
            if bc is not None:
                selected.append(bc.selected)
        return np.concatenate(labels), (np.concatenate(selected) if selected else None)


def build_model(cfg: TrainConfig, num_classes: int, in_channels: int = 1, image_size: int = 16) -> Model:
    pred_spec = cfg.pred_spec(num_classes, in_channels, image_size)
    pred_params = init_params(pred_spec, cfg.seed)
    canon_spec = cfg.canon_spec(in_channels, image_size)
    canon_params = None
    if canon_spec is not None:
        canon_params = init_params(canon_spec, cfg.seed + 1)
        if cfg.setup == "equioptadapt":
            add_reference_parameter(canon_params, cfg.canon)
    return Model(cfg, pred_spec, pred_params, canon_spec, canon_params)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.rows]

    def deterministic_rows(self) -> list[tuple]:
        """Rows without the wall-clock column."""
        return [tuple(r[c] for c in LOG_COLUMNS if c != "wall_seconds") for r in self.rows]


def _batch_losses(model: Model, xb: np.ndarray, yb: np.ndarray, rng: np.random.Generator):
    cfg = model.cfg
    group = model.group
    zero = Tensor(0.0)
    task, opt, prior = zero, zero, zero
    if cfg.setup == "augment":
        elems = rng.integers(0, len(group), size=len(xb))
        xb = np.stack([act_image(group[e], x) for e, x in zip(elems, xb)])
    bc = model.canonicalize(xb)
    if cfg.lambda_task > 0:
        if bc is None:
            xin = Tensor(xb)
        elif cfg.canon.st_mode == "gumbel":
            xin, _ = gumbel_select(bc.probs, bc.orbits, cfg.canon.gumbel_temp, rng)
        else:
            xin = st_select(bc.probs, bc.orbits, bc.selected)
        logits = predictor_forward(model.pred_params, model.pred_spec, xin)
        task = T.cross_entropy(T.softmax(logits), yb)
    if bc is not None:
        prior = delta_prior(bc.probs)
        if cfg.setup == "equioptadapt":
            opt = pairwise_similarity(bc.embeddings)
    total = T.scale(task, cfg.lambda_task)
    total = T.add(total, T.scale(opt, cfg.canon.lambda_opt if bc is not None else 0.0))
    total = T.add(total, T.scale(prior, cfg.canon.lambda_prior if bc is not None else 0.0))
    return total, task, opt, prior


def identity_metric(model: Model, x: np.ndarray, batch_size: int = 250) -> float:
    """Fraction of inputs whose selected element is the identity (NaN without a canonicalizer)."""
    if not model.cfg.canonicalized:
        return math.nan
    sel = np.concatenate([model.canonicalize(x[s:s + batch_size]).selected for s in range(0, len(x), batch_size)])
    return float(np.count_nonzero(sel == 0) / len(sel))


def train(cfg: TrainConfig, train_ds: Dataset, val_ds: Dataset | None = None,
          model: Model | None = None) -> tuple[Model, TrainLog]:
    """Train one setup. Row 0 of the log is measured before any update."""
    _, c, h, _ = train_ds.images.shape
    if model is None:
        model = build_model(cfg, train_ds.num_classes, c, h)
    groups = []
    if cfg.lambda_task > 0:
        groups.append(model.pred_params)
    if model.canon_params is not None:
        groups.append(model.canon_params)
    opt = Adam(groups, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    shuffle_rng = np.random.default_rng(cfg.seed + 2)
    sample_rng = np.random.default_rng(cfg.seed + 3)
    monitor = val_ds if val_ds is not None else train_ds
    n = len(train_ds)
    tlog = TrainLog()
    start = time.perf_counter()

    for epoch in range(cfg.epochs + 1):
        sums = np.zeros(4)
        batches = 0
        order = np.arange(n) if epoch == 0 else shuffle_rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            total, task, o, p = _batch_losses(model, train_ds.images[idx], train_ds.labels[idx], sample_rng)
            if epoch > 0:
                opt.zero_grad()
                total.backward()
                opt.step()
            sums += [task.item(), o.item(), p.item(), total.item()]
            batches += 1
        means = sums / max(batches, 1)
        row = {
            "epoch": epoch,
            "task_loss": float(means[0]),
            "opt_loss": float(means[1]),
            "prior_loss": float(means[2]),
            "total_loss": float(means[3]),
            "identity_metric": identity_metric(model, monitor.images),
            "wall_seconds": time.perf_counter() - start,
        }
        tlog.rows.append(row)
        log.info("epoch %d total %.4f task %.4f opt %.4f prior %.4f id %.3f", epoch, row["total_loss"],
                 row["task_loss"], row["opt_loss"], row["prior_loss"], row["identity_metric"])
    return model, tlog


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


@dataclass
class Metrics:
    acc: float
    g_avg_acc: float
    identity_metric: float
    per_element_acc: list[float] = field(default_factory=list)
    canon_time_per_batch: float = math.nan
    loss_curves: dict = field(default_factory=dict)


def evaluate(model: Model, test_ds: Dataset, batch_size: int = 250) -> Metrics:
    """Accuracy on the test set and on every group-transformed copy of it."""
    group = model.group
    n = len(test_ds)
    correct = []
    ident = math.nan
    for g in group:
        xg = act_image(g, test_ds.images)
        pred, sel = model.predict(xg, batch_size)
        correct.append(int(np.count_nonzero(pred == test_ds.labels)))
        if g.is_identity and sel is not None:
            ident = float(np.count_nonzero(sel == 0) / n)
    acc = correct[0] / n
    g_avg = int(np.sum(correct)) / (n * len(group))
    return Metrics(acc, g_avg, ident, [k / n for k in correct])


def orbit_diagnostics(model: Model, x: np.ndarray, batch_size: int = 250) -> dict:
    """Mean orbit cosine similarity and mean top-2 energy gap (optimization canonicalizer)."""
    c = model.canonicalizer
    if c is None or c.kind != "opt":
        raise ConfigError("orbit diagnostics need the optimization canonicalizer")
    cos, gaps = [], []
    for s in range(0, len(x), batch_size):
        xb = x[s:s + batch_size]
        cos.append(mean_orbit_cosine(c.params, c.spec, xb, model.group, c.cfg) * len(xb))
        gaps.append(top2_gap(c.batch(xb, model.group).energies.data))
    return {"mean_cosine": float(np.sum(cos) / len(x)), "mean_top2_gap": float(np.mean(np.concatenate(gaps)))}


# --------------------------------------------------------------------------
# timing
# --------------------------------------------------------------------------


@dataclass
class BenchReport:
    names: list[str]
    param_counts: list[int]
    times: np.ndarray  # [repeats, k] seconds per batch
    median: list[float]
    iqr: list[float]
    ratio: float  # median[0] / median[1]
    end_to_end_median: list[float] = field(default_factory=list)
    identity_series: dict = field(default_factory=dict)


def check_budget(counts: Sequence[int], tolerance: float = 0.25) -> None:
    lo, hi = min(counts), max(counts)
    if hi == 0 or (hi - lo) / hi > tolerance:
        raise BudgetMismatchError(f"parameter counts {list(counts)} differ by more than {tolerance:.0%}")


def benchmark_canon(canonicalizers: Sequence[Canonicalizer], x: np.ndarray, group: Group,
                    repeats: int = 10, predictor: tuple[Parameters, NetSpec] | None = None,
                    logs: dict[str, TrainLog] | None = None) -> BenchReport:
    """Per-batch wall time of the canonicalization stage, single-threaded.

    The stage covers orbit construction, scoring and selection. With
    ``predictor`` the end-to-end time (including the prediction network) is
    also measured.
    """
    check_budget([c.param_count for c in canonicalizers])
    k = len(canonicalizers)
    times = np.zeros((repeats, k))
    e2e = np.zeros((repeats, k))
    with threadpool_limits(1):
        for c in canonicalizers:
            c.batch(x, group)  # warm-up
        for r in range(repeats):
            order = range(k) if r % 2 == 0 else reversed(range(k))
            for j in order:
                t0 = time.perf_counter()
                bc = canonicalizers[j].batch(x, group)
                t1 = time.perf_counter()
                times[r, j] = t1 - t0
                if predictor is not None:
                    predictor_forward(predictor[0], predictor[1], bc.canonical)
                    e2e[r, j] = time.perf_counter() - t0
    med = np.median(times, axis=0)
    q75, q25 = np.percentile(times, [75, 25], axis=0)
    series = {name: identity_vs_walltime(tl) for name, tl in (logs or {}).items()}
    return BenchReport(
        names=[c.name or f"canon{i}" for i, c in enumerate(canonicalizers)],
        param_counts=[c.param_count for c in canonicalizers],
        times=times,
        median=med.tolist(),
        iqr=(q75 - q25).tolist(),
        ratio=float(med[0] / med[1]) if k > 1 else 1.0,
        end_to_end_median=np.median(e2e, axis=0).tolist() if predictor is not None else [],
        identity_series=series,
    )


def identity_vs_walltime(tlog: TrainLog) -> list[tuple[float, float, float]]:
    """``(wall_seconds, wall_seconds / first-epoch seconds, identity_metric)`` per epoch."""
    rows = tlog.rows
    base = next((r["wall_seconds"] for r in rows if r["epoch"] == 1), None)
    if base is None or base <= 0:
        base = 1.0
    return [(r["wall_seconds"], r["wall_seconds"] / base, r["identity_metric"]) for r in rows]


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------


def save_model(model: Model, path) -> Path:
    tensors = {f"pred/{k}": v.data for k, v in model.pred_params.items()}
    if model.canon_params is not None:
        tensors.update({f"canon/{k}": v.data for k, v in model.canon_params.items()})
    config = {
        "train": model.cfg.to_dict(),
        "pred_spec": model.pred_spec.to_dict(),
        "canon_spec": model.canon_spec.to_dict() if model.canon_spec else None,
    }
    return save_checkpoint(tensors, config, path)


def load_model(path) -> Model:
    tensors, config = load_checkpoint(path)
    try:
        cfg = TrainConfig.from_dict(config["train"])
        pred_spec = NetSpec.from_dict(config["pred_spec"])
        canon_spec = NetSpec.from_dict(config["canon_spec"]) if config.get("canon_spec") else None
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointFormatError(f"{path}: checkpoint does not hold a model ({exc})") from exc
    pred = Parameters({k[5:]: Tensor(v) for k, v in tensors.items() if k.startswith("pred/")})
    canon = None
    if canon_spec is not None:
        canon = Parameters({k[6:]: Tensor(v) for k, v in tensors.items() if k.startswith("canon/")})
    return Model(cfg, pred_spec, pred, canon_spec, canon)
