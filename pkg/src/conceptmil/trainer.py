"""Losses, plain SGD and patient-level k-fold cross-validation."""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffkernel as dk
from . import metrics
from .aggregator import ModelConfig
from .conceptbank import ConceptBank, TokenConfig, parse_bank
from .dataio import SlideBag
from .errors import ConfigError, TrainingDivergedError
from .model import Model, tracked_tensors

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    """Every tunable of a run, flat so it maps 1:1 onto TOML keys and CLI flags."""

    learning_rate: float = 1e-4
    batch_size: int = 2
    epochs: int = 20
    mutual_weight: float = 0.1
    folds: int = 5
    seed: int = 0
    # ablations
    no_bag_guidance: bool = False
    no_adapters: bool = False
    n_data_driven: int | None = None
    # optional inner patient-level validation split with early stopping
    early_stopping_patience: int = 0
    validation_fraction: float = 0.2
    # model
    alpha: float = 0.2
    beta: float = 0.2
    tau: float = 0.07
    logit_scale: float = 10.0
    leaky_slope: float = 0.01
    adapter_hidden: int | None = None
    instance_softmax: str = "instances"
    # concept tokens / frozen encoder
    context_length: int = 16
    data_driven_length: int = 16
    token_init_std: float = 0.02
    vocab_size: int = 4096
    token_dim: int = 64
    expert_concepts_per_class: int | None = None
    normalize_embeddings: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.mutual_weight < 0:
            raise ConfigError("mutual_weight must be >= 0")
        if self.n_data_driven is not None and self.n_data_driven < 0:
            raise ConfigError("n_data_driven must be >= 0")
        if self.early_stopping_patience < 0 or not 0 < self.validation_fraction < 1:
            raise ConfigError("early_stopping_patience >= 0 and 0 < validation_fraction < 1 required")
        if self.context_length < 0 or self.data_driven_length < 1:
            raise ConfigError("context_length >= 0 and data_driven_length >= 1 required")

    def model_config(self) -> ModelConfig:
        return ModelConfig(alpha=self.alpha, beta=self.beta, tau=self.tau, logit_scale=self.logit_scale,
                           leaky_slope=self.leaky_slope, adapter_hidden=self.adapter_hidden,
                           use_adapters=not self.no_adapters, bag_guidance=not self.no_bag_guidance,
                           instance_softmax=self.instance_softmax)

    def token_config(self) -> TokenConfig:
        return TokenConfig(self.context_length, self.data_driven_length, self.token_init_std)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**values)


# -- losses -----------------------------------------------------------------

def mutual_loss(class_concepts) -> dk.Matrix:
    """Sum over classes of the cosine of every unordered concept pair within the class.

    With unit rows n_i, sum_{i<j} n_i.n_j = (sum(N N^T) - m) / 2.
    """
    total = None
    for C in class_concepts:
        C = dk.as_matrix(C)
        m = C.rows
        if m < 2:
            continue
        N = dk.l2_normalize_rows(C)
        pairs = dk.scale(dk.sub(dk.sum_all(dk.matmul(N, dk.transpose(N))), [[float(m)]]), 0.5)
        total = pairs if total is None else dk.add(total, pairs)
    return total if total is not None else dk.Matrix([[0.0]])


def total_loss(probs, label: int, mutual, weight: float) -> dk.Matrix:
    """-log p[label] + weight * mutual, with p clamped at 1e-12."""
    nll = dk.scale(dk.log(dk.take(probs, 0, label), floor=PROB_FLOOR), -1.0)
    if weight == 0:
        return nll
    return dk.add(nll, dk.scale(mutual, weight))


def sgd_step(tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    """p <- p - lr * g for every tensor with a gradient; others are passed through untouched."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise TrainingDivergedError(f"non-finite gradient for {name}: {bad} of {g.size} entries")
    return {name: (arr - lr * grads[name] if name in grads else arr) for name, arr in tensors.items()}


def batch_loss(model: Model, tensors: dict, bags: list[tuple[np.ndarray, int]], weight: float) -> dk.Matrix:
    """Mean cross-entropy over ``bags`` plus ``weight`` times the mutual loss (counted once)."""
    embeddings = model.embed(tensors)
    ce = None
    for Z, label in bags:
        out = model.forward(Z, tensors, embeddings)
        nll = total_loss(out.probs, label, None, 0.0)
        ce = nll if ce is None else dk.add(ce, nll)
    loss = dk.scale(ce, 1.0 / len(bags))
    if weight:
        loss = dk.add(loss, dk.scale(mutual_loss([e.concepts for e in embeddings]), weight))
    return loss


def loss_and_grads(model: Model, tensors: dict[str, np.ndarray], bags, weight: float):
    tape = dk.Tape()
    leaves = tracked_tensors(tape, tensors)
    loss = batch_loss(model, leaves, bags, weight)
    return loss.item(), dk.backward(tape, loss)


# -- folds ----------------------------------------------------------------

def split_folds(bags: list[SlideBag], k: int, seed: int) -> list[list[int]]:
    """Assign whole patients to k folds; returns bag indices per fold.

    Patients are shuffled within label strata (label of their first slide)
    and dealt round-robin, so fold sizes differ by at most one patient.
    """
    patients: dict[str, list[int]] = {}
    for i, b in enumerate(bags):
        patients.setdefault(b.patient_id, []).append(i)
    if len(patients) < k:
        raise ConfigError(f"{len(patients)} patients cannot fill {k} folds")
    rng = np.random.default_rng([seed, 0xF01D])
    strata: dict[int, list[str]] = {}
    for pid, idx in patients.items():
        strata.setdefault(bags[idx[0]].label, []).append(pid)
    ordered = []
    for label in sorted(strata):
        group = sorted(strata[label])
        ordered.extend(group[i] for i in rng.permutation(len(group)))
    folds: list[list[int]] = [[] for _ in range(k)]
    for pos, pid in enumerate(ordered):
        folds[pos % k].extend(patients[pid])
    return [sorted(f) for f in folds]


# -- training ---------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    wall_time: float
    val_loss: float | None = None


@dataclass
class TrainResult:
    model: Model
    history: list[EpochRecord] = field(default_factory=list)


def _emit_epoch(rec: EpochRecord, echo: Callable[[str], None] | None, writer) -> None:
    line = f"epoch {rec.epoch:3d}  loss {rec.mean_loss:.6f}  time {rec.wall_time:.2f}s"
    if rec.val_loss is not None:
        line += f"  val {rec.val_loss:.6f}"
    if echo is not None:
        echo(line)
    log.debug(line)
    if writer is not None:
        writer.writerow([rec.epoch, f"{rec.mean_loss:.8f}", f"{rec.wall_time:.4f}",
                         "" if rec.val_loss is None else f"{rec.val_loss:.8f}"])


def _mean_loss(model: Model, tensors, items, weight) -> float:
    return float(np.mean([batch_loss(model, tensors, [it], weight).item() for it in items]))


def train_fold(bags: list[SlideBag], cfg: TrainConfig, bank: ConceptBank, *, fold: int = 0,
               echo: Callable[[str], None] | None = None, csv_path=None) -> TrainResult:
    """Train one model on ``bags``; deterministic given ``cfg.seed`` and ``fold``."""
    if not bags:
        raise ConfigError("empty training set")
    rng = np.random.default_rng([cfg.seed, fold])
    from .conceptbank import FrozenEncoder

    encoder = FrozenEncoder(bank.d, cfg.vocab_size, cfg.token_dim, seed=cfg.seed)
    model = Model.initialize(bank, cfg.model_config(), cfg.token_config(), cfg.seed, encoder, rng)
    model.extra = {"fold": fold, "train": cfg.to_dict()}

    train_bags, val_bags = bags, []
    if cfg.early_stopping_patience > 0:
        parts = split_folds(bags, max(2, round(1 / cfg.validation_fraction)), cfg.seed + 1000 + fold)
        val_idx = set(parts[0])
        val_bags = [b for i, b in enumerate(bags) if i in val_idx]
        train_bags = [b for i, b in enumerate(bags) if i not in val_idx]

    items = [(b.features(cfg.normalize_embeddings), b.label) for b in train_bags]
    val_items = [(b.features(cfg.normalize_embeddings), b.label) for b in val_bags]
    tensors = dict(model.tensors)
    best = (np.inf, tensors, 0)
    history = []

    fh = open(csv_path, "w", newline="") if csv_path else None
    writer = csv.writer(fh) if fh else None
    if writer:
        writer.writerow(["epoch", "mean_loss", "wall_time", "val_loss"])
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            order = rng.permutation(len(items))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                batch = [items[i] for i in order[start:start + cfg.batch_size]]
                loss, grads = loss_and_grads(model, tensors, batch, cfg.mutual_weight)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
                tensors = sgd_step(tensors, grads, cfg.learning_rate)
                losses.append(loss)
            rec = EpochRecord(epoch, float(np.mean(losses)), time.perf_counter() - t0)
            if val_items:
                rec.val_loss = _mean_loss(model, tensors, val_items, cfg.mutual_weight)
            history.append(rec)
            _emit_epoch(rec, echo, writer)
            if val_items:
                if rec.val_loss < best[0]:
                    best = (rec.val_loss, tensors, epoch)
                elif epoch - best[2] >= cfg.early_stopping_patience:
                    break
    finally:
        if fh:
            fh.close()
    if val_items:
        tensors = best[1]
    model.tensors = tensors
    return TrainResult(model, history)


# -- cross-validation -----------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    auc: float
    acc: float
    f1: float
    n_train: int
    n_test: int
    test_slides: list[str]


@dataclass
class CVReport:
    folds: list[FoldResult]
    auc_mean: float
    auc_std: float
    acc_mean: float
    acc_std: float
    f1_mean: float
    f1_std: float

    @classmethod
    def from_folds(cls, folds: list[FoldResult]) -> "CVReport":
        auc = metrics.mean_std([f.auc for f in folds])
        acc = metrics.mean_std([f.acc for f in folds])
        f1 = metrics.mean_std([f.f1 for f in folds])
        return cls(folds, *auc, *acc, *f1)

    def to_json(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        lines = ["fold    AUC     ACC     F1   n_train n_test"]
        for f in self.folds:
            lines.append(f"{f.fold:4d}  {f.auc:.4f}  {f.acc:.4f}  {f.f1:.4f}  {f.n_train:6d} {f.n_test:6d}")
        lines.append(f"mean  {self.auc_mean:.4f}  {self.acc_mean:.4f}  {self.f1_mean:.4f}")
        lines.append(f"std   {self.auc_std:.4f}  {self.acc_std:.4f}  {self.f1_std:.4f}")
        return "\n".join(lines)


def _run_fold(fold: int, bags: list[SlideBag], test_idx: list[int], cfg: TrainConfig, bank_doc: dict,
              out_dir: str | None, verbose: bool) -> tuple[FoldResult, bytes]:
    bank = parse_bank(bank_doc)
    test_set = set(test_idx)
    train = [b for i, b in enumerate(bags) if i not in test_set]
    test = [bags[i] for i in test_idx]
    csv_path = Path(out_dir) / f"fold{fold}_log.csv" if out_dir else None
    echo = (lambda s: print(f"[fold {fold}] {s}", flush=True)) if verbose else None
    result = train_fold(train, cfg, bank, fold=fold, echo=echo, csv_path=csv_path)
    probs = result.model.predict_many(test, cfg.normalize_embeddings)
    labels = np.array([b.label for b in test])
    fr = FoldResult(fold, metrics.macro_auc(probs, labels), metrics.accuracy(probs, labels),
                    metrics.f1_macro(probs, labels), len(train), len(test), [b.slide_id for b in test])
    return fr, result.model.to_bytes()


def cross_validate(bags: list[SlideBag], cfg: TrainConfig, bank: ConceptBank, *, out_dir=None,
                   parallel: int = 1, verbose: bool = False) -> CVReport:
    """Patient-level k-fold CV; writes ``fold{i}.cpk`` and per-fold logs when ``out_dir`` is set."""
    folds = split_folds(bags, cfg.folds, cfg.seed)
    bank_doc = bank.to_json()
    out = str(out_dir) if out_dir else None
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
    args = [(i, bags, f, cfg, bank_doc, out, verbose) for i, f in enumerate(folds)]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_run_fold, *zip(*args)))
    else:
        results = [_run_fold(*a) for a in args]
    if out:
        for (fr, blob) in results:
            (Path(out) / f"fold{fr.fold}.cpk").write_bytes(blob)
    return CVReport.from_folds([fr for fr, _ in results])
