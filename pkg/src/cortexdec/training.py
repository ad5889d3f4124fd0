"""Adam optimization, early stopping, subject-grouped CV, ablation.

Early stopping follows the validation-accuracy rule: every
``validate_every`` epochs the held-out split is scored in eval mode, the
best parameter snapshot is kept, and training stops after ``patience``
consecutive non-improving validations (strictly-greater comparison) or at
``max_epochs``. Folds are independent jobs; pooled metrics come from the
summed confusion matrices, so results do not depend on scheduling order.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, TrainingDivergenceError
from .model import EncoderConfig, SkipCnnModel, build_model
from .signal import TrialSet
from .tensor import Tensor

Grouping = Literal["subject", "trial"]


class Adam:
    """Adam with bias correction and no weight decay."""

    def __init__(self, params: Sequence[tuple[str, Tensor]], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        if lr < 0:
            raise ConfigError(f"lr must be >= 0, got {lr}")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        if epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {epsilon}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m = [np.zeros_like(t.data) for _, t in self.params]
        self.v = [np.zeros_like(t.data) for _, t in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for i, (name, p) in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.isfinite(g).all():
                raise TrainingDivergenceError(f"non-finite gradient for parameter {name!r}")
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * (g * g)
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    max_epochs: int = 2000
    validate_every: int = 10
    patience: int = 10
    val_fraction: float = 0.1
    seed: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1 or self.validate_every < 1:
            raise ConfigError("max_epochs and validate_every must be >= 1")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")


@dataclass(frozen=True)
class FoldPlan:
    k: int
    assignments: np.ndarray  # per-trial fold index
    grouping: Grouping

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignments != fold)


def make_folds(trials: TrialSet, k: int, grouping: Grouping, seed: int) -> FoldPlan:
    """Deal subjects (or trials) round-robin to k folds after a seeded shuffle."""
    if k < 2:
        raise ConfigError(f"k must be >= 2 to leave a held-out fold, got {k}")
    rng = np.random.default_rng(seed)
    if grouping == "subject":
        subjects = np.unique(trials.subject_ids)
        if subjects.size < k:
            raise ConfigError(f"{subjects.size} subjects cannot fill {k} subject-grouped folds")
        order = rng.permutation(subjects)
        fold_of = {int(s): i % k for i, s in enumerate(order)}
        assignments = np.array([fold_of[int(s)] for s in trials.subject_ids], dtype=np.int64)
    elif grouping == "trial":
        if trials.n_trials < k:
            raise ConfigError(f"{trials.n_trials} trials cannot fill {k} folds")
        order = rng.permutation(trials.n_trials)
        assignments = np.empty(trials.n_trials, dtype=np.int64)
        assignments[order] = np.arange(trials.n_trials) % k
    else:
        raise ConfigError(f"unknown grouping {grouping!r}; use 'subject' or 'trial'")
    return FoldPlan(k=k, assignments=assignments, grouping=grouping)


@dataclass
class Metrics:
    confusion: np.ndarray
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float

    @classmethod
    def from_confusion(cls, confusion: np.ndarray) -> "Metrics":
        conf = np.asarray(confusion, dtype=np.int64)
        total = conf.sum()
        diag = np.diag(conf).astype(np.float64)
        col = conf.sum(axis=0).astype(np.float64)
        row = conf.sum(axis=1).astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            precision = np.where(col > 0, diag / col, 0.0)
            recall = np.where(row > 0, diag / row, 0.0)
            pr = precision + recall
            f1 = np.where(pr > 0, 2.0 * precision * recall / np.where(pr > 0, pr, 1.0), 0.0)
        return cls(
            confusion=conf,
            accuracy=float(diag.sum() / total) if total else 0.0,
            macro_precision=float(precision.mean()),
            macro_recall=float(recall.mean()),
            macro_f1=float(f1.mean()),
        )


def evaluate(model: SkipCnnModel, trials: TrialSet, indices, batch_size: int = 256) -> Metrics:
    """Argmax predictions in eval mode, accumulated into a confusion matrix."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ConfigError("evaluate needs a non-empty index set")
    n_classes = model.config.n_classes
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    was_training = model.training
    model.eval()
    try:
        for start in range(0, idx.size, batch_size):
            chunk = idx[start:start + batch_size]
            probs = model.forward(trials.data[chunk].astype(np.float32)).data
            pred = probs.argmax(axis=1)
            np.add.at(confusion, (trials.labels[chunk], pred), 1)
    finally:
        if was_training:
            model.train()
    return Metrics.from_confusion(confusion)


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_accuracy: float | None = None
    is_best: bool | None = None


@dataclass
class TrainResult:
    model: SkipCnnModel
    history: list[HistoryRow]
    best_val_accuracy: float | None
    best_epoch: int | None
    epochs_run: int


def _one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((labels.size, n_classes), dtype=np.float32)
    out[np.arange(labels.size), labels] = 1.0
    return out


def _split_validation(pool: np.ndarray, labels: np.ndarray, fraction: float,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Held-out validation indices, stratified by class where counts allow."""
    val_parts = []
    for cls in np.unique(labels[pool]):
        members = pool[labels[pool] == cls]
        n_val = int(round(fraction * members.size))
        if n_val:
            val_parts.append(rng.permutation(members)[:n_val])
    val = np.concatenate(val_parts) if val_parts else rng.permutation(pool)[:1]
    val = np.sort(val)
    train = np.setdiff1d(pool, val)
    if train.size == 0:
        raise ConfigError("training split is empty after removing the validation fraction")
    return train, val


def _snapshot(model: SkipCnnModel) -> dict[str, np.ndarray]:
    return {name: arr.copy() for name, arr in model.state_arrays()}


def _restore(model: SkipCnnModel, snap: dict[str, np.ndarray]) -> None:
    for name, tensor in model.named_parameters():
        tensor.data = snap[name].copy()
    for name, buf in model.named_buffers():
        buf[...] = snap[name]


def train_fold(model: SkipCnnModel, trials: TrialSet, fold: int, plan: FoldPlan,
               config: TrainConfig) -> TrainResult:
    """Optimize on everything outside ``fold``; return the best snapshot.

    A seeded ``val_fraction`` of the training pool is held out; every
    ``validate_every`` epochs it is scored in eval mode and the best-so-far
    snapshot kept. Raises TrainingDivergenceError on a non-finite loss.
    """
    pool = plan.train_indices(fold)
    if pool.size == 0:
        raise ConfigError(f"fold {fold} leaves an empty training pool")
    root = np.random.SeedSequence(config.seed)
    val_seq, drop_seq = root.spawn(2)
    train_idx, val_idx = _split_validation(
        pool, trials.labels, config.val_fraction, np.random.default_rng(val_seq))
    dropout_rng = np.random.default_rng(drop_seq)

    optimizer = Adam(model.named_parameters(), lr=config.lr,
                     beta1=config.beta1, beta2=config.beta2)
    n_classes = model.config.n_classes
    data32 = trials.data.astype(np.float32, copy=False)

    history: list[HistoryRow] = []
    best_acc: float | None = None
    best_epoch: int | None = None
    best_state: dict[str, np.ndarray] | None = None
    bad_validations = 0
    epochs_run = 0

    model.train()
    for epoch in range(1, config.max_epochs + 1):
        epochs_run = epoch
        order = np.random.default_rng((config.seed, epoch)).permutation(train_idx)
        loss_sum = 0.0
        for start in range(0, order.size, config.batch_size):
            batch = order[start:start + config.batch_size]
            x = Tensor(data32[batch])
            target = Tensor(_one_hot(trials.labels[batch], n_classes))
            probs = model.forward(x, dropout_rng)
            loss = T.mse_loss(probs, target)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergenceError(f"non-finite loss at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            loss_sum += value * batch.size
        row = HistoryRow(epoch=epoch, train_loss=loss_sum / order.size)

        if epoch % config.validate_every == 0:
            acc = evaluate(model, trials, val_idx).accuracy
            improved = best_acc is None or acc > best_acc
            row.val_accuracy = acc
            row.is_best = improved
            if improved:
                best_acc, best_epoch = acc, epoch
                best_state = _snapshot(model)
                bad_validations = 0
            else:
                bad_validations += 1
            history.append(row)
            if bad_validations >= config.patience:
                break
        else:
            history.append(row)

    if best_state is not None:
        _restore(model, best_state)
    model.eval()
    return TrainResult(model=model, history=history, best_val_accuracy=best_acc,
                       best_epoch=best_epoch, epochs_run=epochs_run)


@dataclass
class FoldResult:
    fold: int
    model: SkipCnnModel
    metrics: Metrics
    history: list[HistoryRow]
    best_val_accuracy: float | None


@dataclass
class CVResult:
    plan: FoldPlan
    folds: list[FoldResult]
    pooled: Metrics


def _assert_subject_disjoint(trials: TrialSet, plan: FoldPlan, fold: int) -> None:
    train_subjects = set(trials.subject_ids[plan.train_indices(fold)].tolist())
    test_subjects = set(trials.subject_ids[plan.test_indices(fold)].tolist())
    overlap = train_subjects & test_subjects
    if overlap:
        raise AssertionError(f"subject leakage in fold {fold}: {sorted(overlap)}")


def cross_validate(trials: TrialSet, model_config: EncoderConfig, train_config: TrainConfig,
                   k: int, grouping: Grouping, jobs: int = 1) -> CVResult:
    """Train one fresh model per fold; pool metrics from summed confusions.

    Per-fold seeds are master seed + fold index, so reruns are bit-stable
    and ablation variants sharing a master seed share fold plans.
    """
    plan = make_folds(trials, k, grouping, train_config.seed)

    def run(fold: int) -> FoldResult:
        if grouping == "subject":
            _assert_subject_disjoint(trials, plan, fold)
        fold_seed = train_config.seed + fold
        model = build_model(model_config, seed=fold_seed)
        result = train_fold(model, trials, fold, plan, replace(train_config, seed=fold_seed))
        metrics = evaluate(result.model, trials, plan.test_indices(fold))
        return FoldResult(fold=fold, model=result.model, metrics=metrics,
                          history=result.history, best_val_accuracy=result.best_val_accuracy)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            folds = list(pool.map(run, range(k)))
    else:
        folds = [run(fold) for fold in range(k)]
    pooled = Metrics.from_confusion(sum(f.metrics.confusion for f in folds))
    return CVResult(plan=plan, folds=folds, pooled=pooled)


@dataclass
class AblationPair:
    seed: int
    skip_accuracy: float
    noskip_accuracy: float


@dataclass
class AblationResult:
    pairs: list[AblationPair]
    mean_difference: float


def run_ablation(trials: TrialSet, model_config: EncoderConfig, train_config: TrainConfig,
                 k: int, grouping: Grouping, seeds: Sequence[int], jobs: int = 1) -> AblationResult:
    """Paired skip vs no-skip cross-validation over shared fold plans."""
    if len(seeds) < 2:
        raise ConfigError(f"ablation needs at least 2 seeds, got {len(seeds)}")
    pairs = []
    for seed in seeds:
        cfg = replace(train_config, seed=seed)
        with_skip = cross_validate(trials, replace(model_config, skip_enabled=True),
                                   cfg, k, grouping, jobs)
        without = cross_validate(trials, replace(model_config, skip_enabled=False),
                                 cfg, k, grouping, jobs)
        if not np.array_equal(with_skip.plan.assignments, without.plan.assignments):
            raise AssertionError(f"fold plans diverged between variants for seed {seed}")
        pairs.append(AblationPair(seed=seed, skip_accuracy=with_skip.pooled.accuracy,
                                  noskip_accuracy=without.pooled.accuracy))
    mean_diff = float(np.mean([p.skip_accuracy - p.noskip_accuracy for p in pairs]))
    return AblationResult(pairs=pairs, mean_difference=mean_diff)


# ---------------------------------------------------------------------------
# CSV emission (confusion + summary, history, ablation)


def metrics_to_csv(metrics: Metrics, class_names: Sequence[str]) -> str:
    """Confusion matrix with class-name header, then the percent summary."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(class_names)
    for row in metrics.confusion:
        writer.writerow([int(v) for v in row])
    writer.writerow(["accuracy", "macro_precision", "macro_recall", "macro_f1"])
    writer.writerow([f"{100.0 * v:.2f}" for v in (
        metrics.accuracy, metrics.macro_precision, metrics.macro_recall, metrics.macro_f1)])
    return buf.getvalue()


def metrics_from_csv(text: str) -> tuple[np.ndarray, tuple[str, ...], dict[str, float]]:
    """Inverse of metrics_to_csv: (confusion, class names, percent summary)."""
    rows = list(csv.reader(io.StringIO(text)))
    rows = [r for r in rows if r]
    if len(rows) < 4:
        raise ConfigError("metrics CSV too short: expected header, matrix and summary")
    names = tuple(rows[0])
    n = len(names)
    if len(rows) != n + 3:
        raise ConfigError(f"metrics CSV should have {n + 3} rows for {n} classes, got {len(rows)}")
    try:
        confusion = np.array([[int(v) for v in row] for row in rows[1:n + 1]], dtype=np.int64)
    except ValueError as exc:
        raise ConfigError(f"bad confusion entry: {exc}") from None
    if confusion.shape != (n, n):
        raise ConfigError(f"confusion block is {confusion.shape}, expected ({n}, {n})")
    summary_keys, summary_vals = rows[n + 1], rows[n + 2]
    try:
        summary = {k: float(v) for k, v in zip(summary_keys, summary_vals)}
    except ValueError as exc:
        raise ConfigError(f"bad summary value: {exc}") from None
    return confusion, names, summary


def history_to_csv(history: Sequence[HistoryRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "train_loss", "val_accuracy", "is_best"])
    for row in history:
        writer.writerow([
            row.epoch,
            f"{row.train_loss:.8f}",
            "" if row.val_accuracy is None else f"{row.val_accuracy:.6f}",
            "" if row.is_best is None else int(row.is_best),
        ])
    return buf.getvalue()


def ablation_to_csv(result: AblationResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["seed", "variant", "pooled_accuracy_pct"])
    for pair in result.pairs:
        writer.writerow([pair.seed, "skip", f"{100.0 * pair.skip_accuracy:.2f}"])
        writer.writerow([pair.seed, "noskip", f"{100.0 * pair.noskip_accuracy:.2f}"])
    writer.writerow(["mean_paired_difference", "", f"{100.0 * result.mean_difference:.2f}"])
    return buf.getvalue()
