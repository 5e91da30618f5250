"""Training loop, Adam, run records and the train-eval gap experiment."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .attention import RegularizerSpec
from .autodiff import NumericError, Tape, cross_entropy
from .masking import ConfigError
from .tasks import Dataset, classification_batch, seq2seq_batch
from .transformer import PAD, ForwardState, Streams, Transformer

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("run_id", "config_hash", "seed", "epoch", "split", "loss", "accuracy")


class DivergenceError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 32
    max_epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: Optional[int] = 20  # None disables early stopping
    eval_every: int = 1
    target_accuracy: Optional[float] = None  # stop once eval accuracy reaches this

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")


def adam_step(param, grad, m, v, t: int, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns ``(param, m, v)`` as new arrays."""
    if not np.isfinite(grad).all():
        raise DivergenceError("non-finite gradient")
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    def __init__(self, named_params, cfg: TrainConfig):
        self.params = dict(named_params)
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        c = self.cfg
        for name, p in self.params.items():
            if p.grad is None:
                continue
            try:
                p.data, self.m[name], self.v[name] = adam_step(
                    p.data, p.grad, self.m[name], self.v[name], self.t, c.lr, c.beta1, c.beta2, c.eps
                )
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} in parameter {name!r} at step {self.t}") from None


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_accuracy: float
    eval_loss: float
    eval_accuracy: float


def plain(obj):
    """Recursively turn dataclasses, sets and tuples into JSON-friendly values."""
    if hasattr(obj, "__dataclass_fields__"):
        obj = {k: getattr(obj, k) for k in obj.__dataclass_fields__}
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (set, frozenset)):
        return sorted(plain(v) for v in obj)
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, str) and hasattr(obj, "value"):
        return obj.value
    return obj


def config_hash(config: dict) -> str:
    """Stable digest of a run config, ignoring the seed and run id."""
    payload = {k: v for k, v in config.items() if k not in ("seed", "run_id", "output_dir")}
    blob = json.dumps(plain(payload), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RunRecord:
    run_id: str
    config: dict
    seed: int
    epochs: list = field(default_factory=list)
    wall_clock: float = 0.0
    status: str = "ok"
    message: str = ""

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    @property
    def final(self) -> Optional[EpochMetrics]:
        return self.epochs[-1] if self.epochs else None

    @property
    def gap(self) -> float:
        f = self.final
        return float("nan") if f is None else f.train_accuracy - f.eval_accuracy

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config": self.config,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "epochs": [asdict(e) for e in self.epochs],
            "wall_clock": self.wall_clock,
            "status": self.status,
            "message": self.message,
            "final_gap": self.gap,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunRecord":
        d = json.loads(Path(path).read_text())
        return cls(d["run_id"], d["config"], d["seed"], [EpochMetrics(**e) for e in d["epochs"]],
                   d["wall_clock"], d["status"], d["message"])

    def metrics_rows(self):
        h = self.config_hash
        for e in self.epochs:
            yield (self.run_id, h, self.seed, e.epoch, "train", repr(e.train_loss), repr(e.train_accuracy))
            yield (self.run_id, h, self.seed, e.epoch, "eval", repr(e.eval_loss), repr(e.eval_accuracy))

    def write_metrics_csv(self, path, append: bool = False) -> None:
        path = Path(path)
        new = not (append and path.exists())
        with open(path, "a" if append else "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(METRICS_COLUMNS)
            w.writerows(self.metrics_rows())


# one batch -> (loss tensor, per-example correctness)

def batch_loss(model: Transformer, examples, state: ForwardState):
    if model.is_seq2seq:
        src, tgt_in, tgt_out = seq2seq_batch(examples)
        logits = model(src, tgt_in, state=state)
        v = logits.shape[-1]
        loss = cross_entropy(logits.reshape(-1, v), tgt_out.reshape(-1), ignore_index=PAD)
        pred = logits.data.argmax(axis=-1)
        real = tgt_out != PAD
        # Under a causal decoder, all-positions-correct with teacher forcing
        # is exactly greedy-decoding exact match.
        correct = ((pred == tgt_out) | ~real).all(axis=1)
        weight = int(real.sum())
    else:
        src, labels = classification_batch(examples)
        logits = model(src, state=state)
        loss = cross_entropy(logits, labels)
        correct = logits.data.argmax(axis=-1) == labels
        weight = len(examples)
    return loss, correct, weight


def evaluate(model: Transformer, examples, batch_size: int = 256) -> tuple[float, float]:
    """Eval-mode mean loss and accuracy (sequence exact match for seq2seq)."""
    if not examples:
        return float("nan"), float("nan")
    state = ForwardState.begin(False, model.cfg.block.regularizer)
    total, weight, hits = 0.0, 0, 0
    for i in range(0, len(examples), batch_size):
        loss, correct, w = batch_loss(model, examples[i: i + batch_size], state)
        total += loss.item() * w
        weight += w
        hits += int(correct.sum())
    return total / weight, hits / len(examples)


def train(
    model: Transformer,
    dataset: Dataset,
    cfg: TrainConfig,
    regularizer: Optional[RegularizerSpec] = None,
    *,
    run_id: str = "run",
    config: Optional[dict] = None,
    streams: Optional[Streams] = None,
    pinned: Optional[dict] = None,
    on_step: Optional[Callable[[ForwardState], None]] = None,
) -> RunRecord:
    """Fit ``model`` on ``dataset.train`` and return the per-epoch record.

    Each optimisation step opens one forward state (the single per-batch
    strategy draw), runs the model in train mode, backpropagates and applies
    Adam. Metrics for both splits are measured in eval mode. A non-finite loss
    or gradient ends the run with ``status == "diverged"``.
    """
    reg = model.cfg.block.regularizer if regularizer is None else regularizer
    streams = Streams(cfg.seed) if streams is None else streams
    if config is None:
        config = plain({"model": model.cfg, "train": cfg, "regularizer": reg, "dataset": dataset.spec})
    record = RunRecord(run_id, config, cfg.seed)
    start = time.perf_counter()
    try:
        # non-finite values are detected explicitly below, so numpy's warnings are noise
        with np.errstate(over="ignore", invalid="ignore"):
            _fit(model, dataset, cfg, reg, streams, pinned, on_step, record)
    except (DivergenceError, NumericError) as exc:
        record.status = "diverged"
        record.message = str(exc)
        log.warning("%s diverged: %s", run_id, exc)
    record.wall_clock = time.perf_counter() - start
    return record


def _fit(model, dataset, cfg, reg, streams, pinned, on_step, record) -> None:
    opt = Adam(model.named_parameters(), cfg)
    examples = dataset.train
    best, stale = float("inf"), 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = streams.shuffle.permutation(len(examples))
        for i in range(0, len(order), cfg.batch_size):
            batch = [examples[j] for j in order[i: i + cfg.batch_size]]
            state = ForwardState.begin(True, reg, streams, pinned=pinned)
            with Tape():
                loss, _, _ = batch_loss(model, batch, state)
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"loss became {loss.item()} at epoch {epoch}")
            model.zero_grad()
            loss.backward()
            opt.step()
            if on_step is not None:
                on_step(state)
        if epoch % cfg.eval_every and epoch != cfg.max_epochs:
            continue
        tr_loss, tr_acc = evaluate(model, dataset.train)
        ev_loss, ev_acc = evaluate(model, dataset.eval)
        record.epochs.append(EpochMetrics(epoch, tr_loss, tr_acc, ev_loss, ev_acc))
        log.debug("%s epoch %d train %.4f/%.3f eval %.4f/%.3f",
                  record.run_id, epoch, tr_loss, tr_acc, ev_loss, ev_acc)
        if cfg.target_accuracy is not None and ev_acc >= cfg.target_accuracy:
            break
        if cfg.patience is not None and dataset.eval:
            if ev_loss < best:
                best, stale = ev_loss, 0
            else:
                stale += cfg.eval_every
                if stale >= cfg.patience:
                    break


GAP_COLUMNS = ("arm", "config_hash", "seed", "epochs", "train_accuracy", "eval_accuracy", "gap", "status")


@dataclass
class GapReport:
    rows: list
    order: list

    def mean_gap(self, arm: str) -> float:
        gaps = [r["gap"] for r in self.rows if r["arm"] == arm]
        return float(np.mean(gaps))

    def summary(self) -> list[tuple[str, float, float]]:
        out = []
        for arm in self.order:
            gaps = [r["gap"] for r in self.rows if r["arm"] == arm]
            out.append((arm, float(np.mean(gaps)), float(np.std(gaps))))
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(GAP_COLUMNS)
            for r in self.rows:
                w.writerow([r[c] if not isinstance(r[c], float) else repr(r[c]) for c in GAP_COLUMNS])


def gap_trend_experiment(dataset: Dataset, model_cfg, train_cfg: TrainConfig, arms: dict, seeds) -> GapReport:
    """Train every ``arm -> RegularizerSpec`` for every seed and collect train-eval gaps.

    The dataset is shared; the seed drives weight init and all training
    randomness, so arms with the same seed start from identical weights.
    """
    from dataclasses import replace

    rows = []
    for arm, reg in arms.items():
        for seed in seeds:
            cfg = replace(train_cfg, seed=seed)
            model = Transformer(model_cfg, seed=seed)
            rec = train(model, dataset, cfg, reg, run_id=f"{arm}-s{seed}")
            f = rec.final
            rows.append({
                "arm": arm, "config_hash": rec.config_hash, "seed": seed, "epochs": f.epoch,
                "train_accuracy": f.train_accuracy, "eval_accuracy": f.eval_accuracy,
                "gap": rec.gap, "status": rec.status,
            })
    return GapReport(rows, list(arms))
