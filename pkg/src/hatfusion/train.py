"""Training recipe (label-smoothed cross-entropy, AdamW, cosine annealing,
global-norm clipping), macro metrics and the evaluation protocols."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Sample
from .model import HatModel, Mode, ModeMismatchError
from .nn import Context
from .seeding import derive_rng
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps_adam: float = 1e-8
    clip_norm: float = 1.0
    label_smoothing: float = 0.1
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    mode: str = "both"
    schedule_total_steps: int = 0  # 0: epochs * ceil(n_train / batch_size)
    eval_batch_size: int = 128

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.clip_norm <= 0.0:
            raise ValueError("clip_norm must be > 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr0 < 0.0:
            raise ValueError("lr0 must be >= 0")
        Mode(self.mode)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# loss, schedule, optimiser
# ---------------------------------------------------------------------------

def smoothed_cross_entropy(logits: Tensor, labels, epsilon: float = 0.0) -> Tensor:
    """Mean over the batch of -sum_v q_v log softmax(o)_v, q = eps/V + (1-eps)[v = y].

    Labels are 0-based class ids.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    B, V = logits.shape
    if labels.shape[0] != B:
        raise ValueError(f"{labels.shape[0]} labels for a batch of {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= V):
        raise ValueError(f"labels must lie in [0, {V}), got range [{labels.min()}, {labels.max()}]")
    q = np.full((B, V), epsilon / V)
    q[np.arange(B), labels] += 1.0 - epsilon
    return T.sum_(T.log_softmax(logits, axis=-1) * q) * (-1.0 / B)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """lr0 * (1 + cos(pi * step / total)) / 2, and 0 past the end."""
    if total_steps <= 0 or step >= total_steps:
        return 0.0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def global_grad_norm(params: Sequence[Tensor]) -> float:
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))


def clip_gradients(params: Sequence[Tensor], clip_norm: float) -> float:
    """Scale all gradients by clip_norm / norm when the global norm exceeds clip_norm.

    Returns the norm before clipping.
    """
    if clip_norm <= 0.0:
        raise ValueError("clip_norm must be > 0")
    norm = global_grad_norm(params)
    if norm > clip_norm:
        scale = clip_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


class AdamW:
    """Adam with decoupled weight decay.

    Parameters whose ``grad`` is None are skipped entirely (no decay either),
    so branches that did not take part in the forward pass stay untouched.
    """

    def __init__(self, params: Sequence[Tensor], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.steps = [0] * len(self.params)

    def step(self, lr: float) -> None:
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.steps[i] += 1
            t = self.steps[i]
            adamw_step(p.data, p.grad, self.m[i], self.v[i], t, lr, b1, b2, self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adamw_step(theta: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01) -> None:
    """One in-place AdamW update of ``theta`` at step ``t`` (1-based)."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    theta -= lr * weight_decay * theta
    theta -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class Metrics:
    accuracy: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: list[list[int]]

    def to_dict(self) -> dict:
        return asdict(self)

    def summary(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
        }


def compute_metrics(predictions, labels, n_classes: int) -> Metrics:
    """Accuracy and per-class/macro precision, recall, F1, all in percent.

    Undefined ratios (zero denominator) count as 0.
    """
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    true = np.asarray(labels, dtype=np.int64).reshape(-1)
    if pred.size == 0:
        raise ValueError("cannot compute metrics on empty input")
    if pred.shape != true.shape:
        raise ValueError("predictions and labels differ in length")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (true, pred), 1)
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp

    def ratio(num, den):
        return np.divide(num, den, out=np.zeros_like(num), where=den > 0)

    p = ratio(tp, tp + fp)
    r = ratio(tp, tp + fn)
    f1 = ratio(2 * tp, 2 * tp + fp + fn)
    return Metrics(
        accuracy=100.0 * tp.sum() / pred.size,
        precision=(100.0 * p).tolist(),
        recall=(100.0 * r).tolist(),
        f1=(100.0 * f1).tolist(),
        macro_precision=100.0 * float(p.mean()),
        macro_recall=100.0 * float(r.mean()),
        macro_f1=100.0 * float(f1.mean()),
        confusion=conf.tolist(),
    )


# ---------------------------------------------------------------------------
# batching and evaluation
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    labels: np.ndarray
    images: np.ndarray | None
    strokes: np.ndarray | None
    mask: np.ndarray | None


def collate(samples: Sequence[Sample], mode: Mode) -> Batch:
    """Stack a batch; strokes are padded with pen-up zero points and masked."""
    labels = np.array([s.label for s in samples], dtype=np.int64)
    images = strokes = mask = None
    if mode.uses_image:
        if any(s.image is None for s in samples):
            raise ModeMismatchError(f"mode {mode.value} needs images but some samples have none")
        images = np.stack([s.image for s in samples])
    if mode.uses_strokes:
        if any(s.strokes is None for s in samples):
            raise ModeMismatchError(f"mode {mode.value} needs strokes but some samples have none")
        t_max = max(len(s.strokes) for s in samples)
        strokes = np.zeros((len(samples), t_max, 3))
        mask = np.zeros((len(samples), t_max), dtype=bool)
        for i, s in enumerate(samples):
            strokes[i, : len(s.strokes)] = s.strokes
            mask[i, : len(s.strokes)] = True
    return Batch(labels, images, strokes, mask)


def check_modalities(samples: Sequence[Sample], mode: Mode | str) -> None:
    mode = Mode(mode)
    if mode.uses_image and any(s.image is None for s in samples):
        raise ModeMismatchError(f"mode {mode.value} needs images, but the dataset lacks them")
    if mode.uses_strokes and any(s.strokes is None for s in samples):
        raise ModeMismatchError(f"mode {mode.value} needs strokes, but the dataset lacks them")


def predict(model: HatModel, samples: Sequence[Sample], mode: Mode | str, batch_size: int = 128) -> np.ndarray:
    """Eval-mode argmax predictions, processed in fixed order."""
    mode = Mode(mode)
    out = []
    for start in range(0, len(samples), batch_size):
        b = collate(samples[start:start + batch_size], mode)
        logits = model.forward_batch(mode, b.images, b.strokes, b.mask)
        out.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(out)


def evaluate(model: HatModel, samples: Sequence[Sample], mode: Mode | str, batch_size: int = 128) -> Metrics:
    check_modalities(samples, mode)
    preds = predict(model, samples, mode, batch_size)
    return compute_metrics(preds, [s.label for s in samples], model.config.vocab_size)


def evaluate_modality_dropout(model: HatModel, samples: Sequence[Sample], batch_size: int = 128) -> list[dict]:
    """Evaluate one dual-trained model with both inputs, image only and strokes only.

    Returns three rows in fixed order with accuracy deltas against the
    full-input row.
    """
    rows = []
    base = None
    for label, mode in (("dual->dual", Mode.BOTH), ("dual->image", Mode.IMAGE), ("dual->stroke", Mode.STROKE)):
        m = evaluate(model, samples, mode, batch_size)
        if base is None:
            base = m.accuracy
        rows.append({"condition": label, "mode": mode.value, "delta": m.accuracy - base, **m.summary()})
    return rows


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: HatModel
    report: list[dict]
    best_state: dict[str, np.ndarray]
    best_epoch: int
    final_state: dict[str, np.ndarray] = field(default_factory=dict)


def train(model: HatModel, train_set: Sequence[Sample], val_set: Sequence[Sample] | None,
          config: TrainConfig, on_epoch=None) -> TrainResult:
    """Train ``model`` in place following the configured recipe.

    Each step: forward in ``config.mode`` -> smoothed CE -> backward ->
    global-norm clip -> AdamW at the cosine learning rate. After every
    epoch the validation set (if any) is scored and the best-accuracy
    state retained.
    """
    if not train_set:
        raise ValueError("training set is empty")
    mode = Mode(config.mode)
    check_modalities(train_set, mode)
    if val_set:
        check_modalities(val_set, mode)

    params = model.trainable_parameters()
    opt = AdamW(params, config.beta1, config.beta2, config.eps_adam, config.weight_decay)
    steps_per_epoch = math.ceil(len(train_set) / config.batch_size)
    total = config.schedule_total_steps or config.epochs * steps_per_epoch
    order_rng = derive_rng(config.seed, "data-order")
    dropout_rng = derive_rng(config.seed, "dropout")

    report: list[dict] = []
    best_acc, best_epoch, best_state = -1.0, 0, model.state_copy()
    step = 0
    lr = cosine_lr(0, total, config.lr0)
    for epoch in range(1, config.epochs + 1):
        perm = order_rng.permutation(len(train_set))
        loss_sum = 0.0
        for start in range(0, len(perm), config.batch_size):
            batch = collate([train_set[i] for i in perm[start:start + config.batch_size]], mode)
            ctx = Context(training=True, rng=dropout_rng)
            logits = model.forward_batch(mode, batch.images, batch.strokes, batch.mask, ctx)
            loss = smoothed_cross_entropy(logits, batch.labels, config.label_smoothing)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at step {step} (epoch {epoch})")
            opt.zero_grad()
            loss.backward()
            clip_gradients(params, config.clip_norm)
            lr = cosine_lr(step, total, config.lr0)
            opt.step(lr)
            loss_sum += value * len(batch.labels)
            step += 1
        row = {"epoch": epoch, "train_loss": loss_sum / len(train_set)}
        if val_set:
            m = evaluate(model, val_set, mode, config.eval_batch_size)
            row.update(val_acc=m.accuracy, val_macro_p=m.macro_precision,
                       val_macro_r=m.macro_recall, val_macro_f1=m.macro_f1)
            if m.accuracy > best_acc:
                best_acc, best_epoch, best_state = m.accuracy, epoch, model.state_copy()
        else:
            best_epoch, best_state = epoch, model.state_copy()
        row["lr"] = lr
        report.append(row)
        log.info("epoch %d %s", epoch, json.dumps(row))
        if on_epoch is not None:
            on_epoch(row)
    opt.zero_grad()
    return TrainResult(model, report, best_state, best_epoch, model.state_copy())


def convergence_epoch(report: Sequence[dict], tolerance: float = 0.5) -> int | None:
    """First epoch whose validation accuracy is within ``tolerance`` points of the best."""
    accs = [r["val_acc"] for r in report if "val_acc" in r]
    if not accs:
        return None
    best = max(accs)
    for r in report:
        if "val_acc" in r and r["val_acc"] >= best - tolerance:
            return r["epoch"]
    return None
