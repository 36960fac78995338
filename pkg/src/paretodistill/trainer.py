"""Temperature-softened KL distillation of a student against stored teacher logits."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dataset import Batch, Dataset
from .env import ACTIVATION_MATRIX, HEAD_NAMES
from .nn import functional as F
from .nn.optim import AdamState, adam_step

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("step", "train_loss", "val_kl", "button_agree", "move_agree", "ox_agree",
                   "oz_agree", "target_agree", "overall_agree")


@dataclass
class TrainConfig:
    seed: int = 56
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch: int = 512
    t_max: int = 1_000_000
    tau: float = 4.0
    eval_every: int = 10_000
    eval_samples: int = 0  # 0 = whole validation file
    preset: str = "paper"

    @classmethod
    def from_preset(cls, name: str = "paper", **overrides) -> "TrainConfig":
        if name == "paper":
            base = cls()
        elif name == "desk":
            base = cls(t_max=5000, eval_every=500, preset="desk")
        else:
            raise ValueError(f"unknown preset {name!r} (expected paper or desk)")
        return replace(base, **overrides)

    def __post_init__(self):
        if self.batch < 1 or self.t_max < 0 or self.tau <= 0 or self.eval_every < 1:
            raise ValueError(f"invalid training config: {self}")


@dataclass
class EvalReport:
    kl: dict[str, float]
    agreement: dict[str, float]
    overall_agreement: float
    n_records: int

    @property
    def mean_kl(self) -> float:
        return float(np.mean(list(self.kl.values())))


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def initial(self) -> dict:
        return self.history[0]

    @property
    def final(self) -> dict:
        return self.history[-1]


def head_masks(batch: Batch) -> list[np.ndarray]:
    return batch.masks.heads()


def distillation_loss(student_logits, teacher_logits, masks, tau: float):
    """Mean over the five heads of the batch-mean KL(teacher || student).

    Both distributions use the same mask and temperature. Returns the loss and
    the gradient with respect to every student logit array.
    """
    n_heads = len(student_logits)
    loss = 0.0
    grads = []
    for zs, zt, m in zip(student_logits, teacher_logits, masks):
        ps = F.masked_temperature_softmax(zs, m, tau)
        pt = F.masked_temperature_softmax(zt.astype(zs.dtype, copy=False), m, tau)
        kl = F.kl_divergence(pt, ps)
        count = kl.size
        loss += float(np.mean(kl))
        grads.append(((ps - pt) / (tau * count * n_heads)).astype(zs.dtype, copy=False))
    return loss / n_heads, grads


def masked_argmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, logits, -np.inf).argmax(axis=-1)


def compare_logits(student_logits, batch: Batch, tau: float = 1.0) -> EvalReport:
    """Agreement and KL of student logits against the batch's teacher logits."""
    masks = head_masks(batch)
    kl, agree, match = {}, {}, {}
    for name, zs, zt, m in zip(HEAD_NAMES, student_logits, batch.logits, masks):
        pt = F.masked_temperature_softmax(zt.astype(np.float64), m, tau)
        ps = F.masked_temperature_softmax(zs.astype(np.float64), m, tau)
        kl[name] = float(np.mean(F.kl_divergence(pt, ps)))
        match[name] = masked_argmax(zs, m) == masked_argmax(zt, m)
        agree[name] = float(np.mean(match[name]))
    teacher_button = masked_argmax(batch.logits[0], masks[0])
    row = batch.masks.target_row(teacher_button)
    match["target"] = masked_argmax(student_logits[4], row) == masked_argmax(batch.logits[4], row)
    active = ACTIVATION_MATRIX[teacher_button]  # (..., 5)
    ok = match["button"].copy()
    for h, name in enumerate(HEAD_NAMES[1:], start=1):
        ok &= ~active[..., h] | match[name]
    return EvalReport(kl, agree, float(np.mean(ok)), int(ok.size))


def predict(net, dataset: Dataset, samples: np.ndarray, chunk: int = 1024) -> tuple[list, Batch]:
    outs, batches = [], []
    for start in range(0, len(samples), chunk):
        batch = dataset.batch(samples[start:start + chunk])
        outs.append(net.forward(batch.frames))
        batches.append(batch)
    if hasattr(net, "release"):
        net.release()
    logits = [np.concatenate([o[h] for o in outs]) for h in range(len(HEAD_NAMES))]
    return logits, _merge(batches)


def _merge(batches: list[Batch]) -> Batch:
    if len(batches) == 1:
        return batches[0]
    from .env import Frames, MaskSet

    frames = Frames.concat([b.frames for b in batches])
    masks = MaskSet(**{k: np.concatenate([getattr(b.masks, k) for b in batches])
                       for k in ("button", "move", "offset_x", "offset_z", "target")})
    logits = [np.concatenate([b.logits[h] for b in batches]) for h in range(len(HEAD_NAMES))]
    return Batch(frames, masks, logits, np.concatenate([b.value for b in batches]))


def evaluate_student(net, dataset: Dataset, tau_eval: float = 1.0, max_samples: int = 0) -> EvalReport:
    if dataset.n_samples == 0:
        raise ValueError("validation set is empty")
    n = dataset.n_samples if not max_samples else min(max_samples, dataset.n_samples)
    logits, batch = predict(net, dataset, np.arange(n))
    return compare_logits(logits, batch, tau_eval)


def chance_button_agreement(batch: Batch) -> float:
    """Expected button agreement of a uniformly random legal choice."""
    return float(np.mean(1.0 / batch.masks.button.sum(axis=-1)))


def _history_row(step: int, train_loss: float, report: EvalReport) -> dict:
    row = {"step": step, "train_loss": train_loss, "val_kl": report.mean_kl}
    short = ("button", "move", "ox", "oz", "target")
    for s, name in zip(short, HEAD_NAMES):
        row[f"{s}_agree"] = report.agreement[name]
    row["overall_agree"] = report.overall_agreement
    return row


def _check_schema(net, dataset: Dataset):
    if list(net.schema.extents()) != list(dataset.schema.extents()):
        raise ValueError(
            f"schema mismatch: net {net.schema.extents()} vs dataset {dataset.schema.extents()}"
        )


def train_student(net, train: Dataset, val: Dataset, config: TrainConfig,
                  history_path=None) -> TrainResult:
    """Adam on the distillation loss with uniform with-replacement batches."""
    _check_schema(net, train)
    _check_schema(net, val)
    rng = np.random.default_rng(config.seed)
    params = net.params()
    state = AdamState.for_params(params, lr=config.lr, beta1=config.beta1,
                                 beta2=config.beta2, eps=config.eps)
    result = TrainResult()
    started = time.perf_counter()

    def record(step, train_loss):
        report = evaluate_student(net, val, 1.0, config.eval_samples)
        row = _history_row(step, train_loss, report)
        if not np.isfinite(row["val_kl"]):
            raise F.NonFiniteError(f"validation KL is not finite at step {step}")
        result.history.append(row)
        log.info("step %d loss %.5f val_kl %.5f overall %.4f", step, train_loss,
                 row["val_kl"], row["overall_agree"])

    record(0, float("nan"))
    loss = float("nan")
    for step in range(1, config.t_max + 1):
        batch = train.batch(rng.integers(0, train.n_samples, size=config.batch))
        net.zero_grad()
        out = net.forward(batch.frames)
        loss, dlogits = distillation_loss(out, batch.logits, head_masks(batch), config.tau)
        if not np.isfinite(loss):
            raise F.NonFiniteError(f"non-finite training loss at step {step}")
        net.backward(dlogits)
        adam_step(params, net.grads(), state)
        if step % config.eval_every == 0 or step == config.t_max:
            record(step, loss)
    if hasattr(net, "release"):
        net.release()
    result.seconds = time.perf_counter() - started
    if history_path is not None:
        write_history(history_path, result.history)
    return result


def write_history(path, history: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def config_items(config: TrainConfig) -> dict:
    return asdict(config)
