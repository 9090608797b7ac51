"""SGD training with a warmup / constant / poly schedule, and evaluation."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .losses import IoUAccumulator, IoUResult, LossConfig, hybrid_loss
from .nn import ToyNet, forward_segmentation

log = logging.getLogger(__name__)

_NORM_SUFFIXES = (".gamma", ".beta", ".mean_logits", ".var_logits")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    # 1000 / 7000 / 17000 scaled by 0.08
    warmup_iters: int = 80
    constant_iters: int = 560
    poly_iters: int = 1360
    poly_power: float = 0.9
    batch_size: int = 4
    decay_norm: bool = True

    def __post_init__(self):
        if min(self.warmup_iters, self.constant_iters, self.poly_iters) < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.poly_power <= 0:
            raise ValueError("poly_power must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @property
    def total_iters(self) -> int:
        return self.warmup_iters + self.constant_iters + self.poly_iters


def lr_at(cfg: OptimConfig, iteration: int) -> float:
    """Linear warmup to ``base_lr``, a constant phase, then poly decay."""
    if not 0 <= iteration < cfg.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.total_iters})")
    if iteration < cfg.warmup_iters:
        return cfg.base_lr * (iteration + 1) / cfg.warmup_iters
    iteration -= cfg.warmup_iters
    if iteration < cfg.constant_iters:
        return cfg.base_lr
    t = iteration - cfg.constant_iters
    return cfg.base_lr * (1.0 - t / cfg.poly_iters) ** cfg.poly_power


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             velocity: dict[str, np.ndarray], lr: float, cfg: OptimConfig
             ) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Momentum SGD with L2 weight decay folded into the gradient, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r}")
    for name, g in grads.items():
        p = params[name]
        decay = cfg.weight_decay
        if not cfg.decay_norm and name.endswith(_NORM_SUFFIXES):
            decay = 0.0
        if decay:
            g = g + decay * p
        v = velocity.get(name)
        v = g.copy() if v is None else cfg.momentum * v + g
        velocity[name] = v
        params[name] = p - lr * v
    return params, velocity


@dataclass
class RunLog:
    steps: list[tuple[int, float, float]] = field(default_factory=list)
    evals: list[tuple[int, np.ndarray, float]] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([s[2] for s in self.steps])

    def steps_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "lr", "loss"])
        for it, lr, loss in self.steps:
            w.writerow([it, format(lr, ".17g"), format(loss, ".17g")])
        return buf.getvalue()

    def evals_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "class", "iou"])
        for it, per_class, _ in self.evals:
            for c, v in enumerate(per_class):
                w.writerow([it, c, format(float(v), ".17g")])
        return buf.getvalue()

    @staticmethod
    def read_steps_csv(text: str) -> list[tuple[int, float, float]]:
        rows = csv.DictReader(io.StringIO(text))
        return [(int(r["iter"]), float(r["lr"]), float(r["loss"])) for r in rows]


def batch_order(n: int, iterations: int, batch_size: int, seed: int) -> list[np.ndarray]:
    """Index batches from a fresh seeded permutation per epoch."""
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0x5EED], dtype=np.uint64)))
    batches, pos, perm = [], n, None
    for _ in range(iterations):
        if pos + batch_size > n:
            perm = rng.permutation(n)
            pos = 0
        take = min(batch_size, n)
        batches.append(perm[pos : pos + take])
        pos += take
    return batches


def train(net: ToyNet, images: np.ndarray, masks: np.ndarray, loss_cfg: LossConfig = LossConfig(),
          optim_cfg: OptimConfig = OptimConfig(), seed: int = 0, val: tuple[np.ndarray, np.ndarray] | None = None,
          eval_every: int = 0) -> tuple[ToyNet, RunLog]:
    """Train ``net`` in place on (images, masks); returns the net and its log."""
    images = np.asarray(images, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    if len(images) != len(masks):
        raise ValueError("images and masks differ in length")
    runlog = RunLog()
    velocity: dict[str, np.ndarray] = {}
    order = batch_order(len(images), optim_cfg.total_iters, optim_cfg.batch_size, seed)
    for it, idx in enumerate(order):
        lr = lr_at(optim_cfg, it)
        tape = ad.Tape()
        bound = net.bind(tape)
        # overflow is caught below as a non-finite loss or gradient, so silence numpy's warnings
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            logits, _ = forward_segmentation(net, images[idx], "train", bound=bound)
            loss = hybrid_loss(logits, masks[idx], loss_cfg)
            value = float(loss.value)
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at iteration {it}", it)
            grads = tape.backward(loss)
        named = {name: grads[v.node] for name, v in bound.items() if v.node in grads}
        try:
            sgd_step(net.params, named, velocity, lr, optim_cfg)
        except TrainingDiverged as exc:
            raise TrainingDiverged(f"{exc} at iteration {it}", it) from None
        runlog.steps.append((it, lr, value))
        if val is not None and eval_every and (it + 1) % eval_every == 0:
            res = evaluate(net, *val)
            runlog.evals.append((it, res.per_class, res.miou))
            log.info("iter %d loss %.4f mIoU %.4f", it, value, res.miou)
    return net, runlog


def predict_logits(net: ToyNet, images, batch_size: int = 16) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    out = []
    for start in range(0, len(images), batch_size):
        logits, _ = forward_segmentation(net, images[start : start + batch_size], "eval")
        out.append(logits.value)
    return np.concatenate(out)


def evaluate(net: ToyNet, images, masks, batch_size: int = 16) -> IoUResult:
    """Dataset-level IoU with the prediction rule logit > 0."""
    acc = IoUAccumulator(net.num_classes)
    for start in range(0, len(images), batch_size):
        logits = predict_logits(net, images[start : start + batch_size], batch_size)
        acc.update(logits > 0, np.asarray(masks[start : start + batch_size]) > 0.5)
    return acc.result()


@dataclass
class CrossModalityResult:
    train_modality: str
    miou: dict[str, float]
    per_class: dict[str, np.ndarray]

    @property
    def same(self) -> float:
        return self.miou[self.train_modality]

    @property
    def cross(self) -> float:
        other = "B" if self.train_modality == "A" else "A"
        return self.miou[other]

    @property
    def decay(self) -> float:
        return self.same - self.cross


def cross_modality_eval(net: ToyNet, images_a, images_b, masks, train_modality: str = "A"
                        ) -> CrossModalityResult:
    """mIoU on both renderings of the same scenes; decay = same-modality minus cross."""
    train_modality = train_modality.upper()
    if train_modality not in ("A", "B"):
        raise ValueError("train_modality must be 'A' or 'B'")
    ra = evaluate(net, images_a, masks)
    rb = evaluate(net, images_b, masks)
    return CrossModalityResult(train_modality, {"A": ra.miou, "B": rb.miou},
                               {"A": ra.per_class, "B": rb.per_class})
