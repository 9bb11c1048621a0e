"""Loss, AdamW, the training loop and test-split evaluation."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Parameter, Tensor, no_grad
from .data import SegSample, load_dataset, read_png, write_png
from .exceptions import ConfigError, ImageIOError, NumericError, ShapeError
from .metrics import f1_at, metrics_report, miou
from .net import MixerCSeg, ModelConfig, build_model, load_model, save_model

log = logging.getLogger(__name__)

DICE_WEIGHT = 5.0
DICE_SMOOTH = 1.0
CHECKPOINT_NAME = "model.ckpt"
LOG_NAME = "train_log.jsonl"
REPORT_NAME = "report.json"


def dice_loss(logits: Tensor, mask, smooth: float = DICE_SMOOTH) -> Tensor:
    p = ops.sigmoid(logits)
    g = mask if isinstance(mask, Tensor) else Tensor(np.asarray(mask, dtype=logits.dtype))
    inter = ops.sum(p * g)
    return 1.0 - (2.0 * inter + smooth) / (ops.sum(p) + ops.sum(g) + smooth)


def mixed_loss(logits: Tensor, mask) -> Tensor:
    """``BCE + 5 * Dice`` on raw logits."""
    target = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=logits.dtype)
    if target.shape != logits.shape:
        raise ShapeError(f"loss: logits {logits.shape} vs mask {target.shape}")
    return ops.bce_with_logits(logits, target) + DICE_WEIGHT * dice_loss(logits, target)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    def __init__(self, params: Sequence[Parameter], lr: float = 5e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01) -> None:
        if lr < 0 or eps <= 0 or weight_decay < 0 or not all(0 <= b < 1 for b in betas):
            raise ConfigError(f"invalid AdamW settings lr={lr} betas={betas} eps={eps} wd={weight_decay}")
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = OptimState(m=[np.zeros_like(p.data) for p in self.params],
                                v=[np.zeros_like(p.data) for p in self.params])

    def step(self) -> None:
        b1, b2 = self.betas
        self.state.step += 1
        t = self.state.step
        c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
        for p, m, v in zip(self.params, self.state.m, self.state.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 50
    batch: int = 1
    lr: float = 5e-4
    weight_decay: float = 0.01
    dtype: str = "float32"

    def validate(self) -> "TrainConfig":
        if self.epochs < 0 or self.batch < 1:
            raise ConfigError(f"epochs must be >= 0 and batch >= 1, got {self.epochs}, {self.batch}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        unknown = sorted(set(raw) - set(cls().to_dict()))
        if unknown:
            raise ConfigError(f"unknown train config keys: {unknown}")
        return cls(**raw).validate()


def predict_proba(model: MixerCSeg, image: np.ndarray) -> np.ndarray:
    """Crack probability map ``[H, W]`` for one ``[3, H, W]`` image."""
    with no_grad():
        logits = model(image).data[0]
    return 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))


def validate_model(model: MixerCSeg, samples: Sequence[SegSample]) -> Dict[str, float]:
    if not samples:
        return {"mIoU": 0.0, "F1": 0.0}
    probs = [predict_proba(model, s.image) for s in samples]
    masks = [s.mask[0] for s in samples]
    return {"mIoU": miou(probs, masks), "F1": f1_at(probs, masks)}


@dataclass
class TrainResult:
    model: MixerCSeg
    log: List[dict]
    best_miou: float
    best_state: Dict[str, np.ndarray] = field(repr=False)


def fit(model: MixerCSeg, train: Sequence[SegSample], val: Sequence[SegSample], cfg: TrainConfig,
        seed: int = 0, on_epoch: Optional[Callable[[dict, bool, "TrainResult"], None]] = None) -> TrainResult:
    """Train ``model`` in place; it ends holding the best-validation weights.

    ``on_epoch(record, improved, result)`` runs after each epoch. A non-finite
    loss raises :class:`NumericError`; weights from the best completed epoch
    (or the initial weights) are restored first.
    """
    cfg.validate()
    if not train and cfg.epochs:
        raise ConfigError("training split is empty")
    rng = np.random.default_rng(seed)
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    result = TrainResult(model=model, log=[], best_miou=-math.inf,
                         best_state={k: v.copy() for k, v in model.state_dict().items()})
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(len(train))
        losses = []
        opt.zero_grad()
        for pos, idx in enumerate(order):
            sample = train[idx]
            loss = mixed_loss(model(sample.image), sample.mask)
            value = float(loss.data)
            if not math.isfinite(value):
                model.load_state_dict(result.best_state)
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}", step=step)
            (loss * (1.0 / cfg.batch)).backward()
            losses.append(value)
            if (pos + 1) % cfg.batch == 0 or pos + 1 == len(order):
                opt.step()
                opt.zero_grad()
            step += 1
        scores = validate_model(model, val)
        record = {
            "epoch": epoch,
            "loss": float(np.mean(losses)),
            "mIoU": scores["mIoU"],
            "F1": scores["F1"],
            "wall_ms": round(1000.0 * (time.perf_counter() - start), 3),
        }
        result.log.append(record)
        improved = scores["mIoU"] > result.best_miou
        if improved:
            result.best_miou = scores["mIoU"]
            result.best_state = {k: v.copy() for k, v in model.state_dict().items()}
        log.info("epoch %d loss %.4f val mIoU %.4f F1 %.4f", epoch, record["loss"], record["mIoU"], record["F1"])
        if on_epoch is not None:
            on_epoch(record, improved, result)
    model.load_state_dict(result.best_state)
    return result


def train(model_cfg: ModelConfig, data_dir, out_dir, train_cfg: TrainConfig = None, seed: int = 0) -> TrainResult:
    """Train on ``data_dir`` and write ``model.ckpt`` plus a JSON-lines log to ``out_dir``.

    The checkpoint is rewritten whenever validation mIoU improves, so after an
    abort it still holds the last good weights.
    """
    train_cfg = (train_cfg or TrainConfig()).validate()
    model_cfg.validate()
    data = load_dataset(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(model_cfg, seed=seed)
    model.astype(np.dtype(train_cfg.dtype))
    ckpt = out / CHECKPOINT_NAME
    meta = {"train": train_cfg.to_dict(), "seed": seed}
    save_model(ckpt, model, {**meta, "epoch": 0})
    log_path = out / LOG_NAME
    log_path.write_text("")

    def on_epoch(record, improved, result):
        with log_path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")
        if improved:
            save_model(ckpt, model, {**meta, "epoch": record["epoch"]})

    return fit(model, data["train"], data["val"], train_cfg, seed=seed, on_epoch=on_epoch)


def read_log(path) -> List[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def smoothed(values: Sequence[float], window: int = 5) -> np.ndarray:
    """Trailing moving average; early entries average what is available."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate_predictions(probs: Sequence[np.ndarray], samples: Sequence[SegSample]) -> dict:
    return metrics_report(probs, [s.mask[0] for s in samples], [s.id for s in samples])


def evaluate(checkpoint, data_dir, out_dir=None, split_name: str = "test") -> dict:
    """Metrics on one split; optionally writes ``report.json`` and prediction PNGs."""
    if not Path(checkpoint).is_file():
        raise ImageIOError(f"{checkpoint}: checkpoint not found")
    model, _ = load_model(checkpoint)
    samples = load_dataset(data_dir)[split_name]
    if not samples:
        raise ConfigError(f"{data_dir}: the {split_name} split is empty")
    probs = [predict_proba(model, s.image) for s in samples]
    report = evaluate_predictions(probs, samples)
    if out_dir is not None:
        out = Path(out_dir)
        for s, p in zip(samples, probs):
            write_png(p, out / "predictions" / f"{s.id}.png")
        write_report(report, out / REPORT_NAME)
    return report


def evaluate_prediction_dir(pred_dir, data_dir, split_name: str = "test") -> dict:
    """Recompute a report from saved prediction PNGs."""
    samples = load_dataset(data_dir)[split_name]
    probs = [read_png(Path(pred_dir) / f"{s.id}.png")[0] for s in samples]
    return evaluate_predictions(probs, samples)


def write_report(report: dict, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(report, indent=2) + "\n")
