"""Patch-based training and validation at batch size 1."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import CaseRecord, PatchSample, augment, sample_patch, zscore_normalize
from .errors import ConfigError, NonFiniteError
from .losses import LossConfig, ce_loss, combine, dice_loss, one_hot
from .metrics import ConfusionMatrix, accumulate, per_class
from .model import DALightModel
from .optim import OptimState, adamw_step, cosine_lr
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "step", "lr", "train_loss", "val_mean_dice")


@dataclass
class TrainConfig:
    epochs: int = 2
    steps_per_case: int = 25
    patch: int = 16
    lr: float = 5e-5
    lr_min: float = 0.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    tumor_bias: float = 0.8
    augment: bool = True
    val_every: int = 2
    val_patches_per_case: int = 4
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self) -> None:
        problems = []
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.steps_per_case < 1:
            problems.append("steps_per_case must be >= 1")
        if self.patch < 8 or self.patch % 8:
            problems.append("patch must be a positive multiple of 8")
        if self.lr <= 0 or self.lr_min < 0 or self.lr_min > self.lr:
            problems.append("need 0 <= lr_min <= lr and lr > 0")
        if not 0 <= self.tumor_bias <= 1:
            problems.append("tumor_bias must lie in [0, 1]")
        if self.val_every < 1:
            problems.append("val_every must be >= 1")
        if self.val_patches_per_case < 1:
            problems.append("val_patches_per_case must be >= 1")
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError([f"unknown training field {k!r}" for k in sorted(unknown)])
        if isinstance(d.get("loss"), dict):
            loss = dict(d["loss"])
            if "tumor_classes" in loss:
                loss["tumor_classes"] = tuple(loss["tumor_classes"])
            d["loss"] = LossConfig(**loss)
        return cls(**d)


@dataclass
class TrainResult:
    rows: list[dict] = field(default_factory=list)
    epochs: list[tuple[int, float, float | None]] = field(default_factory=list)
    best_val: float | None = None
    best_state: dict[str, np.ndarray] | None = None
    state: OptimState | None = None
    epochs_done: int = 0

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({k: _fmt(row[k]) for k in HISTORY_FIELDS})
        return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, epoch])


def validation_patches(cases: list[CaseRecord], cfg: TrainConfig) -> list[PatchSample]:
    rng = np.random.default_rng([cfg.seed, 2])
    out = []
    for case in cases:
        norm = zscore_normalize(case.image)
        out += [sample_patch(case, cfg.patch, rng, cfg.tumor_bias, norm) for _ in range(cfg.val_patches_per_case)]
    return out


def predict(model: DALightModel, sample: PatchSample) -> np.ndarray:
    return model(Tensor(sample.image[None]), sample.bucket).data


def evaluate_patches(model: DALightModel, patches: list[PatchSample]) -> ConfusionMatrix:
    cm = ConfusionMatrix.empty(model.cfg.num_classes)
    for sample in patches:
        probs = predict(model, sample)
        cm = accumulate(cm, np.argmax(probs, axis=1)[0], sample.labels)
    return cm


def mean_tumor_dice(model: DALightModel, patches: list[PatchSample]) -> float | None:
    return per_class(evaluate_patches(model, patches)).macro["dice_f1"]


def train_step(model: DALightModel, sample: PatchSample, state: OptimState, lr: float,
               loss_cfg: LossConfig) -> float:
    x = Tensor(sample.image[None])
    y = Tensor(one_hot(sample.labels[None], model.cfg.num_classes))
    params = model.parameters()
    for p in params:
        p.grad = None
    try:
        with Tape() as tape:
            probs = model(x, sample.bucket)
            loss = combine(dice_loss(probs, y, loss_cfg), ce_loss(probs, y), loss_cfg)
    except NonFiniteError as exc:
        raise NonFiniteError(f"step {state.step + 1}: {exc}") from exc
    value = loss.item()
    if not math.isfinite(value):
        raise NonFiniteError(f"non-finite loss at step {state.step + 1}")
    backward(loss, tape, params)
    adamw_step(params, [p.grad for p in params], state, lr)
    return value


def new_state(model: DALightModel, cfg: TrainConfig) -> OptimState:
    return OptimState.for_params(model.parameters(), lr_max=cfg.lr, lr_min=cfg.lr_min, t_max=max(cfg.epochs, 1),
                                 beta1=cfg.beta1, beta2=cfg.beta2, weight_decay=cfg.weight_decay,
                                 eps=cfg.adam_eps)


def train(model: DALightModel, train_cases: list[CaseRecord], val_cases: list[CaseRecord], cfg: TrainConfig,
          resume: TrainResult | None = None, stop_after: int | None = None, on_epoch=None) -> TrainResult:
    """Run ``cfg.epochs`` epochs (or stop after ``stop_after`` epochs, for splicing).

    Each epoch draws ``steps_per_case * len(train_cases)`` patches from an rng
    seeded by ``(seed, epoch)``, so a run resumed from ``resume`` replays the
    exact remaining schedule. Validation runs after every ``val_every``-th
    epoch and the best mean tumor Dice weights are kept.
    """
    cfg.validate()
    if not train_cases or not val_cases:
        raise ConfigError("need at least one training and one validation case")
    result = resume or TrainResult(state=new_state(model, cfg))
    if result.state is None:
        result.state = new_state(model, cfg)
    state = result.state
    val = validation_patches(val_cases, cfg)
    norms = [zscore_normalize(c.image) for c in train_cases]
    last = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    for epoch in range(result.epochs_done, last):
        lr = cosine_lr(epoch, max(cfg.epochs, 1), cfg.lr, cfg.lr_min)
        rng = epoch_rng(cfg.seed, epoch)
        order = rng.permutation(np.repeat(np.arange(len(train_cases)), cfg.steps_per_case))
        losses = []
        for i in order:
            sample = sample_patch(train_cases[i], cfg.patch, rng, cfg.tumor_bias, norms[i])
            if cfg.augment:
                sample = augment(sample, rng)
            loss = train_step(model, sample, state, lr, cfg.loss)
            losses.append(loss)
            result.rows.append({"epoch": epoch + 1, "step": state.step, "lr": lr, "train_loss": loss,
                                "val_mean_dice": None})
        val_dice = None
        if (epoch + 1) % cfg.val_every == 0:
            val_dice = mean_tumor_dice(model, val)
            result.rows[-1]["val_mean_dice"] = val_dice
            score = -1.0 if val_dice is None else val_dice
            if result.best_val is None or score > result.best_val:
                result.best_val = score
                result.best_state = model.state_dict()
        mean_loss = float(np.mean(losses))
        result.epochs.append((epoch + 1, mean_loss, val_dice))
        result.epochs_done = epoch + 1
        log.info("epoch %d loss %.4f val_dice %s", epoch + 1, mean_loss, val_dice)
        if on_epoch is not None:
            on_epoch(result)
    return result


def save_training(path, model: DALightModel, result: TrainResult, cfg: TrainConfig) -> None:
    """Checkpoint everything needed to continue ``result`` bit-identically."""
    from .checkpoint import save_checkpoint

    extra = {
        "train": cfg.to_dict(),
        "epochs_done": result.epochs_done,
        "best_val": result.best_val,
        "rows": result.rows,
        "epochs": [list(e) for e in result.epochs],
    }
    save_checkpoint(path, model, result.state, extra, result.best_state)


def resume_training(path, seed: int = 0) -> tuple[DALightModel, TrainResult, TrainConfig]:
    from .checkpoint import load_checkpoint

    model, state, extra = load_checkpoint(path, seed)
    if "train" not in extra:
        raise ConfigError(f"{path} holds no training progress")
    result = TrainResult(
        rows=[dict(r) for r in extra["rows"]],
        epochs=[tuple(e) for e in extra["epochs"]],
        best_val=extra["best_val"],
        best_state=extra.get("best_state"),
        state=state,
        epochs_done=extra["epochs_done"],
    )
    return model, result, TrainConfig.from_dict(extra["train"])
