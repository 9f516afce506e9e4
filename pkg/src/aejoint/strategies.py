"""Training paradigms for an enhancer front-end and a downstream task model.

``baseline``         task model on clean audio only
``da``               task model on noisy mixtures
``cold_cascade``     enhancer trained alone on mixtures; task model on clean audio; stacked at test time
``cold_cascade_da``  enhancer trained alone, then frozen; task model trained on its enhanced mixtures
``mtl``              one update per batch on ``L_AE + L_CA``; the task loss back-propagates into the enhancer
``iterative``        per batch: update the task model on enhanced audio (enhancer frozen), then update
                     the enhancer with task-loss-weighted wSDR (task model frozen)
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .corpus import Clip, MixturePlanSpec, build_mixture_set
from .enhancer import MaskEstimator, UNetConfig, batch_wsdr, build_unet, enhance_tensor, model_device, pad_batch
from .errors import ConfigError, InvalidInput, TrainingDivergence
from .metrics import accuracy, corpus_wer, uar
from .signal_core import MixtureSample
from .tasks import (
    TaskKind,
    TaskModel,
    TaskModelConfig,
    build_task_model,
    encode_transcript,
    get_task,
    per_sample_loss,
    predict,
)

log = logging.getLogger(__name__)

STRATEGIES = ("baseline", "da", "cold_cascade", "cold_cascade_da", "mtl", "iterative")
USES_ENHANCER = {"cold_cascade", "cold_cascade_da", "mtl", "iterative"}
# the enhancer is seeded apart from the task model so the two never share an init stream
AE_SEED_OFFSET = 7919


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    weight_decay: float = 0.0
    # [[epoch, lr], ...]: from ``epoch`` (0-based) on, use ``lr``
    schedule: list = field(default_factory=list)

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for start, value in sorted(self.schedule):
            if epoch >= start:
                lr = value
        return lr


TASK_OPTIMIZERS = {
    "scr": OptimizerConfig(1e-2, 1e-4, [[20, 1e-3]]),
    "asr": OptimizerConfig(1e-4),
    "ser": OptimizerConfig(1e-3),
    "asc": OptimizerConfig(1e-4, 1e-4),
}


@dataclass
class StrategyConfig:
    strategy: str
    task: str = "scr"
    cat_optimizer: OptimizerConfig = None
    ae_optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(1e-4))
    batch_size: int = 16
    ae_batch_size: int = 16
    epochs: int = 10
    ae_epochs: Optional[int] = None
    # None follows the task convention; must agree with the mixture plan of the data
    snr_train_range: Optional[tuple] = None
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        self.task = get_task(self.task).name
        if self.cat_optimizer is None:
            base = TASK_OPTIMIZERS[self.task]
            self.cat_optimizer = OptimizerConfig(base.lr, base.weight_decay, list(base.schedule))
        for name in ("cat_optimizer", "ae_optimizer"):
            if isinstance(getattr(self, name), dict):
                setattr(self, name, OptimizerConfig(**getattr(self, name)))
        if self.batch_size < 1 or self.ae_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.ae_epochs is None:
            self.ae_epochs = self.epochs
        if self.snr_train_range is None:
            self.snr_train_range = MixturePlanSpec.for_task(self.task).train_snr_range
        lo, hi = self.snr_train_range
        if lo > hi:
            raise ConfigError("snr_train_range must be ordered")
        self.snr_train_range = (float(lo), float(hi))

    @property
    def uses_enhancer(self) -> bool:
        return self.strategy in USES_ENHANCER

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TaskData:
    """Training material for one task: clean clips, noise clips and the mixing plan."""

    task: TaskKind
    label_space: list
    train_clean: list
    train_noise: list
    plan: MixturePlanSpec

    def __post_init__(self):
        self.task = get_task(self.task)

    def targets(self, labels: Sequence):
        if self.task.loss == "ctc":
            return [encode_transcript(t) for t in labels]
        index = {c: i for i, c in enumerate(self.label_space)}
        try:
            return [index[l] for l in labels]
        except KeyError as exc:
            raise InvalidInput(f"label {exc.args[0]!r} not in label space") from None

    def mixtures(self, epoch: int) -> list[MixtureSample]:
        if not self.train_noise:
            raise ConfigError("this strategy needs a noise corpus")
        return list(build_mixture_set(self.train_clean, self.train_noise, self.plan, "train", epoch))


# --------------------------------------------------------------------------
# Weighting algebra
# --------------------------------------------------------------------------

def normalize_weights(ca_losses) -> np.ndarray:
    """``w_i = L_i / sum_j L_j``; uniform if every loss is zero."""
    losses = np.asarray(
        ca_losses.detach().cpu().numpy() if isinstance(ca_losses, torch.Tensor) else ca_losses,
        dtype=np.float64,
    )
    if losses.ndim != 1 or losses.size == 0:
        raise InvalidInput("need a non-empty 1-D loss vector")
    if not np.all(np.isfinite(losses)):
        raise InvalidInput("losses must be finite")
    if np.any(losses < 0):
        raise InvalidInput("losses must be nonnegative")
    total = losses.sum()
    if total == 0:
        return np.full(losses.shape, 1.0 / losses.size)
    return losses / total


def weighted_ae_loss(per_sample_ae: torch.Tensor, weights) -> torch.Tensor:
    """``(1/N) * sum_i w_i * L_i`` with the weights held constant."""
    w = torch.as_tensor(np.asarray(weights, dtype=np.float64) if not isinstance(weights, torch.Tensor)
                        else weights.detach())
    if isinstance(per_sample_ae, torch.Tensor):
        w = w.to(per_sample_ae.device)
    per = per_sample_ae if isinstance(per_sample_ae, torch.Tensor) else torch.as_tensor(
        np.asarray(per_sample_ae, dtype=np.float64))
    if per.dim() != 1 or w.shape != per.shape:
        raise InvalidInput(f"length mismatch: {tuple(per.shape)} losses vs {tuple(w.shape)} weights")
    return (w.to(per.dtype) * per).sum() / per.shape[0]


def mtl_loss(ae_loss, ca_loss):
    return ae_loss + ca_loss


def weight_entropy(w: np.ndarray) -> float:
    w = np.asarray(w, dtype=np.float64)
    nz = w[w > 0]
    return float(-(nz * np.log(nz)).sum())


# --------------------------------------------------------------------------
# Per-batch machinery
# --------------------------------------------------------------------------

def _check_finite(value: torch.Tensor, what: str):
    if not torch.isfinite(value).all():
        raise TrainingDivergence(f"non-finite {what}")


def _stack(signals, device=None):
    return pad_batch(signals, torch.float32, device)


@dataclass
class Batch:
    clean: torch.Tensor
    noisy: torch.Tensor
    lengths: torch.Tensor
    targets: list

    @classmethod
    def from_mixtures(cls, samples: Sequence[MixtureSample], data: TaskData, device=None) -> "Batch":
        clean, lengths = _stack([s.clean.samples for s in samples], device)
        noisy, _ = _stack([s.mixture.samples for s in samples], device)
        return cls(clean, noisy, lengths, data.targets([s.label for s in samples]))

    @classmethod
    def from_clips(cls, clips: Sequence[Clip], data: TaskData, device=None) -> "Batch":
        clean, lengths = _stack([c.wave.samples for c in clips], device)
        return cls(clean, clean, lengths, data.targets([c.label for c in clips]))


def cat_losses(cat: TaskModel, wave: torch.Tensor, lengths: torch.Tensor, targets,
               differentiable: bool = True):
    logits, out_lengths = cat(wave, lengths)
    return per_sample_loss(cat, logits, targets, out_lengths, differentiable), logits, out_lengths


def _set_lr(opt: torch.optim.Optimizer, lr: float):
    for g in opt.param_groups:
        g["lr"] = lr


def make_optimizer(model: nn.Module, cfg: OptimizerConfig) -> torch.optim.Optimizer:
    # Adam with classic L2 regularisation through weight_decay
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def cat_step(cat: TaskModel, opt, wave, lengths, targets) -> tuple[float, list]:
    cat.train()
    losses, logits, out_lengths = cat_losses(cat, wave, lengths, targets)
    loss = losses.mean()
    _check_finite(loss, "task loss")
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    return loss.item(), predict(cat, logits.detach(), out_lengths)


def ae_step(ae: MaskEstimator, opt, batch: Batch) -> float:
    ae.train()
    est = enhance_tensor(ae, batch.noisy)
    loss = batch_wsdr(batch.clean, est, batch.noisy, batch.lengths).mean()
    _check_finite(loss, "enhancer loss")
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    return loss.item()


@dataclass
class StepContext:
    ae_opt: torch.optim.Optimizer
    cat_opt: torch.optim.Optimizer
    data: TaskData
    uniform_weights: bool = False  # ablation hook: skip the task-loss weighting


@dataclass
class StepReport:
    ca_loss: float
    ae_loss: float
    weights: list
    weight_losses: list
    ae_losses: list
    predictions: list = field(default_factory=list)


def iterative_step(ae: MaskEstimator, cat: TaskModel, batch, ctx: StepContext) -> StepReport:
    """One alternation on one batch: task model first (enhancer frozen), then enhancer (task model frozen)."""
    if not isinstance(batch, Batch):
        if not batch:
            raise InvalidInput("empty batch")
        batch = Batch.from_mixtures(batch, ctx.data, model_device(cat))

    # Phase 1: adapt the task model to the current enhancer output
    ae.eval()
    with torch.no_grad():
        enhanced = enhance_tensor(ae, batch.noisy)
    ca_loss, preds = cat_step(cat, ctx.cat_opt, enhanced, batch.lengths, batch.targets)

    # Phase 2: sample weights from the frozen task model, weighted wSDR update of the enhancer
    ae.train()
    cat.eval()
    est = enhance_tensor(ae, batch.noisy)
    with torch.no_grad():
        w_losses, _, _ = cat_losses(cat, est.detach(), batch.lengths, batch.targets, differentiable=False)
    w = normalize_weights(w_losses) if not ctx.uniform_weights else np.full(len(batch.targets), 1.0 / len(batch.targets))
    per_ae = batch_wsdr(batch.clean, est, batch.noisy, batch.lengths)
    loss = weighted_ae_loss(per_ae, w)
    _check_finite(loss, "weighted enhancer loss")
    ctx.ae_opt.zero_grad(set_to_none=True)
    loss.backward()
    ctx.ae_opt.step()
    return StepReport(ca_loss, loss.item(), w.tolist(), w_losses.tolist(),
                      per_ae.detach().tolist(), preds)


def mtl_step(ae: MaskEstimator, cat: TaskModel, batch: Batch, ae_opt, cat_opt) -> tuple[float, float, list]:
    ae.train()
    cat.train()
    est = enhance_tensor(ae, batch.noisy)
    l_ae = batch_wsdr(batch.clean, est, batch.noisy, batch.lengths).mean()
    losses, logits, out_lengths = cat_losses(cat, est, batch.lengths, batch.targets)
    l_ca = losses.mean()
    total = mtl_loss(l_ae, l_ca)
    _check_finite(total, "multi-task loss")
    ae_opt.zero_grad(set_to_none=True)
    cat_opt.zero_grad(set_to_none=True)
    total.backward()
    ae_opt.step()
    cat_opt.step()
    return l_ae.item(), l_ca.item(), predict(cat, logits.detach(), out_lengths)


# --------------------------------------------------------------------------
# run_strategy
# --------------------------------------------------------------------------

@dataclass
class StrategyResult:
    strategy: str
    cat: TaskModel
    ae: Optional[MaskEstimator]
    log: list


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _train_metric(task: TaskKind, preds: list, targets: list) -> Optional[float]:
    if task.loss == "ctc" or not preds:
        return None
    return accuracy(preds, targets)


class _Logger:
    def __init__(self, strategy: str, sink: Optional[Callable[[dict], None]]):
        self.strategy = strategy
        self.records: list[dict] = []
        self.sink = sink

    def emit(self, **rec):
        rec = {"strategy": self.strategy, **rec}
        self.records.append(rec)
        if self.sink is not None:
            self.sink(rec)


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def train_enhancer(ae: MaskEstimator, data: TaskData, cfg: StrategyConfig, logger: _Logger,
                   phase: str = "ae_pretrain") -> None:
    opt = make_optimizer(ae, cfg.ae_optimizer)
    for epoch in range(cfg.ae_epochs):
        _set_lr(opt, cfg.ae_optimizer.lr_at(epoch))
        mixtures = data.mixtures(epoch)
        rng = np.random.default_rng([cfg.seed, 1, epoch])
        losses = []
        for b, idx in enumerate(_batches(len(mixtures), cfg.ae_batch_size, rng)):
            batch = Batch.from_mixtures([mixtures[i] for i in idx], data, model_device(ae))
            loss = ae_step(ae, opt, batch)
            losses.append(loss)
            logger.emit(record="batch", phase=phase, epoch=epoch, batch=b, ae_loss=loss,
                        ca_loss=None, mean_weight_entropy=None)
        logger.emit(record="epoch", phase=phase, epoch=epoch, ae_loss=_mean(losses), ca_loss=None,
                    mean_weight_entropy=None, train_metric=None)
        log.info("%s %s epoch %d: ae_loss %.4f", logger.strategy, phase, epoch, _mean(losses))


def run_strategy(cfg: StrategyConfig, data: TaskData, ae_config: Optional[UNetConfig] = None,
                 cat_config: Optional[TaskModelConfig] = None, models: Optional[dict] = None,
                 log_sink: Optional[Callable[[dict], None]] = None) -> StrategyResult:
    """Train one paradigm end to end. Pure function of (cfg, data, model configs)."""
    if data.task.name != cfg.task:
        raise ConfigError(f"strategy configured for {cfg.task}, data is {data.task.name}")
    if not data.train_clean:
        raise ConfigError("training needs clean clips")
    if tuple(data.plan.train_snr_range) != tuple(cfg.snr_train_range):
        raise ConfigError(f"strategy SNR range {cfg.snr_train_range} disagrees with the mixture plan "
                          f"{data.plan.train_snr_range}")
    if cfg.strategy != "baseline" and not data.train_noise:
        raise ConfigError(f"strategy {cfg.strategy} needs a noise corpus")
    models = dict(models or {})
    cat = models.get("cat") or build_task_model(data.task, data.label_space, cat_config, seed=cfg.seed)
    ae = models.get("ae")
    if ae is None and cfg.uses_enhancer:
        ae = build_unet(ae_config, seed=cfg.seed + AE_SEED_OFFSET)
    torch.manual_seed(cfg.seed)
    logger = _Logger(cfg.strategy, log_sink)
    s = cfg.strategy
    dev = model_device(cat)

    if s in ("cold_cascade", "cold_cascade_da"):
        train_enhancer(ae, data, cfg, logger)
        ae.eval()
        for p in ae.parameters():
            p.requires_grad_(False)

    cat_opt = make_optimizer(cat, cfg.cat_optimizer)
    ae_opt = make_optimizer(ae, cfg.ae_optimizer) if s in ("mtl", "iterative") else None
    ctx = StepContext(ae_opt, cat_opt, data) if s == "iterative" else None
    batch_size = cfg.ae_batch_size if s in ("mtl", "iterative") else cfg.batch_size

    for epoch in range(cfg.epochs):
        _set_lr(cat_opt, cfg.cat_optimizer.lr_at(epoch))
        if ae_opt is not None:
            _set_lr(ae_opt, cfg.ae_optimizer.lr_at(epoch))
        rng = np.random.default_rng([cfg.seed, 2, epoch])
        if s in ("baseline", "cold_cascade"):
            pool = data.train_clean
        else:
            pool = data.mixtures(epoch)
        ca_hist, ae_hist, ent_hist, preds_all, targets_all = [], [], [], [], []
        for b, idx in enumerate(_batches(len(pool), batch_size, rng)):
            items = [pool[i] for i in idx]
            ae_loss = entropy = None
            if s in ("baseline", "cold_cascade"):
                batch = Batch.from_clips(items, data, dev)
                ca_loss, preds = cat_step(cat, cat_opt, batch.clean, batch.lengths, batch.targets)
            elif s == "da":
                batch = Batch.from_mixtures(items, data, dev)
                ca_loss, preds = cat_step(cat, cat_opt, batch.noisy, batch.lengths, batch.targets)
            elif s == "cold_cascade_da":
                batch = Batch.from_mixtures(items, data, dev)
                with torch.no_grad():
                    enhanced = enhance_tensor(ae, batch.noisy)
                ca_loss, preds = cat_step(cat, cat_opt, enhanced, batch.lengths, batch.targets)
            elif s == "mtl":
                batch = Batch.from_mixtures(items, data, dev)
                ae_loss, ca_loss, preds = mtl_step(ae, cat, batch, ae_opt, cat_opt)
            else:
                batch = Batch.from_mixtures(items, data, dev)
                rep = iterative_step(ae, cat, batch, ctx)
                ae_loss, ca_loss, preds = rep.ae_loss, rep.ca_loss, rep.predictions
                entropy = weight_entropy(np.asarray(rep.weights))
            ca_hist.append(ca_loss)
            ae_hist.append(ae_loss)
            ent_hist.append(entropy)
            preds_all += preds
            targets_all += batch.targets
            logger.emit(record="batch", phase="train", epoch=epoch, batch=b, ae_loss=ae_loss,
                        ca_loss=ca_loss, mean_weight_entropy=entropy)
        metric = _train_metric(data.task, preds_all, targets_all)
        logger.emit(record="epoch", phase="train", epoch=epoch, ae_loss=_mean(ae_hist),
                    ca_loss=_mean(ca_hist), mean_weight_entropy=_mean(ent_hist), train_metric=metric)
        log.info("%s epoch %d: ca_loss %.4f ae_loss %s train_metric %s", s, epoch,
                 _mean(ca_hist), _mean(ae_hist), metric)

    cat.eval()
    if ae is not None:
        ae.eval()
    return StrategyResult(s, cat, ae, logger.records)


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------

def score(task: TaskKind, predictions: list, labels: list, label_space: Sequence) -> float:
    """Task metric as a fraction: accuracy, UAR, or corpus WER."""
    if task.metric == "wer":
        return corpus_wer(labels, predictions)
    index = {c: i for i, c in enumerate(label_space)}
    y = [index[l] for l in labels]
    if task.metric == "uar":
        return uar(predictions, y)
    return accuracy(predictions, y)


@torch.no_grad()
def predict_waves(cat: TaskModel, waves: Sequence[np.ndarray], ae: Optional[nn.Module] = None,
                  batch_size: int = 16) -> list:
    cat.eval()
    if ae is not None:
        ae.eval()
    out = []
    for i in range(0, len(waves), batch_size):
        wave, lengths = pad_batch(waves[i:i + batch_size], device=model_device(cat))
        if ae is not None:
            wave = enhance_tensor(ae, wave)
        logits, out_lengths = cat(wave, lengths)
        out += predict(cat, logits, out_lengths)
    return out


def evaluate(cat: TaskModel, items: Sequence, task, label_space: Sequence,
             ae: Optional[nn.Module] = None, batch_size: int = 16) -> float:
    """Metric on clips (clean) or mixtures (noisy input), optionally through the enhancer."""
    task = get_task(task)
    if not items:
        raise InvalidInput("nothing to evaluate")
    if isinstance(items[0], MixtureSample):
        waves = [s.mixture.samples for s in items]
    else:
        waves = [c.wave.samples for c in items]
    labels = [x.label for x in items]
    preds = predict_waves(cat, waves, ae, batch_size)
    return score(task, preds, labels, label_space)
