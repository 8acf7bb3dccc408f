"""Staged training: question generation only, span extraction only, then joint.

Each stage runs shuffled mini-batch Adam with linear warmup and global-norm
gradient clipping, validates after every epoch, keeps the parameters with
the lowest validation loss and stops early after ``patience`` epochs
without improvement.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import RESERVED, UNK, Example, Vocabulary, iterate_batches
from .inference import best_span
from .metrics import span_scores
from .model import OneStopModel
from .numcore import OptimizerState, adam_step, clip_grad_norm, load_checkpoint, no_grad, save_checkpoint
from .transformer import ModelConfig

log = logging.getLogger(__name__)

STAGE_ORDER = ("qg", "span", "joint")


class ConfigError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, stage: str, epoch: int, batch_index: int, ids):
        self.stage, self.epoch, self.batch_index, self.ids = stage, epoch, batch_index, list(ids)
        super().__init__(f"non-finite loss in stage {stage!r}, epoch {epoch}, batch {batch_index} (examples {self.ids})")


@dataclass
class TrainConfig:
    lam: float = 0.2
    batch_size: int = 16
    epochs: int = 4
    base_lr: float = 1e-4
    warmup_ratio: float = 0.05
    dropout: float = 0.1
    seed: int = 0
    stages: tuple = STAGE_ORDER
    patience: int = 2
    clip_norm: float = 1.0
    max_steps: int | None = None          # per-stage cap on optimizer steps
    stage_epochs: dict = field(default_factory=dict)  # per-stage epoch overrides
    max_answer_len: int = 30
    init: str = "random"                  # or "denoise"
    denoise_epochs: int = 1
    checkpoint_dir: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        self.stages = tuple(self.stages)
        validate_stages(self.stages)
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.init not in ("random", "denoise"):
            raise ConfigError(f"unknown init {self.init!r}")

    def stage_lambda(self, stage: str) -> float:
        return {"qg": 1.0, "span": 0.0, "joint": self.lam}[stage]

    def epochs_for(self, stage: str) -> int:
        return int(self.stage_epochs.get(stage, self.epochs))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = list(self.stages)
        return d


def validate_stages(stages) -> None:
    if not stages:
        raise ConfigError("at least one stage is required")
    unknown = [s for s in stages if s not in STAGE_ORDER]
    if unknown:
        raise ConfigError(f"unknown stages {unknown}; choose from {list(STAGE_ORDER)}")
    idx = [STAGE_ORDER.index(s) for s in stages]
    if idx != sorted(set(idx)):
        raise ConfigError(f"stages must follow the order {list(STAGE_ORDER)} without repeats, got {list(stages)}")


@dataclass
class TrainReport:
    stage: str
    lam: float
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    best_epoch: int | None = None
    best_val: float = math.inf


def evaluate_loss(model: OneStopModel, examples, lam: float, max_answer_len: int = 30, batch_size: int = 64) -> dict:
    """Teacher-forced validation: mean phi_total plus span EM / token F1 of the constrained argmax."""
    was = model.training
    model.eval()
    total, n = 0.0, 0
    pred, gold = [], []
    try:
        with no_grad():
            for _, batch in iterate_batches(examples, model.vocab, batch_size):
                lb, spans, _ = model.forward_train(batch, lam)
                total += lb.phi_total * len(batch)
                n += len(batch)
                lengths = batch.doc_mask.sum(axis=1)
                for i in range(len(batch)):
                    pred.append(best_span(spans.p_start[i], spans.p_end[i], max_answer_len, int(lengths[i])))
                    gold.append((int(batch.starts[i]), int(batch.ends[i])))
    finally:
        model.train(was)
    em, f1 = span_scores(pred, gold)
    return {"phi_total": total / max(n, 1), "span_em": em, "span_f1": f1}


def _write_log(fh, record: dict) -> None:
    if fh is not None:
        fh.write(json.dumps(record) + "\n")
        fh.flush()


def run_stage(model: OneStopModel, corpus, stage_lambda: float, config: TrainConfig, valid=None,
              stage: str = "joint", log_file=None) -> TrainReport:
    """Train ``model`` in place with loss weight ``stage_lambda``; returns the stage report."""
    if not corpus:
        raise ConfigError("training corpus is empty")
    valid = corpus if valid is None else valid
    epochs = config.epochs_for(stage)
    per_epoch = math.ceil(len(corpus) / config.batch_size)
    total_steps = epochs * per_epoch
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)
    opt = OptimizerState(config.base_lr, config.warmup_ratio, max(total_steps, 1))
    rng = np.random.default_rng([config.seed, STAGE_ORDER.index(stage) if stage in STAGE_ORDER else 9])
    params = model.parameters()
    model.rt.rate = config.dropout
    report = TrainReport(stage, stage_lambda)
    best_state = model.state_dict()
    stale = 0
    step = 0

    for epoch in range(1, epochs + 1):
        model.train()
        for bi, batch in iterate_batches(corpus, model.vocab, config.batch_size, rng):
            if step >= total_steps:
                break
            model.zero_grad()
            lb, _, _ = model.forward_train(batch, stage_lambda)
            if not math.isfinite(lb.phi_total):
                raise NonFiniteLossError(stage, epoch, bi, batch.ids)
            lb.objective.backward()
            clip_grad_norm(params, config.clip_norm)
            lr = adam_step(params, opt)
            step += 1
            rec = {"stage": stage, **lb.to_json(step), "lr": lr}
            report.steps.append(rec)
            _write_log(log_file, rec)
        model.eval()
        metrics = evaluate_loss(model, valid, stage_lambda, config.max_answer_len)
        metrics["epoch"] = epoch
        metrics["steps"] = step
        report.epochs.append(metrics)
        log.info("stage %s epoch %d: %s", stage, epoch, metrics)
        if config.checkpoint_dir:
            path = Path(config.checkpoint_dir) / f"{stage}-epoch{epoch}.npz"
            save_model(model, path, optimizer=opt, extra={"stage": stage, "epoch": epoch, "train_config": config.to_dict()})
            report.checkpoints.append(str(path))
        if metrics["phi_total"] < report.best_val:
            report.best_val = metrics["phi_total"]
            report.best_epoch = epoch
            best_state = model.state_dict()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
        if step >= total_steps:
            break

    model.load_state_dict(best_state)
    model.eval()
    return report


def denoising_examples(examples, rng: np.random.Generator, max_target: int, mask_rate: float = 0.15) -> list[Example]:
    """Masked-document -> document reconstruction pairs for optional pretraining."""
    out = []
    for ex in examples:
        target = ex.document[:max_target]
        noisy = [(RESERVED[UNK] if rng.random() < mask_rate else t) for t in ex.document]
        out.append(Example(noisy, target, 0, 0, id=f"{ex.id}:denoise"))
    return out


def build_model(train, model_cfg: ModelConfig | None = None, seed: int = 0, vocab: Vocabulary | None = None,
                min_freq: int = 1) -> OneStopModel:
    if vocab is None:
        vocab = Vocabulary.build([ex.document + ex.question for ex in train], min_freq=min_freq)
    if model_cfg is None:
        model_cfg = ModelConfig.toy(len(vocab))
    elif model_cfg.vocab_size != len(vocab):
        model_cfg = ModelConfig(**{**model_cfg.to_dict(), "vocab_size": len(vocab)})
    return OneStopModel(model_cfg, seed=seed, vocab=vocab)


def run_schedule(corpus, config: TrainConfig, valid=None, model: OneStopModel | None = None,
                 model_cfg: ModelConfig | None = None):
    """Random (or denoising-pretrained) init, then the configured stages in order.

    Returns ``(model, {stage: TrainReport})``; each stage starts from the best
    parameters of the previous one.
    """
    validate_stages(config.stages)
    if model is None:
        model = build_model(corpus, model_cfg, seed=config.seed)
    reports = {}
    log_file = open(config.log_path, "a", encoding="utf-8") if config.log_path else None
    try:
        if config.init == "denoise":
            rng = np.random.default_rng(config.seed)
            pre = denoising_examples(corpus, rng, model.cfg.max_question_len - 1)
            pre_cfg = TrainConfig(**{**config.to_dict(), "stage_epochs": {"qg": config.denoise_epochs},
                                     "checkpoint_dir": None})
            reports["denoise"] = run_stage(model, pre, 1.0, pre_cfg, stage="qg", log_file=log_file)
        for stage in config.stages:
            reports[stage] = run_stage(model, corpus, config.stage_lambda(stage), config, valid,
                                       stage=stage, log_file=log_file)
    finally:
        if log_file is not None:
            log_file.close()
    return model, reports


def save_model(model: OneStopModel, path, optimizer=None, extra: dict | None = None):
    meta = {"model_config": model.cfg.to_dict(), "vocab": model.vocab.tokens() if model.vocab else None}
    meta.update(extra or {})
    return save_checkpoint(path, model.state_dict(), meta, optimizer)


def load_model(path) -> OneStopModel:
    params, meta, _ = load_checkpoint(path)
    cfg = ModelConfig(**meta["model_config"])
    vocab = Vocabulary(meta["vocab"]) if meta.get("vocab") is not None else None
    model = OneStopModel(cfg, seed=0, vocab=vocab)
    model.load_state_dict(params)
    return model.eval()
