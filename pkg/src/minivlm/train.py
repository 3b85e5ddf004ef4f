"""Two-stage training: projector alignment, then projector + decoder fine-tuning.

The vision encoder is frozen in both stages.  Frozen parameters are excluded
from the optimizer and have ``requires_grad`` off, so they are never written.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .model import Example, VisionLanguageModel, prepare
from .sequence import build
from .tensor import Tensor

log = logging.getLogger(__name__)

STAGE_GROUPS = {1: ("projector",), 2: ("projector", "language_model")}
LOSS_COLUMNS = ("step", "stage", "loss", "lr", "tokens_per_sec")


@dataclass(frozen=True)
class StageConfig:
    stage: int
    trainable_groups: Tuple[str, ...]
    learning_rate: float
    batch_size: int
    epochs: int = 1
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.stage not in STAGE_GROUPS:
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        groups = tuple(sorted(self.trainable_groups))
        if "vision_encoder" in groups:
            raise ValueError("the vision encoder is never trainable")
        if groups != tuple(sorted(STAGE_GROUPS[self.stage])):
            raise ValueError(f"stage {self.stage} trains exactly {STAGE_GROUPS[self.stage]}, got {groups}")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate < 0:
            raise ValueError("batch_size must be positive; epochs and learning_rate non-negative")

    def with_(self, **changes) -> "StageConfig":
        return replace(self, **changes)


def default_stage_configs() -> Tuple[StageConfig, StageConfig]:
    """Stage 1: lr 1e-3, batch 64.  Stage 2: lr 4e-5, batch 32.  Both one epoch,
    AdamW betas (0.9, 0.999), eps 1e-8, no weight decay."""
    s1 = StageConfig(1, STAGE_GROUPS[1], learning_rate=1e-3, batch_size=64, epochs=1)
    s2 = StageConfig(2, STAGE_GROUPS[2], learning_rate=4e-5, batch_size=32, epochs=1)
    return s1, s2


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    decoupled = True

    def __init__(self, params: Sequence[Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and self.decoupled:
                p.data = p.data - self.lr * self.weight_decay * p.data
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class Adam(AdamW):
    """Adam with L2 regularisation folded into the gradient."""

    decoupled = False


def make_optimizer(model: VisionLanguageModel, stage: StageConfig) -> AdamW:
    model.set_trainable(stage.trainable_groups)
    params = [p for name in stage.trainable_groups for p in model.groups()[name].parameters()]
    return AdamW(params, lr=stage.learning_rate, betas=stage.betas, eps=stage.eps, weight_decay=stage.weight_decay)


def train_step(batch: Sequence[Example], model: VisionLanguageModel, stage: StageConfig, opt: AdamW, features: Optional[Tensor] = None) -> float:
    """One forward/backward/update on ``batch``; returns the loss before the update."""
    if not batch:
        raise ValueError("empty batch")
    model.set_trainable(stage.trainable_groups)
    opt.zero_grad()
    loss = model.loss(batch, features)
    loss.backward()
    opt.lr = stage.learning_rate
    opt.step()
    return float(loss.data)


@dataclass(frozen=True)
class PretrainConfig:
    """Text-only warm start of the decoder, standing in for a pre-trained LM."""

    learning_rate: float = 3e-3
    batch_size: int = 16
    epochs: int = 10
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


def text_only_ids(sample, vocab) -> np.ndarray:
    """The sample's token sequence with the image placeholder dropped."""
    enc = build(sample, vocab)
    return np.delete(enc.ids, enc.image_slot)


def pretrain_language_model(model: VisionLanguageModel, samples, vocab, pcfg: PretrainConfig, rng: np.random.Generator) -> List[float]:
    """Plain next-token training of the decoder alone on conversation text."""
    seqs = [text_only_ids(s, vocab) for s in samples]
    if not seqs or pcfg.epochs == 0:
        return []
    model.set_trainable(("language_model",))
    opt = AdamW(model.lm.parameters(), lr=pcfg.learning_rate, betas=pcfg.betas, eps=pcfg.eps)
    losses = []
    for _ in range(pcfg.epochs):
        order = rng.permutation(len(seqs))
        for lo in range(0, len(order), pcfg.batch_size):
            batch = [seqs[i] for i in order[lo : lo + pcfg.batch_size]]
            width = max(len(s) for s in batch) - 1
            inputs = np.zeros((len(batch), width), np.int64)
            targets = np.zeros((len(batch), width), np.int64)
            mask = np.zeros((len(batch), width), bool)
            for b, s in enumerate(batch):
                inputs[b, : len(s) - 1] = s[:-1]
                targets[b, : len(s) - 1] = s[1:]
                mask[b, : len(s) - 1] = True
            opt.zero_grad()
            loss = T.cross_entropy_masked(model.lm(model.lm.embed_tokens(inputs)), targets, mask)
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
    log.info("decoder warm start: %d steps, final loss %.4f", len(losses), losses[-1])
    return losses


@dataclass
class StageResult:
    losses: List[float] = field(default_factory=list)
    rows: List[dict] = field(default_factory=list)


def run_stage(
    model: VisionLanguageModel,
    examples: Sequence[Example],
    stage: StageConfig,
    rng: np.random.Generator,
    step_offset: int = 0,
) -> StageResult:
    result = StageResult()
    if not examples or stage.epochs == 0:
        return result
    opt = make_optimizer(model, stage)
    # encoder is frozen, so its features are fixed for the whole stage
    features = model.encode_images(np.stack([ex.pixels for ex in examples])).data
    step = step_offset
    for _ in range(stage.epochs):
        order = rng.permutation(len(examples))
        for lo in range(0, len(order), stage.batch_size):
            idx = order[lo : lo + stage.batch_size]
            batch = [examples[i] for i in idx]
            t0 = time.perf_counter()
            loss = train_step(batch, model, stage, opt, Tensor(features[idx]))
            dt = time.perf_counter() - t0
            step += 1
            tokens = sum(ex.num_targets for ex in batch)
            result.losses.append(loss)
            result.rows.append(
                {"step": step, "stage": stage.stage, "loss": loss, "lr": stage.learning_rate, "tokens_per_sec": tokens / dt if dt > 0 else 0.0}
            )
    log.info("stage %d: %d steps, final loss %.4f", stage.stage, len(result.losses), result.losses[-1])
    return result


def write_loss_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


@dataclass
class TwoStageResult:
    model: VisionLanguageModel
    losses: Dict[int, List[float]]
    checkpoints: Dict[int, Path]
    loss_csv: Optional[Path] = None


def run_two_stage(
    corpus,
    cfg: ModelConfig,
    stages: Optional[Tuple[StageConfig, StageConfig]] = None,
    out_dir=None,
    seed: int = 0,
    run: Sequence[int] = (1, 2),
    init=None,
    lm_pretrain: Optional[PretrainConfig] = None,
) -> TwoStageResult:
    """Stage 1 on the alignment split, stage 2 on the instruction split.

    ``run`` selects which stages execute; ``(2,)`` gives the ablation where
    the projector is never aligned first.  ``init`` is an optional checkpoint
    directory to start from.  ``lm_pretrain`` first warms up the decoder on
    the image-free ``text`` split, so that stage 1 aligns against a decoder
    that already models the language.
    """
    s1, s2 = stages or default_stage_configs()
    if not corpus["alignment"] and not corpus["instruction"]:
        raise ValueError("corpus has no training samples")
    model = VisionLanguageModel.load(init) if init is not None else VisionLanguageModel(cfg, seed=seed)
    cfg = model.config
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    losses: Dict[int, List[float]] = {}
    checkpoints: Dict[int, Path] = {}
    rows: List[dict] = []
    if lm_pretrain is not None:
        texts = list(corpus["text"])
        losses[0] = pretrain_language_model(model, texts, corpus.vocab, lm_pretrain, np.random.default_rng([seed, 0]))
    for stage, split in ((s1, "alignment"), (s2, "instruction")):
        if stage.stage not in run:
            continue
        examples = [prepare(s, corpus.vocab, cfg) for s in corpus[split]]
        # one shuffling stream per stage, so stage 2 sees the same batches
        # whether or not stage 1 ran before it
        rng = np.random.default_rng([seed, stage.stage])
        res = run_stage(model, examples, stage, rng, step_offset=len(rows))
        losses[stage.stage] = res.losses
        rows.extend(res.rows)
        if not all(np.isfinite(res.losses)):
            raise FloatingPointError(f"non-finite loss during stage {stage.stage}")
        if out is not None:
            checkpoints[stage.stage] = model.save(out / f"stage{stage.stage}", {"stage": stage.stage, "seed": seed})
    loss_csv = None
    if out is not None:
        loss_csv = out / "losses.csv"
        write_loss_csv(loss_csv, rows)
    return TwoStageResult(model, losses, checkpoints, loss_csv)
