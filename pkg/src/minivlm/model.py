"""Vision encoder -> projector -> decoder, plus batching of encoded samples."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import nn
from . import tensor as T
from .config import ModelConfig
from .lm import EmbeddedSequence, LanguageModel, lm_param_count, splice_visual
from .projector import Projector, param_count
from .sequence import ConversationSample, build, prompt_ids, shift_targets, splice_targets
from .serialize import load_checkpoint, save_checkpoint
from .tensor import Tensor
from .text import STOP_ID, Vocabulary
from .vision import VisionEncoder, normalize_image

GROUPS = ("vision_encoder", "projector", "language_model")


@dataclass
class Example:
    """A sample in trainable form: normalized pixels plus shifted, unspliced targets."""

    pixels: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray
    target_mask: np.ndarray
    image_slot: int

    @property
    def num_targets(self) -> int:
        return int(self.target_mask.sum())


def prepare(sample: ConversationSample, vocab: Vocabulary, cfg: ModelConfig) -> Example:
    enc = build(sample, vocab, max_context=cfg.lm.max_context, visual_tokens=cfg.projector.target_tokens)
    inputs, targets, mask = shift_targets(enc)
    return Example(normalize_image(sample.image), inputs, targets, mask, enc.image_slot)


class VisionLanguageModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self._cfg = cfg
        self.vision = VisionEncoder(cfg.vision, rng)
        self.projector = Projector(cfg.projector, cfg.vision.grid_side, rng)
        self.lm = LanguageModel(cfg.lm, rng)

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    def groups(self) -> Dict[str, nn.Module]:
        return {"vision_encoder": self.vision, "projector": self.projector, "language_model": self.lm}

    def set_trainable(self, groups: Sequence[str]) -> None:
        unknown = set(groups) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")
        for name, module in self.groups().items():
            module.requires_grad_(name in groups)

    def param_counts(self) -> Dict[str, int]:
        return {name: m.num_parameters() for name, m in self.groups().items()}

    def closed_form_counts(self) -> Dict[str, int]:
        return {
            "projector": param_count(self._cfg.projector, self._cfg.vision.grid_side),
            "language_model": lm_param_count(self._cfg.lm),
        }

    # ------------------------------------------------------------------
    def encode_images(self, pixels) -> Tensor:
        """[B, C, H, W] normalized pixels -> [B, G, D] features.

        The encoder is only ever frozen during training, so its activations
        are computed without recording unless its weights require grad.
        """
        pixels = np.asarray(pixels)
        if any(p.requires_grad for p in self.vision.parameters()):
            return self.vision(pixels).tokens
        with T.no_grad():
            return self.vision(pixels).tokens

    def batch_inputs(self, examples: Sequence[Example], features: Optional[Tensor] = None):
        """Spliced, right-padded decoder inputs with matching targets and mask."""
        if not examples:
            raise ValueError("empty batch")
        if features is None:
            features = self.encode_images(np.stack([ex.pixels for ex in examples]))
        visual = self.projector(features)
        n_vis = visual.shape[1]
        seqs, targets, masks = [], [], []
        for b, ex in enumerate(examples):
            text = self.lm.embed_tokens(ex.inputs)
            seq = splice_visual(text, visual[b], ex.image_slot, self._cfg.lm.max_context)
            t, m = splice_targets(ex.targets, ex.target_mask, ex.image_slot, n_vis)
            seqs.append(seq.vectors)
            targets.append(t)
            masks.append(m)
        width = max(s.shape[0] for s in seqs)
        hidden = self._cfg.lm.hidden_size
        padded, tgt, msk = [], np.zeros((len(seqs), width), np.int64), np.zeros((len(seqs), width), bool)
        for b, s in enumerate(seqs):
            n = s.shape[0]
            if n < width:
                s = T.concat([s, Tensor(np.zeros((width - n, hidden), dtype=s.dtype))], axis=0)
            padded.append(s)
            tgt[b, :n] = targets[b]
            msk[b, :n] = masks[b]
        return T.stack(padded, axis=0), tgt, msk

    def loss(self, examples: Sequence[Example], features: Optional[Tensor] = None) -> Tensor:
        """Mean over samples of each sample's masked next-token NLL."""
        x, tgt, msk = self.batch_inputs(examples, features)
        return T.cross_entropy_masked(self.lm(x), tgt, msk)

    def token_accuracy(self, examples: Sequence[Example], features: Optional[Tensor] = None) -> float:
        with T.no_grad():
            x, tgt, msk = self.batch_inputs(examples, features)
            pred = np.argmax(self.lm(x).data, axis=-1)
        return float((pred[msk] == tgt[msk]).mean())

    # ------------------------------------------------------------------
    def embed_prompt(self, pixels, ids, image_slot: int) -> EmbeddedSequence:
        with T.no_grad():
            features = self.encode_images(np.asarray(pixels)[None])
            visual = self.projector(features)
            text = self.lm.embed_tokens(ids)
            return splice_visual(text, visual[0], image_slot, self._cfg.lm.max_context)

    def answer(self, sample: ConversationSample, vocab: Vocabulary, turn: int = 0, max_new: int = 24):
        """Greedy answer to ``turn`` with earlier turns teacher-forced; returns (text, Generation)."""
        ids = prompt_ids(sample, vocab, turn)
        slot = int(np.flatnonzero(ids == vocab.id_of("<image>"))[0])
        prefix = self.embed_prompt(normalize_image(sample.image), ids, slot)
        gen = self.lm.generate(prefix, max_new=max_new, stop_id=STOP_ID)
        out = gen.ids[:-1] if gen.stopped else gen.ids
        return vocab.decode(out), gen

    # ------------------------------------------------------------------
    def save(self, directory, extra: Optional[dict] = None):
        manifest = dict(self._cfg.to_flat())
        manifest.update(extra or {})
        return save_checkpoint(directory, self.state_dict(), manifest)

    @classmethod
    def load(cls, directory) -> "VisionLanguageModel":
        state, manifest = load_checkpoint(directory)
        cfg = ModelConfig.from_dict({k: v for k, v in manifest.items() if k in ("vision", "projector", "lm")})
        model = cls(cfg)
        model.load_state_dict(state)
        return model


def exact_answer_accuracy(model: VisionLanguageModel, samples: Sequence[ConversationSample], vocab: Vocabulary) -> float:
    hits = total = 0
    for sample in samples:
        for turn, (_, expected) in enumerate(sample.turns):
            text, _ = model.answer(sample, vocab, turn)
            hits += text == expected
            total += 1
    return hits / total if total else float("nan")
