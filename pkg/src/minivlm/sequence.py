"""Multi-turn conversation template and the assistant-only loss mask.

Layout of an encoded sample::

    system <stop>
    Human: q1 <image> <stop> Assistant: a1 <stop>
    Human: q2 <stop> Assistant: a2 <stop> ...

Only the answer tokens and the stop token that closes each answer are
trained on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .tensor import EmptyMaskError
from .text import IMAGE_ID, PAD_ID, STOP_ID, Vocabulary

HUMAN_MARKER = "Human:"
ASSISTANT_MARKER = "Assistant:"

Span = Tuple[int, int]


class OversizeError(ValueError):
    """Encoded sample will not fit the decoder context after the visual splice."""


@dataclass
class ConversationSample:
    image: object  # pixel array [C, H, W] in [0, 1]; None for text-only samples
    system: str
    turns: List[Tuple[str, str]]

    def __post_init__(self):
        if not self.turns:
            raise ValueError("a conversation needs at least one turn")
        self.turns = [(str(h), str(a)) for h, a in self.turns]
        for h, a in self.turns:
            if not h or not a:
                raise ValueError("human and assistant texts must be nonempty")
        if not self.system:
            raise ValueError("system message must be nonempty")


@dataclass
class EncodedSequence:
    ids: np.ndarray
    loss_mask: np.ndarray
    image_slot: int
    turn_spans: List[Tuple[Span, Span]] = field(default_factory=list)

    def __len__(self):
        return len(self.ids)


def build(
    sample: ConversationSample,
    vocab: Vocabulary,
    max_context: Optional[int] = None,
    visual_tokens: int = 1,
) -> EncodedSequence:
    """Encode a conversation; human spans cover ``Human: q [<image>] <stop>``,
    assistant spans cover the answer and its closing stop."""
    ids: List[int] = []
    mask: List[bool] = []

    def emit(tokens, trained=False):
        ids.extend(tokens)
        mask.extend([trained] * len(tokens))

    emit(vocab.encode(sample.system) + [STOP_ID])
    spans = []
    image_slot = -1
    for t, (human, answer) in enumerate(sample.turns):
        h0 = len(ids)
        emit(vocab.encode(f"{HUMAN_MARKER} {human}"))
        if t == 0:
            image_slot = len(ids)
            emit([IMAGE_ID])
        emit([STOP_ID])
        h1 = len(ids)
        emit(vocab.encode(ASSISTANT_MARKER))
        a0 = len(ids)
        emit(vocab.encode(answer) + [STOP_ID], trained=True)
        spans.append(((h0, h1), (a0, len(ids))))

    if max_context is not None and len(ids) - 1 + visual_tokens > max_context:
        raise OversizeError(
            f"sample of {len(ids)} tokens with {visual_tokens} visual tokens exceeds max_context {max_context}"
        )
    return EncodedSequence(np.array(ids, dtype=np.int64), np.array(mask, dtype=bool), image_slot, spans)


def prompt_ids(sample: ConversationSample, vocab: Vocabulary, turn: int, answers: Optional[Sequence[str]] = None) -> np.ndarray:
    """Ids of the context that precedes answer ``turn``.

    Earlier answers come from ``answers`` when given, otherwise from the
    sample (teacher forcing).
    """
    turns = list(sample.turns[: turn + 1])
    if answers is not None:
        turns = [(h, answers[i]) if i < turn else (h, a) for i, (h, a) in enumerate(turns)]
    enc = build(ConversationSample(sample.image, sample.system, turns), vocab)
    return enc.ids[: enc.turn_spans[turn][1][0]]


def shift_targets(seq: EncodedSequence):
    """Inputs/targets for next-token prediction: position i predicts token i+1."""
    if len(seq.ids) < 2:
        raise ValueError("need at least two tokens to form a prediction target")
    target_mask = seq.loss_mask[1:].copy()
    if not target_mask.any():
        raise EmptyMaskError("sequence has no trained positions")
    return seq.ids[:-1].copy(), seq.ids[1:].copy(), target_mask


def unshift(inputs, targets, target_mask):
    """Inverse of :func:`shift_targets` (the first position is never trained)."""
    ids = np.concatenate([inputs[:1], targets])
    mask = np.concatenate([[False], target_mask])
    return ids, mask


def splice_targets(targets, target_mask, at: int, visual_tokens: int):
    """Expand per-position targets to account for ``visual_tokens`` rows replacing slot ``at``.

    The last visual row inherits the placeholder's target; the others are
    padding and untrained.  Indices after ``at`` shift by visual_tokens - 1.
    """
    extra = visual_tokens - 1
    new_t = np.concatenate([targets[:at], np.full(extra, PAD_ID, dtype=targets.dtype), targets[at:]])
    new_m = np.concatenate([target_mask[:at], np.zeros(extra, dtype=bool), target_mask[at:]])
    return new_t, new_m
