"""LLaMA-style causal decoder: RMSNorm, rotary attention, SwiGLU, untied head."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import nn
from . import tensor as T
from .config import LMConfig
from .tensor import Tensor


class ContextOverflowError(ValueError):
    """A sequence would exceed the decoder's maximum context."""


@dataclass
class EmbeddedSequence:
    vectors: Tensor  # [L, hidden]

    @property
    def length(self) -> int:
        return self.vectors.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return np.arange(self.length)


@dataclass
class Generation:
    ids: List[int]
    seconds: float
    stopped: bool = False
    step_seconds: List[float] = field(default_factory=list)

    @property
    def tokens_per_sec(self) -> float:
        return len(self.ids) / self.seconds if self.seconds > 0 else 0.0


def splice_visual(text_emb: Tensor, visual: Tensor, at: int, max_context: Optional[int] = None) -> EmbeddedSequence:
    """Replace the single placeholder row ``at`` of ``text_emb`` by the visual token rows.

    Result length is L_text - 1 + T.
    """
    n = text_emb.shape[0]
    if not 0 <= at < n:
        raise ValueError(f"image placeholder position {at} is outside a sequence of {n} tokens")
    if visual.ndim != 2 or visual.shape[1] != text_emb.shape[1]:
        raise T.ShapeError(f"visual tokens {visual.shape} do not match text embeddings {text_emb.shape}")
    length = n - 1 + visual.shape[0]
    if max_context is not None and length > max_context:
        raise ContextOverflowError(f"spliced sequence of {length} tokens exceeds max_context {max_context}")
    parts = [p for p in (text_emb[:at], visual, text_emb[at + 1 :]) if p.shape[0]]
    return EmbeddedSequence(T.concat(parts, axis=0))


class DecoderBlock(nn.Module):
    def __init__(self, rng, cfg: LMConfig):
        h, m = cfg.hidden_size, cfg.intermediate_size
        self.attn_norm = nn.RMSNorm(h)
        self.wq = nn.Linear(rng, h, h, bias=False)
        self.wk = nn.Linear(rng, h, h, bias=False)
        self.wv = nn.Linear(rng, h, h, bias=False)
        self.wo = nn.Linear(rng, h, h, bias=False)
        self.mlp_norm = nn.RMSNorm(h)
        self.w_gate = nn.Linear(rng, h, m, bias=False)
        self.w_up = nn.Linear(rng, h, m, bias=False)
        self.w_down = nn.Linear(rng, m, h, bias=False)
        self._heads = cfg.num_heads
        self._base = cfg.rope_base

    def forward(self, x: Tensor, cache: Optional[dict] = None) -> Tensor:
        """``cache`` (inference only) holds this block's rotated keys and values so far."""
        offset = cache["k"].shape[2] if cache else 0
        hx = self.attn_norm(x)
        q = T.rope(nn.split_heads(self.wq(hx), self._heads), self._base, offset)
        k = T.rope(nn.split_heads(self.wk(hx), self._heads), self._base, offset)
        v = nn.split_heads(self.wv(hx), self._heads)
        if cache is not None:
            if cache:
                k = Tensor(np.concatenate([cache["k"], k.data], axis=2))
                v = Tensor(np.concatenate([cache["v"], v.data], axis=2))
            cache["k"], cache["v"] = k.data, v.data
        x = x + self.wo(nn.merge_heads(nn.attention(q, k, v, causal=True)))
        hx = self.mlp_norm(x)
        return x + self.w_down(T.silu(self.w_gate(hx)) * self.w_up(hx))


class LanguageModel(nn.Module):
    def __init__(self, cfg: LMConfig, rng: np.random.Generator):
        self._cfg = cfg
        self.embed = nn.param(rng, cfg.vocab_size, cfg.hidden_size)
        self.layers = [DecoderBlock(rng, cfg) for _ in range(cfg.num_layers)]
        self.norm = nn.RMSNorm(cfg.hidden_size)
        self.lm_head = nn.param(rng, cfg.hidden_size, cfg.vocab_size)

    @property
    def config(self) -> LMConfig:
        return self._cfg

    def embed_tokens(self, ids) -> Tensor:
        return T.embedding_lookup(self.embed, ids)

    def forward(self, x, cache: Optional[List[dict]] = None) -> Tensor:
        """Next-token logits for embeddings [L, hidden] or [B, L, hidden].

        With ``cache`` (one dict per layer, from :meth:`new_cache`) ``x`` holds
        only the new positions; earlier keys and values are reused.
        """
        if isinstance(x, EmbeddedSequence):
            x = x.vectors
        if x.shape[-1] != self._cfg.hidden_size:
            raise T.ShapeError(f"embeddings of width {x.shape[-1]} fed to a hidden_size {self._cfg.hidden_size} decoder")
        past = cache[0]["k"].shape[2] if cache and cache[0] else 0
        if past + x.shape[-2] > self._cfg.max_context:
            raise ContextOverflowError(
                f"sequence of {past + x.shape[-2]} tokens exceeds max_context {self._cfg.max_context}"
            )
        single = x.ndim == 2
        if single:
            x = T.reshape(x, (1,) + x.shape)
        for i, layer in enumerate(self.layers):
            x = layer(x, cache[i] if cache is not None else None)
        logits = T.matmul(self.norm(x), self.lm_head)
        return T.reshape(logits, logits.shape[1:]) if single else logits

    def new_cache(self) -> List[dict]:
        return [{} for _ in self.layers]

    def generate(self, prefix, max_new: int, stop_id: Optional[int] = None, use_cache: bool = True) -> Generation:
        """Greedy decoding; the stop token, if produced, is included.

        ``use_cache=False`` recomputes the whole sequence at every step.
        """
        vectors = prefix.vectors if isinstance(prefix, EmbeddedSequence) else prefix
        if vectors.shape[0] == 0:
            raise ValueError("generate needs a nonempty prefix")
        ids: List[int] = []
        steps: List[float] = []
        stopped = False
        start = time.perf_counter()
        cache = self.new_cache() if use_cache else None
        with T.no_grad():
            x = Tensor(vectors.data)
            length = x.shape[0]
            for _ in range(max_new):
                if length > self._cfg.max_context:
                    raise ContextOverflowError(
                        f"generation reached {length} tokens, beyond max_context {self._cfg.max_context}"
                    )
                t0 = time.perf_counter()
                logits = self.forward(x, cache)
                nxt = int(np.argmax(logits.data[-1]))
                ids.append(nxt)
                steps.append(time.perf_counter() - t0)
                if stop_id is not None and nxt == stop_id:
                    stopped = True
                    break
                new = Tensor(self.embed.data[nxt][None])
                x = new if use_cache else Tensor(np.concatenate([x.data, new.data], axis=0))
                length += 1
        return Generation(ids=ids, seconds=time.perf_counter() - start, stopped=stopped, step_seconds=steps)


def lm_param_count(cfg: LMConfig) -> int:
    """Embedding + per-block (2 norms, 4 attention maps, 3 SwiGLU maps) + final norm + head."""
    h, m, v = cfg.hidden_size, cfg.intermediate_size, cfg.vocab_size
    block = 2 * h + 4 * h * h + 3 * h * m
    return v * h + cfg.num_layers * block + h + h * v
