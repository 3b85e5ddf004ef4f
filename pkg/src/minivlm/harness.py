"""Ablation grids, evaluation and the latency benchmark."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import ModelConfig, full_size_config, toy_config
from .model import VisionLanguageModel, prepare
from .projector import merge_plan, param_count, reduction_ratio
from .sequence import ConversationSample, prompt_ids
from .text import IMAGE_ID, STOP_ID, Vocabulary
from .train import PretrainConfig, StageConfig, run_two_stage
from .vision import normalize_image

log = logging.getLogger(__name__)

TOY_KIND_GRID = (("linear", 16), ("mlp", 16), ("ldp", 4), ("ldpv2", 4), ("xdp", 4))
TOY_TOKEN_LADDER = (16, 4, 1)
FULL_TOKEN_LADDER = (576, 288, 144, 72, 64, 36, 18, 8, 4, 2, 1)

ABLATION_COLUMNS = (
    "config_id", "kind", "target_tokens", "hidden_size", "num_layers", "seed", "status", "error",
    "stage1_final_loss", "stage2_final_loss", "stage2_monotone",
    "eval_token_accuracy", "eval_exact_accuracy", "tokens_per_sec",
    "params_vision", "params_projector", "params_language_model",
    "closed_form_projector", "closed_form_language_model",
)
LADDER_COLUMNS = ("target_tokens", "pool_h", "pool_w", "grid_side", "reduction", "xdp_params")
BENCH_COLUMNS = ("rep", "prompt", "tokens", "preprocess_s", "decode_s", "tokens_per_sec")


@dataclass
class AblationSettings:
    """Training budget for every grid cell."""

    stage1: StageConfig = StageConfig(1, ("projector",), 3e-3, 16, epochs=4)
    stage2: StageConfig = StageConfig(2, ("projector", "language_model"), 1e-3, 16, epochs=4)
    pretrain: Optional[PretrainConfig] = PretrainConfig(epochs=3)


@dataclass
class Cell:
    config_id: str
    config: ModelConfig


def default_grid(vocab_size: int, lm_sizes: Sequence[Tuple[int, int]] = ()) -> List[Cell]:
    """Projector kinds at their natural token counts, the XDP token ladder, and optional (hidden, layers) decoder sizes."""
    cells = {}
    for kind, tokens in TOY_KIND_GRID:
        cells[f"{kind}-{tokens}"] = toy_config(vocab_size, kind, tokens)
    for tokens in TOY_TOKEN_LADDER:
        cells.setdefault(f"xdp-{tokens}", toy_config(vocab_size, "xdp", tokens))
    base = toy_config(vocab_size, "xdp", 4)
    for hidden, layers in lm_sizes:
        cells[f"xdp-4-h{hidden}-l{layers}"] = base.replace(
            lm={"hidden_size": hidden, "num_layers": layers, "intermediate_size": None},
            projector={"out_dim": hidden},
        )
    return [Cell(k, v) for k, v in cells.items()]


def _epoch_means(losses: Sequence[float], n_epochs: int) -> List[float]:
    if not losses or n_epochs <= 0:
        return []
    per = len(losses) // n_epochs
    return [float(np.mean(losses[i * per : (i + 1) * per])) for i in range(n_epochs)]


def is_non_increasing(values: Sequence[float]) -> bool:
    return all(b <= a for a, b in zip(values, values[1:]))


def _write_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in columns})


def run_cell(cell: Cell, corpus, seed: int, settings: AblationSettings) -> dict:
    cfg = cell.config
    model = VisionLanguageModel(cfg, seed=seed)
    row = {
        "config_id": cell.config_id,
        "kind": cfg.projector.kind,
        "target_tokens": cfg.projector.target_tokens,
        "hidden_size": cfg.lm.hidden_size,
        "num_layers": cfg.lm.num_layers,
        "seed": seed,
        "params_vision": model.vision.num_parameters(),
        "params_projector": model.projector.num_parameters(),
        "params_language_model": model.lm.num_parameters(),
        **{f"closed_form_{k}": v for k, v in model.closed_form_counts().items()},
    }
    res = run_two_stage(corpus, cfg, (settings.stage1, settings.stage2), seed=seed, lm_pretrain=settings.pretrain)
    model = res.model
    s2 = res.losses.get(2, [])
    s1_epochs = _epoch_means(res.losses.get(1, []), settings.stage1.epochs)
    row["stage1_final_loss"] = s1_epochs[-1] if s1_epochs else ""
    epochs = _epoch_means(s2, settings.stage2.epochs)
    row["stage2_final_loss"] = epochs[-1] if epochs else ""
    row["stage2_monotone"] = is_non_increasing(epochs)
    evals = corpus["eval"]
    if evals:
        examples = [prepare(s, corpus.vocab, cfg) for s in evals]
        row["eval_token_accuracy"] = model.token_accuracy(examples)
        t0 = time.perf_counter()
        gen_tokens = 0
        hits = total = 0
        for s in evals:
            for turn, (_, expected) in enumerate(s.turns):
                text, gen = model.answer(s, corpus.vocab, turn)
                gen_tokens += len(gen.ids)
                hits += text == expected
                total += 1
        row["eval_exact_accuracy"] = hits / total
        row["tokens_per_sec"] = gen_tokens / (time.perf_counter() - t0)
    row["status"] = "ok"
    return row


def run_ablation(
    grid: Sequence[Cell],
    corpus,
    seeds: Sequence[int],
    out_csv=None,
    settings: Optional[AblationSettings] = None,
) -> List[dict]:
    """Train and evaluate every (cell, seed); failures become rows with status "failed"."""
    settings = settings or AblationSettings()
    rows = []
    for cell in grid:
        for seed in seeds:
            try:
                row = run_cell(cell, corpus, seed, settings)
            except Exception as exc:  # a failing cell must not stop the grid
                log.warning("cell %s seed %d failed: %s", cell.config_id, seed, exc)
                log.debug("%s", traceback.format_exc())
                row = {
                    "config_id": cell.config_id,
                    "kind": cell.config.projector.kind,
                    "target_tokens": cell.config.projector.target_tokens,
                    "hidden_size": cell.config.lm.hidden_size,
                    "num_layers": cell.config.lm.num_layers,
                    "seed": seed,
                    "status": "failed",
                    "error": f"{type(exc).__name__}: {exc}",
                }
            rows.append(row)
            log.info("cell %s seed %d: %s", cell.config_id, seed, row["status"])
    if out_csv is not None:
        _write_csv(out_csv, ABLATION_COLUMNS, rows)
    return rows


def token_ladder_plan(grid_side: int = 24, targets: Sequence[int] = FULL_TOKEN_LADDER, out_csv=None) -> List[dict]:
    """Merge plan and XDP size for each token count on a full-size grid (no training)."""
    cfg = full_size_config()
    rows = []
    for t in targets:
        ph, pw = merge_plan(grid_side, t)
        proj = dataclasses.replace(cfg.projector, target_tokens=t)
        rows.append(
            {
                "target_tokens": t,
                "pool_h": ph,
                "pool_w": pw,
                "grid_side": grid_side,
                "reduction": reduction_ratio(grid_side**2, t),
                "xdp_params": param_count(proj, grid_side),
            }
        )
    if out_csv is not None:
        _write_csv(out_csv, LADDER_COLUMNS, rows)
    return rows


def median_by_tokens(rows: Sequence[dict], metric: str = "eval_exact_accuracy") -> Dict[int, float]:
    """Median of ``metric`` per XDP token count over seeds, from completed rows."""
    by: Dict[int, List[float]] = {}
    for r in rows:
        if r.get("status") == "ok" and r["kind"] == "xdp" and r.get(metric, "") != "":
            by.setdefault(int(r["target_tokens"]), []).append(float(r[metric]))
    return {k: float(np.median(v)) for k, v in by.items()}


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: VisionLanguageModel, samples: Sequence[ConversationSample], vocab: Vocabulary, out_jsonl=None, max_new: int = 24) -> dict:
    """Masked-token accuracy and exact-answer accuracy; optionally one JSON line per answer."""
    if not samples:
        return {"samples": 0, "answers": 0, "token_accuracy": None, "exact_accuracy": None}
    examples = [prepare(s, vocab, model.config) for s in samples]
    token_acc = model.token_accuracy(examples)
    records = []
    for i, s in enumerate(samples):
        for turn, (question, expected) in enumerate(s.turns):
            text, gen = model.answer(s, vocab, turn, max_new=max_new)
            records.append({"sample": i, "turn": turn, "question": question, "expected": expected, "predicted": text, "correct": text == expected})
    if out_jsonl is not None:
        Path(out_jsonl).write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return {
        "samples": len(samples),
        "answers": len(records),
        "token_accuracy": token_acc,
        "exact_accuracy": sum(r["correct"] for r in records) / len(records),
    }


# ---------------------------------------------------------------------------
# latency


@dataclass
class LatencyReport:
    rows: List[dict] = field(default_factory=list)
    intervals: List[Tuple[str, float, float]] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.rows

    def summary(self) -> dict:
        """Headline numbers: "Samples(token/s)" is decode throughput, "Total(s)" is decode wall time."""
        if self.empty:
            return {}
        tps = np.array([r["tokens_per_sec"] for r in self.rows])
        dec = np.array([r["decode_s"] for r in self.rows])
        pre = np.array([r["preprocess_s"] for r in self.rows])
        return {
            "runs": len(self.rows),
            "Samples(token/s) mean": float(tps.mean()),
            "Samples(token/s) p50": float(np.median(tps)),
            "Total(s)": float(dec.sum()),
            "Total(s) mean": float(dec.mean()),
            "Total(s) p50": float(np.median(dec)),
            "preprocess(s) excluded": float(pre.sum()),
        }

    def timers_disjoint(self) -> bool:
        spans = sorted((a, b) for _, a, b in self.intervals)
        return all(b0 <= a1 for (_, b0), (a1, _) in zip(spans, spans[1:]))

    def write(self, out_csv=None, out_json=None) -> None:
        if out_csv is not None:
            _write_csv(out_csv, BENCH_COLUMNS, self.rows)
        if out_json is not None:
            Path(out_json).write_text(json.dumps(self.summary(), indent=2) + "\n", encoding="utf-8")


def benchmark_latency(
    model: VisionLanguageModel,
    prompts: Sequence[ConversationSample],
    vocab: Vocabulary,
    reps: int = 3,
    max_new: int = 24,
    stop_id: Optional[int] = STOP_ID,
    warmup: bool = True,
) -> LatencyReport:
    """Time greedy decoding of each prompt's first answer ``reps`` times.

    Preprocessing (prompt building, image encoding, projection and splice)
    runs under its own timer and is excluded from the throughput numbers.
    ``stop_id=None`` forces exactly ``max_new`` decoded tokens.
    """
    report = LatencyReport()
    if reps <= 0 or not prompts:
        return report
    if warmup:
        prefix, _ = _preprocess(model, prompts[0], vocab)
        model.lm.generate(prefix, max_new=1)
    for rep in range(reps):
        for i, sample in enumerate(prompts):
            t0 = time.perf_counter()
            prefix, _ = _preprocess(model, sample, vocab)
            t1 = time.perf_counter()
            gen = model.lm.generate(prefix, max_new=max_new, stop_id=stop_id)
            t2 = time.perf_counter()
            report.intervals += [("preprocess", t0, t1), ("decode", t1, t2)]
            report.rows.append(
                {
                    "rep": rep,
                    "prompt": i,
                    "tokens": len(gen.ids),
                    "preprocess_s": t1 - t0,
                    "decode_s": gen.seconds,
                    "tokens_per_sec": gen.tokens_per_sec,
                }
            )
    return report


def _preprocess(model: VisionLanguageModel, sample: ConversationSample, vocab: Vocabulary):
    ids = prompt_ids(sample, vocab, 0)
    slot = int(np.flatnonzero(ids == IMAGE_ID)[0])
    return model.embed_prompt(normalize_image(sample.image), ids, slot), ids


def decode_scaling(model: VisionLanguageModel, prompt: ConversationSample, vocab: Vocabulary, max_new: int = 32, reps: int = 9) -> float:
    """Ratio of decode time at 2*max_new to decode time at max_new, divided by 2.

    Close to 1 when decode time is proportional to the number of generated
    tokens.  The two lengths are timed alternately and each keeps its
    fastest repetition, which filters out scheduler noise.
    """
    prefix, _ = _preprocess(model, prompt, vocab)
    model.lm.generate(prefix, max_new=1)
    best = {max_new: float("inf"), 2 * max_new: float("inf")}
    for _ in range(reps):
        for n in best:
            best[n] = min(best[n], model.lm.generate(prefix, max_new=n, stop_id=None).seconds)
    return best[2 * max_new] / (2 * best[max_new])
