"""Command-line entry point: gen-data, train, ablate, bench, eval."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from . import data, harness
from .config import LMConfig, ModelConfig, ProjectorConfig, VisionConfig, unflatten
from .model import VisionLanguageModel
from .serialize import read_manifest
from .train import PretrainConfig, default_stage_configs, run_two_stage

def _read_config(path) -> dict:
    return unflatten(read_manifest(path)) if path else {}


def _tuples(section: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in section.items()}


def model_config(raw: dict, vocab_size: int, projector: Optional[str] = None, visual_tokens: Optional[int] = None) -> ModelConfig:
    """Toy defaults overridden by the [vision], [projector] and [lm] sections and CLI flags."""
    vision = VisionConfig(**raw.get("vision", {}))
    lm = LMConfig(**{"vocab_size": vocab_size, **raw.get("lm", {})})
    section = raw.get("projector", {})
    kind = (projector or section.get("kind", "xdp")).lower()
    g = vision.num_patches
    tokens = visual_tokens or section.get("target_tokens", g if kind in ("linear", "mlp") else g // 4)
    proj = ProjectorConfig(
        kind=kind,
        in_dim=section.get("in_dim", vision.embed_dim),
        out_dim=section.get("out_dim", lm.hidden_size),
        target_tokens=tokens,
    )
    return ModelConfig(vision, proj, lm)


def stage_configs(raw: dict):
    s1, s2 = default_stage_configs()
    return s1.with_(**_tuples(raw.get("stage1", {}))), s2.with_(**_tuples(raw.get("stage2", {})))


def pretrain_config(raw: dict, epochs: Optional[int]) -> Optional[PretrainConfig]:
    section = _tuples(raw.get("pretrain", {}))
    if epochs is not None:
        section["epochs"] = epochs
    return PretrainConfig(**section) if section else None


def synthetic_spec(raw: dict) -> data.SyntheticSpec:
    fields = {k: v for k, v in raw.items() if k in ("max_items", "min_turns", "max_turns")}
    counts = {**data.SyntheticSpec().counts, **raw.get("counts", {})}
    return data.SyntheticSpec(counts=counts, **fields)


# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = synthetic_spec(_read_config(args.config))
    out = data.generate_corpus(args.out, spec, seed=args.seed)
    counts = {s: spec.counts.get(s, 0) for s in data.SPLITS}
    print(json.dumps({"out": str(out), "counts": counts}))
    if args.verify:
        problems = data.verify_corpus(out)
        for p in problems:
            print(p, file=sys.stderr)
        print(json.dumps({"inconsistencies": len(problems)}))
        return 1 if problems else 0
    return 0


def cmd_train(args) -> int:
    raw = _read_config(args.config)
    corpus = data.load_corpus(args.corpus)
    cfg = model_config(raw, len(corpus.vocab), args.projector, args.visual_tokens)
    run = {"1": (1,), "2": (2,), "both": (1, 2)}[args.stage]
    res = run_two_stage(
        corpus,
        cfg,
        stage_configs(raw),
        out_dir=args.out,
        seed=args.seed,
        run=run,
        init=args.init,
        # an initial checkpoint already carries its decoder warm start
        lm_pretrain=None if args.init else pretrain_config(raw, args.pretrain_epochs),
    )
    summary = {
        "checkpoints": {str(k): str(v) for k, v in res.checkpoints.items()},
        "loss_csv": str(res.loss_csv),
        "final_loss": {str(k): v[-1] for k, v in res.losses.items() if v},
    }
    print(json.dumps(summary))
    return 0


def cmd_ablate(args) -> int:
    raw = _read_config(args.config)
    corpus = data.load_corpus(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lm_sizes = [tuple(int(v) for v in s.split("x")) for s in args.lm_sizes]
    grid = harness.default_grid(len(corpus.vocab), lm_sizes)
    if args.cells:
        grid = [c for c in grid if c.config_id in args.cells]
    s1, s2 = stage_configs(raw)
    defaults = harness.AblationSettings()
    settings = harness.AblationSettings(
        stage1=s1 if "stage1" in raw else defaults.stage1,
        stage2=s2 if "stage2" in raw else defaults.stage2,
        pretrain=pretrain_config(raw, args.pretrain_epochs) or defaults.pretrain,
    )
    rows = harness.run_ablation(grid, corpus, args.seeds, out / "ablation.csv", settings)
    harness.token_ladder_plan(out_csv=out / "token_ladder.csv")
    failed = sum(r["status"] != "ok" for r in rows)
    print(json.dumps({"rows": len(rows), "failed": failed, "ablation_csv": str(out / "ablation.csv"), "token_ladder_csv": str(out / "token_ladder.csv")}))
    return 0


def cmd_bench(args) -> int:
    if args.reps <= 0:
        print(json.dumps({}))
        return 0
    model = VisionLanguageModel.load(args.checkpoint)
    corpus = data.load_corpus(args.corpus)
    prompts = [s for s in corpus[args.split] if s.image is not None][: args.prompts]
    report = harness.benchmark_latency(
        model, prompts, corpus.vocab, reps=args.reps, max_new=args.max_new, stop_id=None if args.no_stop else harness.STOP_ID
    )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.write(out / "bench.csv", out / "bench.json")
    print(json.dumps(report.summary()))
    return 0


def cmd_eval(args) -> int:
    model = VisionLanguageModel.load(args.checkpoint)
    corpus = data.load_corpus(args.corpus)
    samples = [s for s in corpus[args.split] if s.image is not None]
    result = harness.evaluate(model, samples, corpus.vocab, out_jsonl=args.out, max_new=args.max_new)
    print(json.dumps(result))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="minivlm", description="Toy vision-language model: data, training, ablations, latency.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render the synthetic shapes corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", help="key=value file: counts.<split>, max_items, min_turns, max_turns")
    g.add_argument("--verify", action="store_true", help="re-derive every answer from the pixels")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="two-stage training")
    t.add_argument("--stage", choices=("1", "2", "both"), default="both")
    t.add_argument("--config", help="key=value file with vision/projector/lm/stage1/stage2/pretrain sections")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--projector", choices=("linear", "mlp", "ldp", "ldpv2", "xdp"))
    t.add_argument("--visual-tokens", type=int)
    t.add_argument("--init", help="checkpoint directory to start from (e.g. a stage-1 checkpoint)")
    t.add_argument("--pretrain-epochs", type=int, help="warm up the decoder on the text split first")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="projector / token-count / decoder-size grid")
    a.add_argument("--corpus", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", type=int, nargs="+", default=[0])
    a.add_argument("--config", help="stage1/stage2/pretrain budget overrides")
    a.add_argument("--lm-sizes", nargs="*", default=[], metavar="HIDDENxLAYERS")
    a.add_argument("--cells", nargs="*", help="restrict to these config ids")
    a.add_argument("--pretrain-epochs", type=int)
    a.set_defaults(func=cmd_ablate)

    b = sub.add_parser("bench", help="greedy decoding throughput")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--corpus", required=True)
    b.add_argument("--split", default="eval")
    b.add_argument("--prompts", type=int, default=8)
    b.add_argument("--reps", type=int, default=3)
    b.add_argument("--max-new", type=int, default=24)
    b.add_argument("--no-stop", action="store_true", help="always decode max-new tokens")
    b.add_argument("--out", help="directory for bench.csv and bench.json")
    b.set_defaults(func=cmd_bench)

    e = sub.add_parser("eval", help="masked-token and exact-answer accuracy")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", default="eval")
    e.add_argument("--out", help="JSON-lines file with one record per answer")
    e.add_argument("--max-new", type=int, default=24)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
