"""Synthetic shapes corpus: renderer, caption/QA grammar, pixel-level checker, IO.

Images are 32x32 RGB on black, split into a 2x2 grid of 16px cells; each
cell holds at most one colored shape.  Every caption and answer is a function
of the scene, and :func:`analyze_image` recovers the scene from pixels alone,
so the corpus can be audited without trusting the generator.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .sequence import ConversationSample
from .serialize import load_tensor
from .text import Vocabulary, pretokenize

SHAPES = ("circle", "square", "triangle", "cross")
COLORS: Dict[str, Tuple[int, int, int]] = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
    "cyan": (0, 255, 255),
    "magenta": (255, 0, 255),
    "white": (255, 255, 255),
    "orange": (255, 128, 0),
}
POSITIONS = ("top left", "top right", "bottom left", "bottom right")
NUMBERS = ("zero", "one", "two", "three", "four")

SYSTEM_MESSAGE = "a chat between a curious human and an assistant that answers questions about images."
CAPTION_PROMPTS = ("describe the image.", "what is in the picture?", "give a short caption.")

SPLITS = ("alignment", "instruction", "eval", "text")
# "text" holds image-free conversations for warming up the decoder alone

CELL = 16
SHAPE_SIZE = 12
IMAGE_SIZE = 32


@dataclass(frozen=True)
class Item:
    shape: str
    color: str
    position: str


@dataclass(frozen=True)
class Scene:
    items: Tuple[Item, ...]

    def at(self, position: str) -> Optional[Item]:
        for item in self.items:
            if item.position == position:
                return item
        return None


@dataclass
class SyntheticSpec:
    image_size: int = IMAGE_SIZE
    shapes: Tuple[str, ...] = SHAPES
    colors: Tuple[str, ...] = tuple(COLORS)
    positions: Tuple[str, ...] = POSITIONS
    max_items: int = 3
    min_turns: int = 2
    max_turns: int = 3
    counts: Dict[str, int] = field(
        default_factory=lambda: {"alignment": 64, "instruction": 64, "eval": 32, "text": 512}
    )

    def __post_init__(self):
        if self.image_size != IMAGE_SIZE:
            raise ValueError(f"the shapes renderer draws {IMAGE_SIZE}px images only")
        unknown = set(self.counts) - set(SPLITS)
        if unknown:
            raise ValueError(f"unknown splits {sorted(unknown)}")


# ---------------------------------------------------------------------------
# rendering


def shape_mask(shape: str) -> np.ndarray:
    n = SHAPE_SIZE
    yy, xx = np.mgrid[0:n, 0:n]
    c = (n - 1) / 2
    if shape == "square":
        return np.ones((n, n), dtype=bool)
    if shape == "circle":
        return (yy - c) ** 2 + (xx - c) ** 2 <= (n / 2) ** 2
    if shape == "triangle":
        return np.abs(xx - c) <= (yy + 1) / 2
    if shape == "cross":
        return (np.abs(yy - c) < 2) | (np.abs(xx - c) < 2)
    raise ValueError(f"unknown shape {shape!r}")


def _cell_origin(position: str) -> Tuple[int, int]:
    i = POSITIONS.index(position)
    return (i // 2) * CELL, (i % 2) * CELL


def render(scene: Scene) -> np.ndarray:
    """uint8 image [H, W, 3]."""
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    off = (CELL - SHAPE_SIZE) // 2
    for item in scene.items:
        y0, x0 = _cell_origin(item.position)
        region = img[y0 + off : y0 + off + SHAPE_SIZE, x0 + off : x0 + off + SHAPE_SIZE]
        region[shape_mask(item.shape)] = COLORS[item.color]
    return img


def analyze_image(pixels: np.ndarray) -> Scene:
    """Recover the scene from an [H, W, 3] uint8 (or [3, H, W] float) image."""
    img = np.asarray(pixels)
    if img.ndim == 3 and img.shape[0] == 3:
        img = np.round(np.transpose(img, (1, 2, 0)) * 255).astype(np.int64)
    img = img.astype(np.int64)
    items = []
    for position in POSITIONS:
        y0, x0 = _cell_origin(position)
        cell = img[y0 : y0 + CELL, x0 : x0 + CELL]
        lit = cell.sum(axis=-1) > 0
        if not lit.any():
            continue
        rgb = tuple(int(v) for v in cell[lit][0])
        color = min(COLORS, key=lambda k: sum(abs(a - b) for a, b in zip(COLORS[k], rgb)))
        ys, xs = np.nonzero(lit)
        box = lit[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1]
        fill = box.mean()
        mid_h, mid_w = box.shape[0] // 2, box.shape[1] // 2
        if fill > 0.99:
            shape = "square"
        elif box[-1].all() and box[0].sum() < box.shape[1] / 2:
            shape = "triangle"
        elif fill < 0.7 and box[mid_h].all() and box[:, mid_w].all():
            shape = "cross"
        else:
            shape = "circle"
        items.append(Item(shape, color, position))
    return Scene(tuple(items))


# ---------------------------------------------------------------------------
# grammar


def describe(item: Item) -> str:
    return f"a {item.color} {item.shape}"


def caption(scene: Scene) -> str:
    parts = [f"{describe(it)} at the {it.position}" for it in scene.items]
    return " and ".join(parts) + "."


def _unique(scene: Scene, shape: str) -> bool:
    return sum(it.shape == shape for it in scene.items) == 1


def candidate_questions(scene: Scene, rng: np.random.Generator) -> List[str]:
    qs = ["how many shapes are there?"]
    for it in scene.items:
        if _unique(scene, it.shape):
            qs.append(f"what color is the {it.shape}?")
        if sum((o.color, o.shape) == (it.color, it.shape) for o in scene.items) == 1:
            qs.append(f"where is the {it.color} {it.shape}?")
    for pos in POSITIONS:
        qs.append(f"what is at the {pos}?")
    shape = SHAPES[rng.integers(len(SHAPES))]
    color = tuple(COLORS)[rng.integers(len(COLORS))]
    qs.append(f"is there a {color} {shape}?")
    return qs


def answer(scene: Scene, question: str) -> str:
    """Answer a grammar question from the scene alone."""
    if question == "how many shapes are there?":
        return NUMBERS[len(scene.items)] + "."
    m = re.fullmatch(r"what color is the (\w+)\?", question)
    if m:
        matches = [it for it in scene.items if it.shape == m.group(1)]
        if len(matches) != 1:
            raise ValueError(f"ambiguous question {question!r}")
        return matches[0].color + "."
    m = re.fullmatch(r"where is the (\w+) (\w+)\?", question)
    if m:
        for it in scene.items:
            if (it.color, it.shape) == m.groups():
                return f"at the {it.position}."
        return "nowhere."
    m = re.fullmatch(r"what is at the (\w+ \w+)\?", question)
    if m:
        it = scene.at(m.group(1))
        return f"{describe(it)}." if it else "nothing."
    m = re.fullmatch(r"is there a (\w+) (\w+)\?", question)
    if m:
        return "yes." if any((it.color, it.shape) == m.groups() for it in scene.items) else "no."
    if question in CAPTION_PROMPTS:
        return caption(scene)
    raise ValueError(f"question outside the grammar: {question!r}")


def lexicon_texts() -> List[str]:
    """Every word and punctuation mark the grammar can produce, with and without a leading space."""
    texts = [SYSTEM_MESSAGE, "Human: Assistant:", *CAPTION_PROMPTS, " ".join(NUMBERS), "nothing nowhere yes no"]
    texts.append("how many shapes are there what color is the where is the what is at the is there a at the and")
    texts += [" ".join(SHAPES), " ".join(COLORS), " ".join(POSITIONS), ". ? :"]
    words = sorted({w for t in texts for w in pretokenize(t)})
    return [w.strip() for w in words] + [" " + w.strip() for w in words]


def build_vocabulary() -> Vocabulary:
    return Vocabulary.from_texts(lexicon_texts())


def random_scene(spec: SyntheticSpec, rng: np.random.Generator) -> Scene:
    n = int(rng.integers(1, spec.max_items + 1))
    cells = sorted(rng.choice(len(spec.positions), size=n, replace=False))
    items = []
    for c in cells:
        shape = spec.shapes[rng.integers(len(spec.shapes))]
        color = spec.colors[rng.integers(len(spec.colors))]
        items.append(Item(shape, color, spec.positions[c]))
    return Scene(tuple(items))


def make_record(scene: Scene, split: str, spec: SyntheticSpec, rng: np.random.Generator) -> dict:
    if split == "alignment" or (split == "text" and rng.random() < 0.5):
        prompt = CAPTION_PROMPTS[rng.integers(len(CAPTION_PROMPTS))]
        turns = [(prompt, caption(scene))]
    else:
        qs = candidate_questions(scene, rng)
        k = int(rng.integers(spec.min_turns, spec.max_turns + 1))
        picks = rng.choice(len(qs), size=min(k, len(qs)), replace=False)
        turns = [(qs[i], answer(scene, qs[i])) for i in picks]
    if split == "text":
        # the scene is spelled out where the image would be, so the decoder
        # learns to read content from context before it ever sees visual tokens
        turns[0] = (f"{turns[0][0]} {caption(scene)}", turns[0][1])
    return {"system": SYSTEM_MESSAGE, "turns": [{"human": h, "assistant": a} for h, a in turns]}


# ---------------------------------------------------------------------------
# corpus directories


def generate_corpus(out_dir, spec: Optional[SyntheticSpec] = None, seed: int = 0) -> Path:
    """Write images/, one JSON-lines file per split and vocab.txt under ``out_dir``."""
    spec = spec or SyntheticSpec()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for split in SPLITS:
        lines = []
        for i in range(spec.counts.get(split, 0)):
            scene = random_scene(spec, rng)
            rel = None
            if split != "text":
                rel = f"images/{split}_{i:05d}.png"
                Image.fromarray(render(scene), mode="RGB").save(out / rel)
            record = {"image_path": rel, **make_record(scene, split, spec, rng)}
            lines.append(json.dumps(record, sort_keys=True))
        (out / f"{split}.jsonl").write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    build_vocabulary().save(out / "vocab.txt")
    return out


def load_image(path) -> np.ndarray:
    """Pixels in [0, 1] as float [3, H, W] from a PNG or a planar tensor file."""
    path = Path(path)
    if path.suffix == ".bin":
        arr = load_tensor(path).astype(np.float64)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ValueError(f"planar image {path} has shape {arr.shape}, expected [3, H, W]")
        return arr
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.transpose(rgb, (2, 0, 1)).copy()


def read_samples(path, root=None) -> List[ConversationSample]:
    path = Path(path)
    root = Path(root) if root is not None else path.parent
    samples = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        image = load_image(root / rec["image_path"]) if rec.get("image_path") else None
        turns = [(t["human"], t["assistant"]) for t in rec["turns"]]
        samples.append(ConversationSample(image=image, system=rec["system"], turns=turns))
    return samples


def write_samples(path, records: Sequence[dict]) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records), encoding="utf-8")


@dataclass
class Corpus:
    vocab: Vocabulary
    splits: Dict[str, List[ConversationSample]]

    def __getitem__(self, split: str) -> List[ConversationSample]:
        return self.splits.get(split, [])


def load_corpus(directory) -> Corpus:
    directory = Path(directory)
    if not (directory / "vocab.txt").exists():
        raise FileNotFoundError(f"{directory} is not a corpus directory (vocab.txt missing)")
    vocab = Vocabulary.load(directory / "vocab.txt")
    splits = {}
    for split in SPLITS:
        f = directory / f"{split}.jsonl"
        splits[split] = read_samples(f, directory) if f.exists() else []
    return Corpus(vocab, splits)


def verify_corpus(directory) -> List[str]:
    """Re-derive every answer from the pixels; returns a list of inconsistencies."""
    directory = Path(directory)
    problems = []
    for split in SPLITS:
        f = directory / f"{split}.jsonl"
        if not f.exists():
            continue
        for n, line in enumerate(f.read_text(encoding="utf-8").splitlines()):
            rec = json.loads(line)
            if not rec.get("image_path"):
                continue
            with Image.open(directory / rec["image_path"]) as im:
                scene = analyze_image(np.asarray(im.convert("RGB")))
            for t in rec["turns"]:
                try:
                    expected = answer(scene, t["human"])
                except ValueError as exc:
                    problems.append(f"{split}:{n}: {exc}")
                    continue
                if expected != t["assistant"]:
                    problems.append(f"{split}:{n}: {t['human']!r} -> {t['assistant']!r}, pixels say {expected!r}")
    return problems
