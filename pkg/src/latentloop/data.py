"""Synthetic multimodal task generator.

An image is a grid of cells, each either empty or holding a colored shape;
patch features encode (shape one-hot, color one-hot, intensity).  Questions,
step-by-step rationales, and answers are deterministic functions of the
scene, so the generator doubles as its own ground-truth oracle.  Three task
families (counting / position / relation) and three target templates
(caption / instruction / rationale) cover the curriculum stages.

Archives serialize to JSON with sorted keys: identical (count, seed) inputs
produce byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetError
from .rng import stream

# -- vocabulary ---------------------------------------------------------------

PAD, EOS, BOT, EOT, NEWLINE = 0, 1, 2, 3, 4
DIGIT0 = 5  # digits 0..9 occupy ids 5..14
Q_COUNT, Q_SIDE, Q_REL, DESCRIBE = 15, 16, 17, 18
SQUARE, CIRCLE, TRIANGLE, CROSS = 19, 20, 21, 22
RED, GREEN, BLUE = 23, 24, 25
ROW, SUM, COL, AT = 26, 27, 28, 29
LEFT, RIGHT, ABOVE, BELOW = 30, 31, 32, 33

VOCAB_SIZE = 64
SHAPES = (SQUARE, CIRCLE, TRIANGLE, CROSS)
COLORS = (RED, GREEN, BLUE)
FAMILIES = ("counting", "position", "relation")
TEMPLATES = ("caption", "instruction", "rationale")
D_PATCH = 8  # 4 shape + 3 color + 1 intensity

TOKEN_NAMES = {
    PAD: "<pad>", EOS: "<eos>", BOT: "<|bot|>", EOT: "<|eot|>", NEWLINE: "\\n",
    Q_COUNT: "count", Q_SIDE: "side", Q_REL: "where", DESCRIBE: "describe",
    SQUARE: "square", CIRCLE: "circle", TRIANGLE: "triangle", CROSS: "cross",
    RED: "red", GREEN: "green", BLUE: "blue",
    ROW: "row", SUM: "total", COL: "col", AT: "at",
    LEFT: "left", RIGHT: "right", ABOVE: "above", BELOW: "below",
}
TOKEN_NAMES.update({DIGIT0 + d: str(d) for d in range(10)})


def digit(n: int) -> int:
    if not (0 <= n <= 9):
        raise ValueError(f"cannot encode {n} as a single digit token")
    return DIGIT0 + n


def decode_tokens(ids) -> str:
    return " ".join(TOKEN_NAMES.get(int(i), f"#{int(i)}") for i in ids)


@dataclass
class SyntheticExample:
    image_patches: np.ndarray  # [N_v, D_PATCH]
    question_ids: list
    rationale_ids: list
    answer_ids: list  # answer tokens, eos-terminated
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.rationale_ids) < 1:
            raise DatasetError("rationale must be non-empty")

    @property
    def y_ids(self) -> list:
        return list(self.rationale_ids) + list(self.answer_ids)


@dataclass
class Scene:
    grid_h: int
    grid_w: int
    cells: list  # (row, col, shape, color, intensity)

    def patches(self) -> np.ndarray:
        out = np.zeros((self.grid_h * self.grid_w, D_PATCH))
        for r, c, shape, color, inten in self.cells:
            row = out[r * self.grid_w + c]
            row[SHAPES.index(shape)] = 1.0
            row[4 + COLORS.index(color)] = 1.0
            row[7] = inten
        return out

    def count(self, shape: int, color: int) -> int:
        return sum(1 for _, _, s, c, _ in self.cells if s == shape and c == color)

    def row_counts(self, shape: int, color: int) -> list:
        counts = [0] * self.grid_h
        for r, _, s, c, _ in self.cells:
            if s == shape and c == color:
                counts[r] += 1
        return counts


def _random_scene(rng, grid_h, grid_w, shape, color, count, n_distract) -> Scene:
    total = count + n_distract
    flat = rng.choice(grid_h * grid_w, size=total, replace=False)
    cells = []
    for i, pos in enumerate(flat):
        r, c = int(pos) // grid_w, int(pos) % grid_w
        if i < count:
            cells.append((r, c, shape, color, 1.0))
        else:
            others = [(s, k) for s in SHAPES for k in COLORS if (s, k) != (shape, color)]
            s, k = others[int(rng.integers(len(others)))]
            cells.append((r, c, s, k, 1.0))
    return Scene(grid_h, grid_w, sorted(cells))


def _counting_example(rng, grid_h, grid_w, template, image_id, question_id) -> SyntheticExample:
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    color = COLORS[int(rng.integers(len(COLORS)))]
    count = int(rng.integers(1, 7))
    scene = _random_scene(rng, grid_h, grid_w, shape, color, count, int(rng.integers(0, 5)))
    question = [Q_COUNT, shape, color]
    if template == "caption":
        question = [DESCRIBE]
        rationale = [digit(count)]
        answer = [shape, color, EOS]
    elif template == "instruction":
        rationale = [SUM, digit(count)]
        answer = [digit(count), EOS]
    else:  # rationale-annotated: per-row counts, a newline, then the total
        rationale = [ROW] + [digit(n) for n in scene.row_counts(shape, color)] + [NEWLINE, SUM]
        answer = [digit(count), EOS]
    return SyntheticExample(
        image_patches=scene.patches(),
        question_ids=question,
        rationale_ids=rationale,
        answer_ids=answer,
        meta={
            "family": "counting", "template": template, "count": count,
            "shape": shape, "color": color, "cells": scene.cells,
            "image_id": image_id, "question_id": question_id,
            "grid_h": grid_h, "grid_w": grid_w,
        },
    )


def _position_example(rng, grid_h, grid_w, template, image_id, question_id) -> SyntheticExample:
    if grid_w > 10:
        raise ConfigError(f"position family encodes single-digit columns; grid width {grid_w} > 10")
    r, c = int(rng.integers(grid_h)), int(rng.integers(grid_w))
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    color = COLORS[int(rng.integers(len(COLORS)))]
    scene = Scene(grid_h, grid_w, [(r, c, shape, color, 1.0)])
    side = LEFT if c < grid_w / 2 else RIGHT
    question = [Q_SIDE, shape, color]
    if template == "caption":
        question = [DESCRIBE]
        rationale = [digit(c)]
        answer = [shape, color, EOS]
    else:
        rationale = [COL, digit(c)]
        answer = [side, EOS]
    return SyntheticExample(
        image_patches=scene.patches(),
        question_ids=question,
        rationale_ids=rationale,
        answer_ids=answer,
        meta={
            "family": "position", "template": template, "col": c, "row": r,
            "side": side, "shape": shape, "color": color, "cells": scene.cells,
            "image_id": image_id, "question_id": question_id,
            "grid_h": grid_h, "grid_w": grid_w,
        },
    )


def _relation_example(rng, grid_h, grid_w, template, image_id, question_id) -> SyntheticExample:
    if max(grid_h, grid_w) > 10:
        raise ConfigError(f"relation family encodes single-digit coordinates; grid {grid_h}x{grid_w} too large")
    flat = rng.choice(grid_h * grid_w, size=2, replace=False)
    (r1, c1), (r2, c2) = [(int(p) // grid_w, int(p) % grid_w) for p in flat]
    color1 = COLORS[int(rng.integers(len(COLORS)))]
    color2 = COLORS[int(rng.integers(len(COLORS)))]
    scene = Scene(grid_h, grid_w, sorted([(r1, c1, SQUARE, color1, 1.0), (r2, c2, CIRCLE, color2, 1.0)]))
    dr, dc = r1 - r2, c1 - c2
    if abs(dr) >= abs(dc):  # vertical wins ties
        rel = ABOVE if dr < 0 else BELOW
    else:
        rel = LEFT if dc < 0 else RIGHT
    question = [Q_REL, SQUARE, CIRCLE]
    if template == "caption":
        question = [DESCRIBE]
        rationale = [digit(r1)]
        answer = [SQUARE, CIRCLE, EOS]
    else:
        rationale = [AT, digit(r1), digit(c1), AT, digit(r2), digit(c2)]
        answer = [rel, EOS]
    return SyntheticExample(
        image_patches=scene.patches(),
        question_ids=question,
        rationale_ids=rationale,
        answer_ids=answer,
        meta={
            "family": "relation", "template": template, "relation": rel,
            "cells": scene.cells, "image_id": image_id, "question_id": question_id,
            "grid_h": grid_h, "grid_w": grid_w,
        },
    )


_FAMILY_FN = {"counting": _counting_example, "position": _position_example, "relation": _relation_example}


def gen_dataset(count: int, family: str, seed: int, grid_h: int = 8, grid_w: int = 8, template: str = "rationale"):
    """Generate `count` examples; deterministic in every argument."""
    if count < 1:
        raise ConfigError(f"dataset size must be >= 1, got {count}")
    if family not in FAMILIES:
        raise ConfigError(f"unknown task family {family!r}; expected one of {FAMILIES}")
    if template not in TEMPLATES:
        raise ConfigError(f"unknown template {template!r}; expected one of {TEMPLATES}")
    fn = _FAMILY_FN[family]
    return [
        fn(stream(seed, "data", family, template, i), grid_h, grid_w, template, image_id=i, question_id=0)
        for i in range(count)
    ]


def gen_probe_grid(n_images: int, n_questions: int, seed: int, grid_h: int = 8, grid_w: int = 8):
    """Crossed (image x question) counting examples for the pairing probes.

    Question j always asks for the count of the j-th (shape, color) combo, so
    the same question recurs across images and every image answers several
    questions; counts of absent combos are zero.
    """
    if n_images < 2 or n_questions < 2:
        raise DatasetError(f"probe grid needs >= 2 images and >= 2 questions, got {n_images}x{n_questions}")
    combos = [(s, c) for s in SHAPES for c in COLORS]
    if n_questions > len(combos):
        raise ConfigError(f"at most {len(combos)} distinct questions available, asked for {n_questions}")
    examples = []
    for i in range(n_images):
        rng = stream(seed, "probe_scene", i)
        cells = []
        occupied = rng.choice(grid_h * grid_w, size=int(rng.integers(4, 13)), replace=False)
        for pos in occupied:
            s, c = combos[int(rng.integers(len(combos)))]
            cells.append((int(pos) // grid_w, int(pos) % grid_w, s, c, 1.0))
        scene = Scene(grid_h, grid_w, sorted(cells))
        for j in range(n_questions):
            shape, color = combos[j]
            count = scene.count(shape, color)
            examples.append(
                SyntheticExample(
                    image_patches=scene.patches(),
                    question_ids=[Q_COUNT, shape, color],
                    rationale_ids=[ROW] + [digit(min(n, 9)) for n in scene.row_counts(shape, color)] + [NEWLINE, SUM],
                    answer_ids=[digit(min(count, 9)), EOS],
                    meta={
                        "family": "counting", "template": "rationale", "count": count,
                        "shape": shape, "color": color, "cells": scene.cells,
                        "image_id": i, "question_id": j, "grid_h": grid_h, "grid_w": grid_w,
                    },
                )
            )
    return examples


# -- archive I/O ---------------------------------------------------------------


def save_archive(examples, path):
    payload = {
        "version": 1,
        "d_patch": D_PATCH,
        "examples": [
            {
                "image_patches": ex.image_patches.tolist(),
                "question_ids": [int(i) for i in ex.question_ids],
                "rationale_ids": [int(i) for i in ex.rationale_ids],
                "answer_ids": [int(i) for i in ex.answer_ids],
                "meta": _jsonable(ex.meta),
            }
            for ex in examples
        ],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8")


def load_archive(path):
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("version") != 1:
        raise DatasetError(f"unsupported archive version {payload.get('version')!r} in {path}")
    out = []
    for rec in payload["examples"]:
        meta = dict(rec["meta"])
        if "cells" in meta:
            meta["cells"] = [tuple(c) for c in meta["cells"]]
        out.append(
            SyntheticExample(
                image_patches=np.asarray(rec["image_patches"], dtype=np.float64),
                question_ids=list(rec["question_ids"]),
                rationale_ids=list(rec["rationale_ids"]),
                answer_ids=list(rec["answer_ids"]),
                meta=meta,
            )
        )
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj
