"""Synthetic shape-world dataset with known word-region alignments.

Scenes place N attributed regions (color, shape, size) in distinct cells
of a unit grid; region features are attribute one-hot blocks plus box
coordinates plus seeded Gaussian noise. Questions come from four
templates (attribute lookup, relational attribute lookup, existence,
counting), each with a hand-written bracketed constituency tree and
exact groundtruth alignments.

``interpret_question`` re-derives every answer from the question tokens
and the stored scene, through a code path independent of generation, so
datasets can be verified end to end.

Relation semantics are grid-based: "left"/"right" compare cell columns,
"above"/"below" compare cell rows, row 0 at the top. Box jitter never
moves a box center out of its cell, so cell indices stay recoverable
from box centers.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .grounder import RegionSet
from .treebank import parse_bracketed

COLORS = ("red", "blue", "green", "yellow", "gray")
SHAPES = ("circle", "square", "triangle", "star")
SIZES = ("small", "large")
PLURALS = {"circle": "circles", "square": "squares", "triangle": "triangles", "star": "stars"}
SINGULARS = {v: k for k, v in PLURALS.items()}
RELATIONS = ("left", "right", "above", "below")

FUNCTION_WORDS = ("what", "color", "is", "the", "there", "a", "how", "many", "are", "of")

QTYPE_ATTRIBUTE = "attribute"
QTYPE_EXISTENCE = "existence"
QTYPE_COUNT = "count"

# (attribute-simple, attribute-relational, existence, counting)
TEMPLATE_WEIGHTS = (0.3, 0.2, 0.25, 0.25)


def token_vocabulary():
    """Fixed question vocabulary, independent of any sampled dataset."""
    vocab = set(FUNCTION_WORDS) | set(COLORS) | set(SHAPES) | set(SIZES)
    vocab |= set(PLURALS.values()) | set(RELATIONS)
    return sorted(vocab)


def answer_vocabulary(n_regions):
    """Colors, yes/no, and counts up to the region budget."""
    return list(COLORS) + ["yes", "no"] + [str(i) for i in range(n_regions + 1)]


@dataclass
class WorldConfig:
    grid_size: int = 4
    n_regions: int = 8
    dim: int = 32
    feature_noise: float = 0.1
    train_count: int = 5000
    val_count: int = 1000
    box_jitter: bool = False


@dataclass
class SynthInstance:
    id: str
    tokens: list[str]
    tree: str
    features: np.ndarray  # (N, d)
    boxes: np.ndarray  # (N, 4)
    answer: str
    gt_alignment: list[list[int]]  # sparse (word, region) pairs
    gt_phrase_regions: list[dict]  # {"span": [s, e], "regions": [...]}
    qtype: str
    attributes: list[dict]  # per region {"color", "shape", "size"}
    _parsed: object = field(default=None, repr=False, compare=False)

    def region_set(self):
        return RegionSet(features=torch.as_tensor(self.features), boxes=self.boxes)

    def parse_tree(self):
        if self._parsed is None:
            self._parsed = parse_bracketed(self.tree)
        return self._parsed

    def gt_matrix(self):
        mat = np.zeros((len(self.tokens), self.boxes.shape[0]), dtype=np.int64)
        for i, j in self.gt_alignment:
            mat[i, j] = 1
        return mat

    def relevant_regions(self):
        return sorted({j for _, j in self.gt_alignment})

    def to_json(self):
        return json.dumps(
            {
                "id": self.id,
                "tokens": self.tokens,
                "tree": self.tree,
                "features": [float(x) for x in self.features.reshape(-1)],
                "boxes": self.boxes.tolist(),
                "answer": self.answer,
                "gt_alignment": self.gt_alignment,
                "gt_phrase_regions": self.gt_phrase_regions,
                "qtype": self.qtype,
                "attributes": self.attributes,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line, dim):
        rec = json.loads(line)
        n = len(rec["boxes"])
        return cls(
            id=rec["id"],
            tokens=rec["tokens"],
            tree=rec["tree"],
            features=np.array(rec["features"], dtype=np.float64).reshape(n, dim),
            boxes=np.array(rec["boxes"], dtype=np.float64),
            answer=rec["answer"],
            gt_alignment=[list(pair) for pair in rec["gt_alignment"]],
            gt_phrase_regions=rec["gt_phrase_regions"],
            qtype=rec["qtype"],
            attributes=rec["attributes"],
        )


@dataclass
class _Region:
    row: int
    col: int
    color: str
    shape: str
    size: str


def _region_features(regions, boxes, config, rng):
    """One-hot attribute blocks + box coordinates, zero-padded, noised."""
    base_len = len(COLORS) + len(SHAPES) + len(SIZES) + 4
    if config.dim < base_len:
        raise ValueError(f"dim {config.dim} cannot hold the {base_len}-wide feature layout")
    feats = np.zeros((len(regions), config.dim))
    for j, reg in enumerate(regions):
        off = 0
        feats[j, off + COLORS.index(reg.color)] = 1.0
        off += len(COLORS)
        feats[j, off + SHAPES.index(reg.shape)] = 1.0
        off += len(SHAPES)
        feats[j, off + SIZES.index(reg.size)] = 1.0
        off += len(SIZES)
        feats[j, off : off + 4] = boxes[j]
    feats += rng.normal(0.0, config.feature_noise, size=feats.shape)
    return np.round(feats, 6)


def _sample_scene(config, rng):
    G = config.grid_size
    if config.n_regions > G * G:
        raise ValueError(f"cannot place {config.n_regions} regions on a {G}x{G} grid")
    cells = rng.choice(G * G, size=config.n_regions, replace=False)
    regions = []
    boxes = np.zeros((config.n_regions, 4))
    for j, cell in enumerate(cells):
        row, col = int(cell) // G, int(cell) % G
        regions.append(
            _Region(
                row=row,
                col=col,
                color=COLORS[rng.integers(len(COLORS))],
                shape=SHAPES[rng.integers(len(SHAPES))],
                size=SIZES[rng.integers(len(SIZES))],
            )
        )
        cx, cy = (col + 0.5) / G, (row + 0.5) / G
        half = 0.5 / G
        if config.box_jitter:
            cx += rng.uniform(-0.25, 0.25) / G
            cy += rng.uniform(-0.25, 0.25) / G
            half *= rng.uniform(0.7, 1.0)
        boxes[j] = (cx - half, cy - half, cx + half, cy + half)
    return regions, np.round(boxes, 6)


def _in_relation(target, anchor, rel):
    if rel == "left":
        return target.col < anchor.col
    if rel == "right":
        return target.col > anchor.col
    if rel == "above":
        return target.row < anchor.row
    if rel == "below":
        return target.row > anchor.row
    raise ValueError(f"unknown relation {rel!r}")


def _attr_counts(regions):
    counts = {}
    for reg in regions:
        counts[(reg.size, reg.shape)] = counts.get((reg.size, reg.shape), 0) + 1
    return counts


def _choice(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def _try_attribute_simple(regions, rng):
    counts = _attr_counts(regions)
    unique = [key for key, c in counts.items() if c == 1]
    if not unique:
        return None
    size, shape = _choice(rng, sorted(unique))
    target = next(j for j, r in enumerate(regions) if (r.size, r.shape) == (size, shape))
    tokens = ["what", "color", "is", "the", size, shape]
    tree = (
        "(SBARQ (WHNP (WP what) (NN color)) "
        f"(SQ (VBZ is) (NP (DT the) (JJ {size}) (NN {shape}))))"
    )
    return {
        "tokens": tokens,
        "tree": tree,
        "answer": regions[target].color,
        "qtype": QTYPE_ATTRIBUTE,
        "word_refs": {3: [target], 4: [target], 5: [target]},
        "phrase_regions": [
            {"span": [0, 1], "regions": []},
            {"span": [3, 5], "regions": [target]},
        ],
    }


def _try_attribute_relational(regions, rng):
    counts = _attr_counts(regions)
    candidates = []
    for a, anchor in enumerate(regions):
        if counts[(anchor.size, anchor.shape)] != 1:
            continue
        for rel in RELATIONS:
            related = [j for j, r in enumerate(regions) if j != a and _in_relation(r, anchor, rel)]
            local = {}
            for j in related:
                key = (regions[j].size, regions[j].shape)
                local.setdefault(key, []).append(j)
            for key, members in local.items():
                if len(members) == 1:
                    candidates.append((members[0], rel, a, counts[key]))
    if not candidates:
        return None
    candidates.sort(key=lambda c: (c[0], c[1], c[2]))
    # prefer targets whose (size, shape) is ambiguous scene-wide: the
    # relation, not the attributes alone, must disambiguate them
    hard = [c for c in candidates if c[3] > 1]
    target, rel, a, _ = _choice(rng, hard if hard else candidates)
    t_reg, a_reg = regions[target], regions[a]
    rel_tokens = [rel, "of"] if rel in ("left", "right") else [rel]
    tokens = ["what", "color", "is", "the", t_reg.size, t_reg.shape] + rel_tokens + [
        "the", a_reg.size, a_reg.shape,
    ]
    anchor_np = f"(NP (DT the) (JJ {a_reg.size}) (NN {a_reg.shape}))"
    if len(rel_tokens) == 2:
        pp = f"(PP (RB {rel}) (IN of) {anchor_np})"
    else:
        pp = f"(PP (IN {rel}) {anchor_np})"
    tree = (
        "(SBARQ (WHNP (WP what) (NN color)) "
        f"(SQ (VBZ is) (NP (NP (DT the) (JJ {t_reg.size}) (NN {t_reg.shape})) {pp})))"
    )
    anchor_start = 6 + len(rel_tokens)
    word_refs = {3: [target], 4: [target], 5: [target]}
    for i in range(anchor_start, anchor_start + 3):
        word_refs[i] = [a]
    return {
        "tokens": tokens,
        "tree": tree,
        "answer": t_reg.color,
        "qtype": QTYPE_ATTRIBUTE,
        "word_refs": word_refs,
        "phrase_regions": [
            {"span": [0, 1], "regions": []},
            {"span": [3, len(tokens) - 1], "regions": [target]},
            {"span": [3, 5], "regions": [target]},
            {"span": [anchor_start, anchor_start + 2], "regions": [a]},
        ],
    }


def _try_existence(regions, rng):
    if rng.uniform() < 0.5:
        reg = _choice(rng, regions)
        color, shape = reg.color, reg.shape
    else:
        present = {(r.color, r.shape) for r in regions}
        absent = sorted(
            (c, s) for c in COLORS for s in SHAPES if (c, s) not in present
        )
        if not absent:
            return None
        color, shape = _choice(rng, absent)
    matches = [j for j, r in enumerate(regions) if (r.color, r.shape) == (color, shape)]
    tokens = ["is", "there", "a", color, shape]
    tree = f"(SQ (VBZ is) (EX there) (NP (DT a) (JJ {color}) (NN {shape})))"
    return {
        "tokens": tokens,
        "tree": tree,
        "answer": "yes" if matches else "no",
        "qtype": QTYPE_EXISTENCE,
        "word_refs": {i: list(matches) for i in (2, 3, 4)},
        "phrase_regions": [{"span": [2, 4], "regions": matches}],
    }


def _try_count(regions, rng):
    # bias toward attributes actually in the scene so counts are not
    # dominated by zero answers
    if rng.uniform() < 0.7:
        reg = _choice(rng, regions)
        color, shape = reg.color, reg.shape
    else:
        color, shape = _choice(rng, COLORS), _choice(rng, SHAPES)
    matches = [j for j, r in enumerate(regions) if (r.color, r.shape) == (color, shape)]
    tokens = ["how", "many", color, PLURALS[shape], "are", "there"]
    tree = (
        f"(SBARQ (WHNP (WHADJP (WRB how) (JJ many)) (JJ {color}) (NNS {PLURALS[shape]})) "
        "(SQ (VBP are) (EX there)))"
    )
    return {
        "tokens": tokens,
        "tree": tree,
        "answer": str(len(matches)),
        "qtype": QTYPE_COUNT,
        "word_refs": {2: list(matches), 3: list(matches)},
        "phrase_regions": [{"span": [0, 3], "regions": matches}],
    }


_TEMPLATES = (_try_attribute_simple, _try_attribute_relational, _try_existence, _try_count)


def _make_instance(inst_id, config, rng, max_retries=50):
    weights = np.asarray(TEMPLATE_WEIGHTS) / sum(TEMPLATE_WEIGHTS)
    for _ in range(max_retries):
        regions, boxes = _sample_scene(config, rng)
        template = _TEMPLATES[int(rng.choice(len(_TEMPLATES), p=weights))]
        spec = template(regions, rng)
        if spec is None:
            continue
        features = _region_features(regions, boxes, config, rng)
        alignment = sorted(
            [i, j] for i, refs in spec["word_refs"].items() for j in refs
        )
        return SynthInstance(
            id=inst_id,
            tokens=spec["tokens"],
            tree=spec["tree"],
            features=features,
            boxes=boxes,
            answer=spec["answer"],
            gt_alignment=alignment,
            gt_phrase_regions=spec["phrase_regions"],
            qtype=spec["qtype"],
            attributes=[
                {"color": r.color, "shape": r.shape, "size": r.size} for r in regions
            ],
        )
    raise RuntimeError(f"could not satisfy any template after {max_retries} scenes")


def generate_world(config, seed):
    """Deterministic {"train": [...], "val": [...]} instance lists."""
    rng = np.random.default_rng(seed)
    splits = {}
    for split, count in (("train", config.train_count), ("val", config.val_count)):
        splits[split] = [
            _make_instance(f"{split}-{i:06d}", config, rng) for i in range(count)
        ]
    return splits


# ---------------------------------------------------------------------------
# Independent answer interpreter (verification oracle).


def _cell_of(box, grid_size):
    cx, cy = (box[0] + box[2]) / 2.0, (box[1] + box[3]) / 2.0
    col = min(int(cx * grid_size), grid_size - 1)
    row = min(int(cy * grid_size), grid_size - 1)
    return row, col


def _cells_in_relation(cell_t, cell_a, rel):
    if rel == "left":
        return cell_t[1] < cell_a[1]
    if rel == "right":
        return cell_t[1] > cell_a[1]
    if rel == "above":
        return cell_t[0] < cell_a[0]
    return cell_t[0] > cell_a[0]


def interpret_question(tokens, boxes, attributes, grid_size):
    """Re-derive the answer from tokens and the stored scene.

    Works purely from the serialized instance fields (tokens, boxes,
    attributes); raises if the question is malformed or a uniqueness
    assumption fails.
    """
    cells = [_cell_of(box, grid_size) for box in np.asarray(boxes)]

    def matching(size=None, shape=None, color=None, among=None):
        idxs = range(len(attributes)) if among is None else among
        out = []
        for j in idxs:
            attr = attributes[j]
            if size is not None and attr["size"] != size:
                continue
            if shape is not None and attr["shape"] != shape:
                continue
            if color is not None and attr["color"] != color:
                continue
            out.append(j)
        return out

    if tokens[:2] == ["what", "color"]:
        rel = next((t for t in tokens if t in RELATIONS), None)
        size1, shape1 = tokens[4], tokens[5]
        if rel is None:
            found = matching(size=size1, shape=shape1)
            if len(found) != 1:
                raise ValueError(f"expected unique referent, found {len(found)}")
            return attributes[found[0]]["color"]
        size2, shape2 = tokens[-2], tokens[-1]
        anchors = matching(size=size2, shape=shape2)
        if len(anchors) != 1:
            raise ValueError(f"expected unique anchor, found {len(anchors)}")
        related = [
            j for j in range(len(attributes))
            if j != anchors[0] and _cells_in_relation(cells[j], cells[anchors[0]], rel)
        ]
        found = matching(size=size1, shape=shape1, among=related)
        if len(found) != 1:
            raise ValueError(f"expected unique related referent, found {len(found)}")
        return attributes[found[0]]["color"]

    if tokens[:3] == ["is", "there", "a"]:
        return "yes" if matching(color=tokens[3], shape=tokens[4]) else "no"

    if tokens[:2] == ["how", "many"]:
        shape = SINGULARS[tokens[3]]
        return str(len(matching(color=tokens[2], shape=shape)))

    raise ValueError(f"unrecognized question pattern: {' '.join(tokens)}")


# ---------------------------------------------------------------------------
# Dataset files: JSON-lines per split plus a meta.json sidecar.


def save_dataset(out_dir, splits, config):
    os.makedirs(out_dir, exist_ok=True)
    for split, instances in splits.items():
        with open(os.path.join(out_dir, f"{split}.jsonl"), "w") as fh:
            for inst in instances:
                fh.write(inst.to_json() + "\n")
    meta = {
        "vocab": token_vocabulary(),
        "answers": answer_vocabulary(config.n_regions),
        "dim": config.dim,
        "n_regions": config.n_regions,
        "grid_size": config.grid_size,
        "feature_noise": config.feature_noise,
        "box_jitter": config.box_jitter,
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_meta(data_dir):
    with open(os.path.join(data_dir, "meta.json")) as fh:
        return json.load(fh)


def load_split(data_dir, split):
    meta = load_meta(data_dir)
    path = os.path.join(data_dir, f"{split}.jsonl")
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as fh:
        return [SynthInstance.from_json(line, meta["dim"]) for line in fh]
