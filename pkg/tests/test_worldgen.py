from collections import Counter

import numpy as np
import pytest
import torch

from attnprior import worldgen
from attnprior.treebank import extract_referring_expressions
from attnprior.worldgen import (
    COLORS,
    SHAPES,
    SIZES,
    SynthInstance,
    WorldConfig,
    answer_vocabulary,
    generate_world,
    interpret_question,
    load_split,
    save_dataset,
    token_vocabulary,
)

SMALL = WorldConfig(train_count=80, val_count=20)


@pytest.fixture(scope="module")
def small_world():
    return generate_world(SMALL, seed=11)


class TestGeneration:
    def test_deterministic_bytes(self, tmp_path, small_world):
        dir_a, dir_b = tmp_path / "a", tmp_path / "b"
        save_dataset(dir_a, small_world, SMALL)
        save_dataset(dir_b, generate_world(SMALL, seed=11), SMALL)
        for name in ("train.jsonl", "val.jsonl", "meta.json"):
            assert (dir_a / name).read_bytes() == (dir_b / name).read_bytes()

    def test_different_seed_differs(self, small_world):
        other = generate_world(SMALL, seed=12)
        assert other["train"][0].to_json() != small_world["train"][0].to_json()

    def test_oracle_interpreter_full_agreement(self, small_world):
        for split in small_world.values():
            for inst in split:
                got = interpret_question(
                    inst.tokens, inst.boxes, inst.attributes, SMALL.grid_size
                )
                assert got == inst.answer, inst.id

    def test_tree_leaves_match_tokens(self, small_world):
        for inst in small_world["train"]:
            assert inst.parse_tree().leaves() == inst.tokens

    def test_unique_referent_row_sums(self, small_world):
        for inst in small_world["train"]:
            if inst.qtype == worldgen.QTYPE_ATTRIBUTE:
                sums = set(inst.gt_matrix().sum(axis=1).tolist())
                assert sums <= {0, 1}

    def test_every_re_listed_in_phrase_regions(self, small_world):
        for inst in small_world["train"]:
            spans = {(e["span"][0], e["span"][1]) for e in inst.gt_phrase_regions}
            for re_ in extract_referring_expressions(inst.parse_tree()):
                assert (re_.start, re_.end) in spans, (inst.id, re_)

    def test_tokens_and_answers_in_vocab(self, small_world):
        vocab = set(token_vocabulary())
        answers = set(answer_vocabulary(SMALL.n_regions))
        for inst in small_world["train"]:
            assert set(inst.tokens) <= vocab
            assert inst.answer in answers

    def test_all_qtypes_appear(self, small_world):
        counts = Counter(inst.qtype for inst in small_world["train"])
        assert set(counts) == {
            worldgen.QTYPE_ATTRIBUTE,
            worldgen.QTYPE_EXISTENCE,
            worldgen.QTYPE_COUNT,
        }

    def test_feature_blocks_recover_attributes(self, small_world):
        for inst in small_world["train"][:20]:
            for j, attr in enumerate(inst.attributes):
                vec = inst.features[j]
                assert COLORS[int(np.argmax(vec[: len(COLORS)]))] == attr["color"]
                off = len(COLORS)
                assert SHAPES[int(np.argmax(vec[off : off + len(SHAPES)]))] == attr["shape"]
                off += len(SHAPES)
                assert SIZES[int(np.argmax(vec[off : off + len(SIZES)]))] == attr["size"]

    def test_grid_boxes_disjoint_exact_iou(self, small_world):
        from attnprior.metrics import iou

        inst = small_world["train"][0]
        for a in range(len(inst.boxes)):
            for b in range(len(inst.boxes)):
                expected = 1.0 if a == b else 0.0
                assert iou(inst.boxes[a], inst.boxes[b]) == pytest.approx(expected)

    def test_dim_too_small_rejected(self):
        cfg = WorldConfig(dim=8, train_count=1, val_count=1)
        with pytest.raises(ValueError):
            generate_world(cfg, seed=0)

    def test_too_many_regions_rejected(self):
        cfg = WorldConfig(grid_size=2, n_regions=5, train_count=1, val_count=1)
        with pytest.raises(ValueError):
            generate_world(cfg, seed=0)

    def test_retry_exhaustion_raises(self, monkeypatch):
        monkeypatch.setattr(worldgen, "_TEMPLATES", (lambda regions, rng: None,))
        monkeypatch.setattr(worldgen, "TEMPLATE_WEIGHTS", (1.0,))
        with pytest.raises(RuntimeError):
            worldgen._make_instance("x", SMALL, np.random.default_rng(0))


class TestJitteredBoxes:
    def test_cells_recoverable_and_boxes_valid(self):
        cfg = WorldConfig(train_count=30, val_count=5, box_jitter=True)
        splits = generate_world(cfg, seed=3)
        for inst in splits["train"]:
            assert np.all(inst.boxes[:, 0] < inst.boxes[:, 2])
            assert np.all(inst.boxes[:, 1] < inst.boxes[:, 3])
            got = interpret_question(inst.tokens, inst.boxes, inst.attributes, cfg.grid_size)
            assert got == inst.answer

    def test_jitter_produces_fractional_iou(self):
        from attnprior.metrics import iou

        cfg = WorldConfig(train_count=40, val_count=5, box_jitter=True)
        splits = generate_world(cfg, seed=4)
        fractional = 0
        for inst in splits["train"]:
            for a in range(len(inst.boxes)):
                for b in range(a + 1, len(inst.boxes)):
                    val = iou(inst.boxes[a], inst.boxes[b])
                    if 0.0 < val < 1.0:
                        fractional += 1
        assert fractional > 0


class TestSerialization:
    def test_round_trip(self, tmp_path, small_world):
        save_dataset(tmp_path / "d", small_world, SMALL)
        loaded = load_split(tmp_path / "d", "train")
        orig = small_world["train"]
        assert len(loaded) == len(orig)
        for a, b in zip(loaded, orig):
            assert a.id == b.id and a.tokens == b.tokens and a.answer == b.answer
            assert np.array_equal(a.features, b.features)
            assert np.array_equal(a.boxes, b.boxes)
            assert a.gt_alignment == b.gt_alignment

    def test_missing_split_raises(self, tmp_path, small_world):
        save_dataset(tmp_path / "d", small_world, SMALL)
        with pytest.raises(FileNotFoundError):
            load_split(tmp_path / "d", "test")

    def test_region_set_shapes(self, small_world):
        rs = small_world["train"][0].region_set()
        assert rs.count == SMALL.n_regions
        assert rs.dim == SMALL.dim
        assert rs.features.dtype == torch.float64


def test_interpreter_rejects_garbage():
    with pytest.raises(ValueError):
        interpret_question(["hello", "world"], np.zeros((1, 4)), [{}], 4)
