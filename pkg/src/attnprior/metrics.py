"""Evaluation: answer accuracy, phrase-localization recall, grounding scores.

Recall@k follows the localization convention: a phrase counts as hit
when any of its top-k scored regions overlaps a groundtruth box with
IOU >= 0.5. Grounding score is the attention mass that the k
highest-attended regions place on groundtruth-relevant regions.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass

import numpy as np
import torch

from . import models as models_mod
from .grounder import association_scores
from .treebank import extract_referring_expressions


def iou(box_a, box_b):
    """Intersection over union of two (x1, y1, x2, y2) boxes."""
    ax1, ay1, ax2, ay2 = box_a
    bx1, by1, bx2, by2 = box_b
    if ax1 >= ax2 or ay1 >= ay2 or bx1 >= bx2 or by1 >= by2:
        raise ValueError(f"degenerate box: {tuple(box_a)} vs {tuple(box_b)}")
    ix = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    iy = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = ix * iy
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def recall_at_k(re_scores, re_gt_boxes, region_boxes, k, iou_threshold=0.5):
    """Fraction of phrases whose top-k regions hit a groundtruth box.

    re_scores: per-RE region score vectors; re_gt_boxes: per-RE lists of
    groundtruth boxes; region_boxes: one (N, 4) array shared by all REs,
    or one per RE. Ties break toward the lower region index.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(re_scores) != len(re_gt_boxes):
        raise ValueError("need one groundtruth box list per scored RE")
    shared = isinstance(region_boxes, np.ndarray) and region_boxes.ndim == 2
    hits = 0
    for idx, (scores, gt_boxes) in enumerate(zip(re_scores, re_gt_boxes)):
        boxes = region_boxes if shared else np.asarray(region_boxes[idx])
        scores = np.asarray(scores)
        if k > scores.shape[0]:
            raise ValueError(f"k={k} exceeds region count {scores.shape[0]}")
        top = np.argsort(-scores, kind="stable")[:k]
        if any(iou(boxes[j], gt) >= iou_threshold for j in top for gt in gt_boxes):
            hits += 1
    return hits / len(re_scores) if re_scores else 0.0


def grounding_score_topk(beta, relevant, k):
    """Attention mass on relevant regions among the k highest-attended."""
    beta = np.asarray(beta, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > beta.shape[0]:
        raise ValueError(f"k={k} exceeds region count {beta.shape[0]}")
    relevant = set(relevant)
    if not relevant:
        raise ValueError("relevant region set is empty")
    top = np.argsort(-beta, kind="stable")[:k]
    return float(sum(beta[j] for j in top if j in relevant))


def phrase_region_scores(net, tokens, regions):
    """Per-region score for one RE: mean over word rows of the
    row-softmaxed alignment."""
    emb = net.encode_re(list(tokens))
    logits = association_scores(emb, regions, net)
    return torch.softmax(logits, dim=1).mean(dim=0).detach().numpy()


@dataclass
class MetricsReport:
    accuracy: float
    grounding_score: dict  # k -> mean top-k score
    per_type_accuracy: dict
    recall_at: dict | None  # k -> recall, when a grounder was supplied
    count: int
    seed: int | None = None
    config_hash: str | None = None

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "grounding_score": {str(k): v for k, v in self.grounding_score.items()},
            "per_type_accuracy": self.per_type_accuracy,
            "recall_at": None
            if self.recall_at is None
            else {str(k): v for k, v in self.recall_at.items()},
            "count": self.count,
            "seed": self.seed,
            "config_hash": self.config_hash,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


DEFAULT_KS = (1, 5, 10)


def evaluate(model, instances, priors=None, grounder=None, ks=DEFAULT_KS,
             seed=None, config_hash=None, batch_size=64):
    """Full report over a dataset split.

    Grounding metrics read the final refined visual attention (the
    word-marginal of the refined matrix for joint models); instances
    with no groundtruth-relevant region (negative existence, zero
    counts) are skipped for grounding scores. Each requested k is capped
    at the region count. Recall@k is computed from the grounder's per-RE
    alignments when a grounder is supplied.
    """
    if priors is not None:
        models_mod._check_priors(instances, priors)
    n_regions = instances[0].region_set().count
    ks_eff = {k: min(k, n_regions) for k in ks}

    correct = 0
    type_hits, type_counts = {}, {}
    gscores = {k: [] for k in ks}
    rng = random.Random(0)
    with torch.no_grad():
        for batch in models_mod._bucket_batches(
            list(range(len(instances))), instances, batch_size, rng
        ):
            token_ids, feats, prior = models_mod._stack_batch(model, instances, batch, priors)
            outputs, probs = model.forward_batch(token_ids, feats, prior=prior)
            if "beta_refined" in outputs:
                beta_vis = outputs["beta_refined"][-1]
            else:
                beta_vis = outputs["joint_refined"][-1].sum(dim=1)
            pred = probs.argmax(dim=1)
            for row, idx in enumerate(batch):
                inst = instances[idx]
                hit = int(model.answers[int(pred[row])] == inst.answer)
                correct += hit
                type_hits[inst.qtype] = type_hits.get(inst.qtype, 0) + hit
                type_counts[inst.qtype] = type_counts.get(inst.qtype, 0) + 1
                relevant = inst.relevant_regions()
                if relevant:
                    beta_np = beta_vis[row].numpy()
                    for k in ks:
                        gscores[k].append(grounding_score_topk(beta_np, relevant, ks_eff[k]))

    recall = None
    if grounder is not None:
        recall = evaluate_grounding(grounder, instances, ks=ks)

    return MetricsReport(
        accuracy=correct / len(instances),
        grounding_score={k: float(np.mean(vals)) if vals else 0.0 for k, vals in gscores.items()},
        per_type_accuracy={t: type_hits[t] / type_counts[t] for t in sorted(type_counts)},
        recall_at=recall,
        count=len(instances),
        seed=seed,
        config_hash=config_hash,
    )


def evaluate_grounding(net, instances, ks=DEFAULT_KS, random_baseline=None):
    """Recall@k of per-RE groundings over every RE with groundtruth boxes.

    random_baseline, when set to a seed, replaces the grounder's scores
    with seeded random ones (the chance floor reported alongside learned
    groundings).
    """
    rng = np.random.default_rng(random_baseline) if random_baseline is not None else None
    re_scores, re_gt_boxes, re_boxes = [], [], []
    for inst in instances:
        regions = inst.region_set()
        spans = {
            (entry["span"][0], entry["span"][1]): entry["regions"]
            for entry in inst.gt_phrase_regions
        }
        for re_ in extract_referring_expressions(inst.parse_tree()):
            gt_regions = spans.get((re_.start, re_.end), [])
            if not gt_regions:
                continue
            if rng is not None:
                scores = rng.random(regions.count)
            else:
                scores = phrase_region_scores(net, re_.tokens, regions)
            re_scores.append(scores)
            re_gt_boxes.append([inst.boxes[j] for j in gt_regions])
            re_boxes.append(inst.boxes)
    n_regions = instances[0].region_set().count
    return {
        k: recall_at_k(re_scores, re_gt_boxes, re_boxes, min(k, n_regions)) for k in ks
    }


def sample_efficiency_sweep(model_factory, train_instances, val_instances,
                            train_priors, val_priors, config, fractions, seeds):
    """Baseline and prior-guided accuracy curves over supervision fractions.

    model_factory(seed) must return a fresh model. The same seed gives
    both variants the same supervised subset, so rows pair up. Returns
    one row per (fraction, seed, variant): {"fraction", "seed",
    "variant", "accuracy", "grounding_top1"}.
    """
    rows = []
    for seed in seeds:
        for fraction in fractions:
            for variant in ("baseline", "guided"):
                model = model_factory(seed)
                guided = variant == "guided"
                if guided and not config.no_pretrain_stage:
                    models_mod.pretrain_attention(model, train_instances, train_priors, config, seed)
                models_mod.finetune_vqa(
                    model, train_instances, train_priors if guided else None, config, seed,
                    supervision_fraction=fraction,
                )
                report = evaluate(
                    model, val_instances, priors=val_priors if guided else None, seed=seed
                )
                rows.append(
                    {
                        "fraction": fraction,
                        "seed": seed,
                        "variant": variant,
                        "accuracy": report.accuracy,
                        "grounding_top1": report.grounding_score[1],
                    }
                )
    return rows


def sweep_rows_to_csv(rows):
    lines = ["fraction,seed,variant,accuracy,grounding_top1"]
    for row in rows:
        lines.append(
            f"{row['fraction']},{row['seed']},{row['variant']},"
            f"{row['accuracy']:.6f},{row['grounding_top1']:.6f}"
        )
    return "\n".join(lines) + "\n"
