"""Unsupervised word-region alignment from phrase-image pairs.

A small bidirectional recurrent encoder contextualizes the words of each
referring expression; scaled dot products against projected region
features give per-word alignment logits. Training is contrastive: the
regions paired with a phrase are its positive, every other item in the
mini batch supplies negative regions. Query-wide alignment matrices are
assembled by averaging the per-RE logits over the REs containing each
word.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .treebank import ReferringExpression, extract_referring_expressions


@dataclass
class RegionSet:
    """N region feature vectors with axis-aligned boxes (x1, y1, x2, y2)."""

    features: torch.Tensor  # (N, d) float64
    boxes: np.ndarray  # (N, 4) float64

    def __post_init__(self):
        self.features = torch.as_tensor(self.features, dtype=torch.float64)
        self.boxes = np.asarray(self.boxes, dtype=np.float64)
        if self.features.dim() != 2 or self.features.shape[0] < 1:
            raise ValueError(f"features must be (N, d) with N >= 1, got {tuple(self.features.shape)}")
        if not torch.isfinite(self.features).all():
            raise ValueError("region features contain non-finite values")
        if self.boxes.shape != (self.features.shape[0], 4):
            raise ValueError(f"boxes must be (N, 4), got {self.boxes.shape}")
        if np.any(self.boxes[:, 0] >= self.boxes[:, 2]) or np.any(self.boxes[:, 1] >= self.boxes[:, 3]):
            raise ValueError("every box needs x1 < x2 and y1 < y2")

    @property
    def count(self):
        return int(self.features.shape[0])

    @property
    def dim(self):
        return int(self.features.shape[1])


@dataclass
class QueryAlignment:
    """Query-wide word-region logits plus the per-word RE counts."""

    logits: torch.Tensor  # (T, N)
    coverage: list[int] = field(default_factory=list)


class GrounderNet(nn.Module):
    """Context encoder plus the three alignment projections.

    Scores are scaled dot products of the word projection (W_w) against
    the positive region projection (W_v); the negative-path projection
    (W_v_neg) only enters the induced visual vectors of contrastive
    negatives.
    """

    def __init__(self, vocab, dim):
        super().__init__()
        if dim % 2 != 0:
            raise ValueError("dim must be even (bidirectional encoder halves it)")
        self.vocab = list(vocab)
        self.token_ids = {tok: i for i, tok in enumerate(self.vocab)}
        self.dim = dim
        self.embed = nn.Embedding(len(self.vocab), dim)
        self.rnn = nn.GRU(dim, dim // 2, batch_first=True, bidirectional=True)
        scale = 1.0 / dim**0.5
        self.W_v = nn.Parameter(torch.empty(dim, dim).uniform_(-scale, scale))
        self.W_v_neg = nn.Parameter(torch.empty(dim, dim).uniform_(-scale, scale))
        self.W_w = nn.Parameter(torch.empty(dim, dim).uniform_(-scale, scale))
        self.double()

    def lookup(self, tokens):
        ids = []
        for tok in tokens:
            if tok not in self.token_ids:
                raise KeyError(f"unknown token {tok!r}")
            ids.append(self.token_ids[tok])
        return torch.tensor(ids, dtype=torch.long)

    def encode_re(self, tokens):
        """Contextualized (m, d) embedding of one RE's tokens."""
        if not tokens:
            raise ValueError("cannot encode an empty token list")
        emb = self.embed(self.lookup(tokens)).unsqueeze(0)
        out, _ = self.rnn(emb)
        return out.squeeze(0)


def association_scores(emb, regions, net):
    """Scaled dot-product alignment logits, (m, N).

    logits[i][j] = <W_w^T w_i, W_v^T v_j> / sqrt(d)
    """
    feats = regions.features
    if emb.shape[1] != feats.shape[1]:
        raise ValueError(f"dimension mismatch: words {emb.shape[1]} vs regions {feats.shape[1]}")
    return (emb @ net.W_w) @ (feats @ net.W_v).T / emb.shape[1] ** 0.5


def induced_visual(logits, regions, proj):
    """Per-word attention-weighted sums of projected region features.

    v_i* = sum_j softmax_j(logits[i])_j * proj^T v_j
    """
    feats = regions.features
    if feats.shape[0] == 0:
        raise ValueError("need at least one region")
    if logits.shape[1] != feats.shape[0]:
        raise ValueError(f"logits cover {logits.shape[1]} regions, set has {feats.shape[0]}")
    return torch.softmax(logits, dim=1) @ (feats @ proj)


@dataclass
class ContrastiveBatch:
    """(tokens, positive regions, instance id) triples; all other items
    in the batch act as negatives for each item."""

    items: list[tuple[tuple[str, ...], RegionSet, str]]

    def __post_init__(self):
        if len(self.items) < 1:
            raise ValueError("batch must contain at least one item")


def infonce_loss(batch, net):
    """Negated contrastive objective, mean over batch items and words.

    Per word i of item r: -log( e^{s_pos} / (e^{s_pos} + sum_s e^{s_neg}) )
    where s_pos = <W_w^T w_i, v_i*> against the item's own regions and
    s_neg runs over the induced vectors from the other items' regions.
    Computed via logsumexp with max subtraction; always >= 0 and exactly
    0 when the batch has a single item (no negatives).
    """
    items = batch.items
    losses = []
    for r, (tokens, regions, _) in enumerate(items):
        emb = net.encode_re(list(tokens))
        w_proj = emb @ net.W_w  # (m, d)
        pos_logits = association_scores(emb, regions, net)
        v_pos = induced_visual(pos_logits, regions, net.W_v)
        sims = [(w_proj * v_pos).sum(dim=1)]  # positive similarity per word
        for s, (_, neg_regions, _) in enumerate(items):
            if s == r:
                continue
            neg_logits = association_scores(emb, neg_regions, net)
            v_neg = induced_visual(neg_logits, neg_regions, net.W_v_neg)
            sims.append((w_proj * v_neg).sum(dim=1))
        stacked = torch.stack(sims, dim=0)  # (1 + negatives, m)
        if not torch.isfinite(stacked).all():
            raise FloatingPointError("non-finite similarity in contrastive loss")
        loss_per_word = torch.logsumexp(stacked, dim=0) - stacked[0]
        losses.append(loss_per_word.mean())
    return torch.stack(losses).mean()


def train_grounder(dataset, config, seed):
    """Contrastive training over (tokens, regions, instance id) triples.

    Returns (net, log) where log is one {"epoch", "loss"} record per
    epoch. Deterministic given the seed; epoch 0 returns the freshly
    initialized network.
    """
    if not dataset:
        raise ValueError("grounder dataset is empty")
    vocab = sorted({tok for tokens, _, _ in dataset for tok in tokens})
    torch.manual_seed(seed)
    net = GrounderNet(vocab, config.dim)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.grounder_lr)
    order = list(range(len(dataset)))
    rng = random.Random(seed)
    log = []
    batch_size = config.contrastive_batch
    for epoch in range(config.grounder_epochs):
        rng.shuffle(order)
        epoch_losses = []
        for start in range(0, len(order), batch_size):
            chunk = [dataset[i] for i in order[start : start + batch_size]]
            batch = ContrastiveBatch(chunk)
            optimizer.zero_grad()
            loss = infonce_loss(batch, net)
            loss.backward()
            optimizer.step()
            epoch_losses.append(loss.item())
        log.append({"epoch": epoch + 1, "loss": sum(epoch_losses) / len(epoch_losses)})
    net.eval()
    return net, log


def ground_query(tokens, tree, regions, net, divisor="coverage", whole_query=False):
    """Aggregate per-RE alignment logits into a query-wide (T, N) matrix.

    divisor="coverage" averages each word's row over the REs containing
    it; divisor="total" divides every row by the total RE count (with
    zero padding outside each RE's span). Words outside every RE keep an
    all-zero row, which downstream softmaxes treat as uniform.
    whole_query=True bypasses the tree and grounds the full token span as
    one RE (phrase-extraction ablation).
    """
    T = len(tokens)
    if whole_query:
        res = [ReferringExpression(0, T - 1, tuple(tokens), "NP")]
    else:
        leaves = tree.leaves()
        if len(leaves) != T:
            raise ValueError(f"tree has {len(leaves)} leaves but query has {T} tokens")
        res = extract_referring_expressions(tree)
    if divisor not in ("coverage", "total"):
        raise ValueError(f"unknown divisor {divisor!r}")

    logits = torch.zeros((T, regions.count), dtype=torch.float64)
    counts = [0] * T
    for re_ in res:
        emb = net.encode_re(list(re_.tokens))
        scores = association_scores(emb, regions, net)
        logits[re_.start : re_.end + 1] += scores
        for i in range(re_.start, re_.end + 1):
            counts[i] += 1
    if divisor == "coverage":
        denom = torch.tensor([max(c, 1) for c in counts], dtype=torch.float64)
        logits = logits / denom[:, None]
    elif res:
        logits = logits / len(res)
    return QueryAlignment(logits=logits, coverage=counts)


def grounding_dataset_from_instances(instances, whole_query=False):
    """(RE tokens, regions, instance id) triples for contrastive training.

    The question-image pairing label passes down to every RE extracted
    from the question; whole_query=True emits one triple per question
    covering all its tokens.
    """
    triples = []
    for inst in instances:
        regions = inst.region_set()
        if whole_query:
            triples.append((tuple(inst.tokens), regions, inst.id))
            continue
        for re_ in extract_referring_expressions(inst.parse_tree()):
            triples.append((re_.tokens, regions, inst.id))
    return triples


def save_grounder(path, net, config_echo=None):
    torch.save(
        {
            "format_version": 1,
            "kind": "grounder",
            "dim": net.dim,
            "vocab": net.vocab,
            "config": config_echo or {},
            "state": net.state_dict(),
        },
        path,
    )


def load_grounder(path):
    payload = torch.load(path, weights_only=False)
    if payload.get("kind") != "grounder":
        raise ValueError(f"{path} is not a grounder checkpoint")
    net = GrounderNet(payload["vocab"], payload["dim"])
    net.load_state_dict(payload["state"])
    net.eval()
    return net
