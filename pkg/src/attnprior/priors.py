"""Attention priors from word-region alignment logits, plus KL losses.

An alignment matrix (T words x N regions, raw logits) becomes three
simplex-valued priors: a linguistic vector (length T), a visual vector
(length N), and a jointly normalized T x N matrix. The KL losses here
drive stage-1 attention pre-training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import torch

KL_FLOOR = 1e-8


@dataclass
class AttentionPrior:
    """Simplex priors for one query-image pair."""

    alpha_star: torch.Tensor  # (T,)
    beta_star: torch.Tensor  # (N,)
    joint_star: torch.Tensor  # (T, N), sums to 1 over all cells

    def validate(self, atol=1e-9):
        for name, t in (
            ("alpha_star", self.alpha_star),
            ("beta_star", self.beta_star),
            ("joint_star", self.joint_star),
        ):
            if torch.any(t < 0):
                raise ValueError(f"{name} has negative entries")
            if abs(float(t.sum()) - 1.0) > atol:
                raise ValueError(f"{name} sums to {float(t.sum())}, not 1")
        return self


def _as_logits(alignment):
    logits = alignment.logits if hasattr(alignment, "logits") else alignment
    logits = torch.as_tensor(logits, dtype=torch.float64)
    if logits.dim() != 2:
        raise ValueError(f"alignment must be 2-D, got shape {tuple(logits.shape)}")
    if not torch.isfinite(logits).all():
        raise ValueError("alignment contains non-finite entries")
    return logits


def marginalize_prior(alignment):
    """Row/column-softmax averages: (alpha_star over words, beta_star over regions).

    beta_star = mean over words of softmax across regions per word row;
    alpha_star = mean over regions of softmax across words per column.
    All-zero rows (ungrounded words) softmax to uniform, so function words
    dilute the prior toward uniform rather than distorting it.
    """
    logits = _as_logits(alignment)
    beta_star = torch.softmax(logits, dim=1).mean(dim=0)
    alpha_star = torch.softmax(logits, dim=0).mean(dim=1)
    return alpha_star, beta_star


def joint_prior(alignment):
    """Softmax over all T*N cells jointly."""
    logits = _as_logits(alignment)
    return torch.softmax(logits.reshape(-1), dim=0).reshape(logits.shape)


def compute_prior(alignment) -> AttentionPrior:
    alpha_star, beta_star = marginalize_prior(alignment)
    return AttentionPrior(alpha_star, beta_star, joint_prior(alignment))


def kl_divergence(p, q):
    """sum_i p_i ln(p_i / q_i) with 0 ln 0 = 0.

    q is floored at 1e-8 and renormalized first: model attention can hit
    exact zeros via masking, and KL must stay finite.
    """
    p = torch.as_tensor(p, dtype=torch.float64)
    q = torch.as_tensor(q, dtype=torch.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    q = q.clamp(min=KL_FLOOR)
    q = q / q.sum(dim=-1, keepdim=True)
    ratio = torch.where(p > 0, p * (torch.log(p.clamp(min=1e-300)) - torch.log(q)), p.new_zeros(()))
    return ratio.sum(dim=-1)


def pretrain_loss_joint(attention, alignment):
    """KL(softmax of flattened prior logits || sum-normalized flattened attention).

    The prior side is raw signed logits, so it gets a softmax; the
    attention side is already nonnegative, so sum-normalization preserves
    it as-is when it already sums to one.
    """
    logits = _as_logits(alignment)
    attention = torch.as_tensor(attention, dtype=torch.float64)
    if attention.shape != logits.shape:
        raise ValueError(
            f"shape mismatch: attention {tuple(attention.shape)} vs alignment {tuple(logits.shape)}"
        )
    target = torch.softmax(logits.reshape(-1), dim=0)
    flat = attention.reshape(-1)
    flat = flat / flat.sum()
    return kl_divergence(target, flat)


def pretrain_loss_marginal(beta, alignment):
    """KL(beta_star || beta) with beta_star from marginalize_prior."""
    _, beta_star = marginalize_prior(alignment)
    beta = torch.as_tensor(beta, dtype=torch.float64)
    if beta.shape != beta_star.shape:
        raise ValueError(f"beta has length {beta.shape[-1]}, prior expects {beta_star.shape[-1]}")
    return kl_divergence(beta_star, beta)


def uniform_prior_for(num_words, num_regions):
    """Flat priors, the no-information ablation."""
    return AttentionPrior(
        alpha_star=torch.full((num_words,), 1.0 / num_words, dtype=torch.float64),
        beta_star=torch.full((num_regions,), 1.0 / num_regions, dtype=torch.float64),
        joint_star=torch.full(
            (num_words, num_regions), 1.0 / (num_words * num_regions), dtype=torch.float64
        ),
    )


def random_prior_for(num_words, num_regions, rng):
    """Seeded random priors: softmax-normalized standard-normal draws."""
    alpha = torch.tensor(rng.standard_normal(num_words), dtype=torch.float64)
    beta = torch.tensor(rng.standard_normal(num_regions), dtype=torch.float64)
    joint = torch.tensor(rng.standard_normal((num_words, num_regions)), dtype=torch.float64)
    return AttentionPrior(
        alpha_star=torch.softmax(alpha, dim=0),
        beta_star=torch.softmax(beta, dim=0),
        joint_star=torch.softmax(joint.reshape(-1), dim=0).reshape(num_words, num_regions),
    )


# ---------------------------------------------------------------------------
# Prior export container: JSON-lines, one record per instance id.


def save_priors(path, priors):
    """Write {instance id -> AttentionPrior} as JSON-lines.

    Record schema: {"id", "alpha_star": [T], "beta_star": [N],
    "joint_star": [[N] x T]}. Keys are written sorted so re-exports are
    byte-identical.
    """
    with open(path, "w") as fh:
        for inst_id in sorted(priors):
            prior = priors[inst_id]
            record = {
                "id": inst_id,
                "alpha_star": prior.alpha_star.tolist(),
                "beta_star": prior.beta_star.tolist(),
                "joint_star": prior.joint_star.tolist(),
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_priors(path):
    priors = {}
    with open(path) as fh:
        for line in fh:
            record = json.loads(line)
            priors[record["id"]] = AttentionPrior(
                alpha_star=torch.tensor(record["alpha_star"], dtype=torch.float64),
                beta_star=torch.tensor(record["beta_star"], dtype=torch.float64),
                joint_star=torch.tensor(record["joint_star"], dtype=torch.float64),
            ).validate(atol=1e-6)
    return priors
