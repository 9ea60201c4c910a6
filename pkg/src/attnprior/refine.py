"""Gated refinement of attention distributions with priors.

The additive form mixes model attention and prior linearly; the
multiplicative form mixes them geometrically. Both are the exact
minimizers of a gate-weighted item-to-set distance over the simplex
(Euclidean and KL respectively), which ``aggregate_numeric_oracle``
recovers by generic iterative optimization so the closed forms can be
verified against an independent route.

Model-path functions are torch ops (differentiable, float64); the
oracle and simplex helpers are numpy.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

POWER_FLOOR = 1e-8


class GateNet(nn.Module):
    """Scalar gate in (0, 1) from mean region feature and query vector.

    gate(v_bar, q)    = sigmoid(w . elu((Wv v_bar + bv) * (Wq q + bq)))
    gate_step adds an intermediate control signal c_k:
        h   = Wh elu((Wv v_bar + bv) * (Wq q + bq))   (no sigmoid inside)
        out = sigmoid(w . elu(c_k * h))

    ``fixed_value`` clamps the output for ablations and identity tests.
    """

    def __init__(self, dim, fixed_value=None):
        super().__init__()
        self.dim = dim
        self.fixed_value = fixed_value
        self.w_gate = nn.Parameter(torch.empty(dim))
        self.W_v = nn.Parameter(torch.empty(dim, dim))
        self.W_q = nn.Parameter(torch.empty(dim, dim))
        self.W_h = nn.Parameter(torch.empty(dim, dim))
        self.b_v = nn.Parameter(torch.zeros(dim))
        self.b_q = nn.Parameter(torch.zeros(dim))
        self.reset_parameters()
        self.double()

    def reset_parameters(self):
        scale = 1.0 / self.dim**0.5
        for W in (self.W_v, self.W_q, self.W_h):
            nn.init.uniform_(W, -scale, scale)
        nn.init.uniform_(self.w_gate, -scale, scale)
        nn.init.zeros_(self.b_v)
        nn.init.zeros_(self.b_q)

    def _fused(self, v_bar, q):
        if v_bar.shape[-1] != self.dim or q.shape[-1] != self.dim:
            raise ValueError(
                f"gate expects dim {self.dim}, got v_bar {v_bar.shape[-1]}, q {q.shape[-1]}"
            )
        return torch.nn.functional.elu(
            (v_bar @ self.W_v + self.b_v) * (q @ self.W_q + self.b_q)
        )

    def forward(self, v_bar, q):
        """Plain gate; accepts (d,) or batched (B, d) inputs."""
        if self.fixed_value is not None:
            shape = v_bar.shape[:-1]
            return torch.full(shape, float(self.fixed_value), dtype=v_bar.dtype)
        return torch.sigmoid(self._fused(v_bar, q) @ self.w_gate)

    def forward_step(self, c_k, v_bar, q):
        """Step-conditioned gate; c_k is the controlling signal."""
        if self.fixed_value is not None:
            shape = c_k.shape[:-1]
            return torch.full(shape, float(self.fixed_value), dtype=c_k.dtype)
        h = self._fused(v_bar, q) @ self.W_h
        return torch.sigmoid(torch.nn.functional.elu(c_k * h) @ self.w_gate)


def refine_additive(att, prior, gate):
    """gate * att + (1 - gate) * prior; stays on the simplex by convexity.

    ``gate`` is a scalar tensor (or batched, one scalar per row of att).
    """
    if att.shape != prior.shape:
        raise ValueError(f"shape mismatch: att {tuple(att.shape)} vs prior {tuple(prior.shape)}")
    g = _expand_gate(gate, att)
    return g * att + (1.0 - g) * prior


def refine_multiplicative(att, prior, gate):
    """norm(att^gate * prior^(1 - gate)); entries floored before powers.

    The floor keeps gradients finite at exact zeros (attention masking can
    produce them); the product is then strictly positive so the
    normalization never divides by zero.
    """
    if att.shape != prior.shape:
        raise ValueError(f"shape mismatch: att {tuple(att.shape)} vs prior {tuple(prior.shape)}")
    g = _expand_gate(gate, att)
    mixed = att.clamp(min=POWER_FLOOR) ** g * prior.clamp(min=POWER_FLOOR) ** (1.0 - g)
    return mixed / mixed.sum(dim=-1, keepdim=True)


def refine_joint(att, prior, gate, mode):
    """Refine a jointly normalized T x N attention matrix against B*.

    additive:        gate * A + (1 - gate) * B*
    multiplicative:  norm(A^gate * B*^(1 - gate)) over all cells
    """
    if att.shape != prior.shape:
        raise ValueError(f"shape mismatch: att {tuple(att.shape)} vs prior {tuple(prior.shape)}")
    flat_att = att.reshape(*att.shape[:-2], -1)
    flat_prior = prior.reshape(*prior.shape[:-2], -1)
    if mode == "additive":
        out = refine_additive(flat_att, flat_prior, gate)
    elif mode == "multiplicative":
        out = refine_multiplicative(flat_att, flat_prior, gate)
    else:
        raise ValueError(f"unknown refinement mode {mode!r}")
    return out.reshape(att.shape)


def _expand_gate(gate, att):
    g = torch.as_tensor(gate)
    if g.dtype != att.dtype:
        g = g.to(att.dtype)
    if g.dim() == 0:
        return g
    # batched: one scalar per leading row
    return g.reshape(*g.shape, *([1] * (att.dim() - g.dim())))


# ---------------------------------------------------------------------------
# Numeric aggregation oracle (numpy).


def project_to_simplex(v):
    """Euclidean projection onto {x >= 0, sum x = 1} (sort-based)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    rho = np.nonzero(u > css / np.arange(1, len(v) + 1))[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


class OracleConvergenceError(RuntimeError):
    def __init__(self, residual, iterations):
        super().__init__(
            f"aggregation oracle did not converge: residual {residual:.3e} "
            f"after {iterations} iterations"
        )
        self.residual = residual


def aggregate_numeric_oracle(
    members,
    weights,
    distance,
    step=0.1,
    max_iter=10_000,
    tol=1e-6,
    method="iterative",
):
    """Numerically minimize sum_i w_i * D(P, P_i) over the simplex.

    distance='euclidean' uses projected gradient; distance='kl' uses
    multiplicative-weights (entropic mirror descent). Neither evaluates
    the closed-form solutions. method='grid' sweeps a dense 1e-3 lattice
    (lengths 2-3 only), as an oracle for the oracle.
    """
    P_i = np.asarray(members, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if P_i.ndim != 2 or P_i.shape[0] != w.shape[0]:
        raise ValueError("members must be a list of equal-length vectors, one weight each")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be nonnegative and sum to 1")
    if distance not in ("euclidean", "kl"):
        raise ValueError(f"unknown distance {distance!r}")
    if distance == "kl":
        P_i = np.maximum(P_i, POWER_FLOOR)

    if method == "grid":
        return _grid_minimize(P_i, w, distance)
    if method != "iterative":
        raise ValueError(f"unknown method {method!r}")

    n = P_i.shape[1]
    P = np.full(n, 1.0 / n)
    for it in range(max_iter):
        if distance == "euclidean":
            grad = w @ (P[None, :] - P_i)
            P_new = project_to_simplex(P - step * grad)
        else:
            grad = np.log(np.maximum(P, 1e-300)) + 1.0 - w @ np.log(P_i)
            P_new = P * np.exp(-step * grad)
            P_new /= P_new.sum()
        residual = np.max(np.abs(P_new - P))
        P = P_new
        if residual <= tol:
            return P
    raise OracleConvergenceError(residual, max_iter)


def oracle_objective(P, members, weights, distance):
    """The aggregated distance being minimized; exposed for grid/tests."""
    P = np.asarray(P, dtype=np.float64)
    P_i = np.asarray(members, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if distance == "euclidean":
        return float(0.5 * np.sum(w * np.sum((P[None, :] - P_i) ** 2, axis=1)))
    logs = np.where(P > 0, np.log(np.maximum(P, 1e-300)) - np.log(P_i), 0.0)
    return float(np.sum(w * np.sum(np.where(P > 0, P * logs, 0.0), axis=1)))


def _grid_minimize(P_i, w, distance, resolution=1e-3):
    n = P_i.shape[1]
    if n not in (2, 3):
        raise ValueError("grid method supports lengths 2 and 3 only")
    ticks = np.arange(0.0, 1.0 + resolution / 2, resolution)
    if n == 2:
        cand = np.stack([ticks, 1.0 - ticks], axis=1)
    else:
        a, b = np.meshgrid(ticks, ticks, indexing="ij")
        a, b = a.ravel(), b.ravel()
        keep = a + b <= 1.0 + 1e-12
        cand = np.stack([a[keep], b[keep], 1.0 - a[keep] - b[keep]], axis=1)
    cand = np.clip(cand, 0.0, 1.0)
    if distance == "euclidean":
        diffs = cand[:, None, :] - P_i[None, :, :]
        vals = 0.5 * np.einsum("mbn,b->m", diffs**2, w)
    else:
        logc = np.where(cand > 0, np.log(np.maximum(cand, 1e-300)), 0.0)
        terms = np.where(
            cand[:, None, :] > 0,
            cand[:, None, :] * (logc[:, None, :] - np.log(P_i)[None, :, :]),
            0.0,
        )
        vals = np.einsum("mbn,b->m", terms, w)
    return cand[int(np.argmin(vals))]
