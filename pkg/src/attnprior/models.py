"""Toy attention-based VQA models and the two-stage training procedure.

Three families over the same encoder and answer head:

* single_shot   -- visual attention straight from (regions, pooled query)
* multistep     -- alternating word/region attention over K reasoning
                   steps with a memory state
* joint         -- full word-region attention matrix consumed by a
                   bilinear fusion

Each family can run bare (no prior) or with gated refinement against
attention priors. Stage 1 pre-trains the attention path against the
priors without touching the answer head; stage 2 fine-tunes the full
model on answer cross-entropy with refinement active.

All modules are float64; forwards are batched internally (queries of
equal length share a batch) and the per-instance entry points wrap the
batched path with a singleton batch.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn.functional import elu

from .priors import kl_divergence
from .refine import GateNet, refine_additive, refine_joint, refine_multiplicative

MODEL_FAMILIES = ("single_shot", "multistep", "joint")


@dataclass
class QueryEncoding:
    contextual: torch.Tensor  # (T, d)
    pooled: torch.Tensor  # (d,)


@dataclass
class AttentionOutputs:
    """Attention objects produced by one forward pass.

    Marginalized families fill ``beta`` (and ``alpha`` for multistep) as a
    list with one entry per reasoning step; the joint family fills
    ``joint``. Refined counterparts mirror the raw lists; gates hold the
    per-step mixing scalars actually used (empty when no prior given).
    """

    alpha: list = field(default_factory=list)
    beta: list = field(default_factory=list)
    joint: list = field(default_factory=list)
    alpha_refined: list = field(default_factory=list)
    beta_refined: list = field(default_factory=list)
    joint_refined: list = field(default_factory=list)
    gates: list = field(default_factory=list)

    def final_visual(self):
        """Visual attention used for grounding metrics: final refined
        beta, or the word-marginal of the refined joint matrix."""
        if self.beta_refined:
            return self.beta_refined[-1]
        return self.joint_refined[-1].sum(dim=0)


class QueryEncoder(nn.Module):
    """Token embedding + bidirectional GRU; pooled vector is a linear
    projection of the concatenated end states of the two passes."""

    def __init__(self, vocab, dim):
        super().__init__()
        if dim % 2 != 0:
            raise ValueError("dim must be even")
        self.vocab = list(vocab)
        self.token_ids = {tok: i for i, tok in enumerate(self.vocab)}
        self.dim = dim
        self.embed = nn.Embedding(len(self.vocab), dim)
        self.rnn = nn.GRU(dim, dim // 2, batch_first=True, bidirectional=True)
        self.pool = nn.Linear(dim, dim)

    def lookup(self, tokens):
        ids = []
        for tok in tokens:
            if tok not in self.token_ids:
                raise KeyError(f"unknown token {tok!r}")
            ids.append(self.token_ids[tok])
        return torch.tensor(ids, dtype=torch.long)

    def forward(self, token_ids):
        """token_ids: (B, T) -> contextual (B, T, d), pooled (B, d)."""
        ctx, _ = self.rnn(self.embed(token_ids))
        fwd_last = ctx[:, -1, : self.dim // 2]
        bwd_first = ctx[:, 0, self.dim // 2 :]
        pooled = self.pool(torch.cat([fwd_last, bwd_first], dim=1))
        return ctx, pooled


class _FusedScorer(nn.Module):
    """w . elu((A x + a) * (B y + b)) attention scorer used throughout."""

    def __init__(self, dim):
        super().__init__()
        self.proj_a = nn.Linear(dim, dim)
        self.proj_b = nn.Linear(dim, dim)
        self.w = nn.Parameter(torch.empty(dim).uniform_(-(dim**-0.5), dim**-0.5))

    def forward(self, many, single):
        """many: (B, M, d), single: (B, d) -> scores (B, M)."""
        return elu(self.proj_a(many) * self.proj_b(single).unsqueeze(1)) @ self.w


def decode_answer(fused, head):
    """Linear layer + softmax over the answer vocabulary."""
    return torch.softmax(head(fused), dim=-1)


class VqaModel(nn.Module):
    """Shared plumbing: encoder, gates, answer head, (de)serialization."""

    family = "base"

    def __init__(self, vocab, answers, dim, refine_mode="additive", fixed_gate=None, steps=1, refine_steps=(1,)):
        super().__init__()
        self.answers = list(answers)
        self.answer_ids = {a: i for i, a in enumerate(self.answers)}
        self.dim = dim
        self.refine_mode = refine_mode
        self.steps = steps
        self.refine_steps = tuple(sorted(refine_steps))
        if any(k < 1 or k > steps for k in self.refine_steps):
            raise ValueError(f"refine_steps {self.refine_steps} outside 1..{steps}")
        if refine_mode not in ("additive", "multiplicative"):
            raise ValueError(f"unknown refine mode {refine_mode!r}")
        self.encoder = QueryEncoder(vocab, dim)
        self.head = nn.Linear(dim, len(self.answers))
        self._fixed_gate = fixed_gate

    @property
    def fixed_gate(self):
        return self._fixed_gate

    @fixed_gate.setter
    def fixed_gate(self, value):
        self._fixed_gate = value
        for mod in self.modules():
            if isinstance(mod, GateNet):
                mod.fixed_value = value

    def _refine_vec(self, att, prior, gate):
        if self.refine_mode == "additive":
            return refine_additive(att, prior, gate)
        return refine_multiplicative(att, prior, gate)

    def encode_query(self, tokens):
        """Per-instance encoding: contextual (T, d) and pooled (d,)."""
        if not tokens:
            raise ValueError("cannot encode an empty query")
        ctx, pooled = self.encoder(self.encoder.lookup(tokens).unsqueeze(0))
        return QueryEncoding(contextual=ctx.squeeze(0), pooled=pooled.squeeze(0))

    def attention_parameters(self):
        raise NotImplementedError

    def answer_parameters(self):
        return list(self.head.parameters())

    def forward_encoded(self, ctx, pooled, feats, prior=None):
        """Batched forward from encodings.

        ctx (B, T, d), pooled (B, d), feats (B, N, d); ``prior`` is a dict
        of stacked prior tensors or None. Returns (outputs dict, probs).
        """
        raise NotImplementedError

    def forward_batch(self, token_ids, feats, prior=None):
        ctx, pooled = self.encoder(token_ids)
        return self.forward_encoded(ctx, pooled, feats, prior=prior)

    def config_dict(self):
        return {
            "family": self.family,
            "dim": self.dim,
            "refine_mode": self.refine_mode,
            "steps": self.steps,
            "refine_steps": list(self.refine_steps),
            "fixed_gate": self._fixed_gate,
        }


class SingleShotModel(VqaModel):
    """Visual attention computed directly from (regions, pooled query)."""

    family = "single_shot"

    def __init__(self, vocab, answers, dim, **kwargs):
        kwargs.setdefault("steps", 1)
        kwargs.setdefault("refine_steps", (1,))
        super().__init__(vocab, answers, dim, **kwargs)
        self.att = _FusedScorer(dim)
        self.gate_beta = GateNet(dim, fixed_value=self._fixed_gate)
        self.fuse_q = nn.Linear(dim, dim)
        self.fuse_v = nn.Linear(dim, dim)
        self.double()

    def attention_parameters(self):
        return list(self.encoder.parameters()) + list(self.att.parameters())

    def forward_encoded(self, ctx, pooled, feats, prior=None):
        beta = torch.softmax(self.att(feats, pooled), dim=1)
        outputs = {"beta": [beta], "beta_refined": [], "gates": []}
        if prior is not None:
            beta_star = prior["beta_star"]
            if beta_star.shape[-1] != feats.shape[1]:
                raise ValueError(
                    f"prior covers {beta_star.shape[-1]} regions, scene has {feats.shape[1]}"
                )
            gamma = self.gate_beta(feats.mean(dim=1), pooled)
            beta_ref = self._refine_vec(beta, beta_star, gamma)
            outputs["gates"].append(gamma)
        else:
            beta_ref = beta
        outputs["beta_refined"].append(beta_ref)
        v_hat = (beta_ref.unsqueeze(2) * feats).sum(dim=1)
        fused = elu(self.fuse_q(pooled)) * elu(self.fuse_v(v_hat))
        logits = self.head(fused)
        outputs["answer_logits"] = logits
        return outputs, torch.softmax(logits, dim=-1)


class MultiStepModel(VqaModel):
    """Alternating word/region attention over K steps with a memory state.

    Step k: word attention from (contextual words, query, memory) gives
    the controlling signal; region attention from (regions, signal,
    memory) gives the read vector; memory is updated from the read.
    Refinement applies only at steps named in ``refine_steps``: the word
    gate is conditioned on the raw-attention controlling signal (the
    refined one does not exist yet), the region gate on the refined one.
    """

    family = "multistep"

    def __init__(self, vocab, answers, dim, steps=4, refine_steps=(1,), **kwargs):
        super().__init__(vocab, answers, dim, steps=steps, refine_steps=refine_steps, **kwargs)
        self.memory_init = nn.Linear(dim, dim)
        self.ctrl = _FusedScorer(dim)
        self.ctrl_mix = nn.Linear(2 * dim, dim)
        self.read = _FusedScorer(dim)
        self.read_mix = nn.Linear(2 * dim, dim)
        self.write = nn.Linear(2 * dim, dim)
        self.gate_alpha = GateNet(dim, fixed_value=self._fixed_gate)
        self.gate_beta = GateNet(dim, fixed_value=self._fixed_gate)
        self.fuse_q = nn.Linear(dim, dim)
        self.fuse_m = nn.Linear(dim, dim)
        self.double()

    def attention_parameters(self):
        mods = [self.encoder, self.memory_init, self.ctrl, self.ctrl_mix, self.read, self.read_mix, self.write]
        return [p for mod in mods for p in mod.parameters()]

    def control_attention(self, ctx, pooled, memory):
        return torch.softmax(self.ctrl(ctx, self.ctrl_mix(torch.cat([pooled, memory], dim=1))), dim=1)

    def read_attention(self, feats, signal, memory):
        return torch.softmax(self.read(feats, self.read_mix(torch.cat([signal, memory], dim=1))), dim=1)

    def forward_encoded(self, ctx, pooled, feats, prior=None):
        outputs = {"alpha": [], "alpha_refined": [], "beta": [], "beta_refined": [], "gates": []}
        v_bar = feats.mean(dim=1)
        memory = self.memory_init(pooled)
        for k in range(1, self.steps + 1):
            alpha = self.control_attention(ctx, pooled, memory)
            outputs["alpha"].append(alpha)
            if prior is not None and k in self.refine_steps:
                raw_signal = (alpha.unsqueeze(2) * ctx).sum(dim=1)
                lam = self.gate_alpha.forward_step(raw_signal, v_bar, pooled)
                alpha_ref = self._refine_vec(alpha, prior["alpha_star"], lam)
            else:
                lam = None
                alpha_ref = alpha
            outputs["alpha_refined"].append(alpha_ref)
            signal = (alpha_ref.unsqueeze(2) * ctx).sum(dim=1)

            beta = self.read_attention(feats, signal, memory)
            outputs["beta"].append(beta)
            if prior is not None and k in self.refine_steps:
                gam = self.gate_beta.forward_step(signal, v_bar, pooled)
                beta_ref = self._refine_vec(beta, prior["beta_star"], gam)
                outputs["gates"].append({"step": k, "alpha": lam, "beta": gam})
            else:
                beta_ref = beta
            outputs["beta_refined"].append(beta_ref)

            read_vec = (beta_ref.unsqueeze(2) * feats).sum(dim=1)
            memory = elu(self.write(torch.cat([memory, read_vec], dim=1)))
        fused = elu(self.fuse_q(pooled)) * elu(self.fuse_m(memory))
        logits = self.head(fused)
        outputs["answer_logits"] = logits
        return outputs, torch.softmax(logits, dim=-1)


class JointModel(VqaModel):
    """Full word-region attention matrix with bilinear fusion.

    Pairwise logits come from a low-rank fused scorer; the matrix is
    normalized jointly over all T*N cells so the multiplicative
    refinement against the jointly normalized prior is well-typed.
    Fusion: f_t = (L W_L)[:, t] . A' . (V W_V)[:, t].
    """

    family = "joint"

    def __init__(self, vocab, answers, dim, **kwargs):
        kwargs.setdefault("steps", 1)
        kwargs.setdefault("refine_steps", (1,))
        kwargs.setdefault("refine_mode", "multiplicative")
        super().__init__(vocab, answers, dim, **kwargs)
        self.pair_l = nn.Linear(dim, dim)
        self.pair_v = nn.Linear(dim, dim)
        self.pair_w = nn.Parameter(torch.empty(dim).uniform_(-(dim**-0.5), dim**-0.5))
        self.gate_joint = GateNet(dim, fixed_value=self._fixed_gate)
        self.W_L = nn.Parameter(torch.empty(dim, dim).uniform_(-(dim**-0.5), dim**-0.5))
        self.W_V = nn.Parameter(torch.empty(dim, dim).uniform_(-(dim**-0.5), dim**-0.5))
        self.double()

    def attention_parameters(self):
        mods = [self.encoder, self.pair_l, self.pair_v]
        return [p for mod in mods for p in mod.parameters()] + [self.pair_w]

    def pair_logits(self, ctx, feats):
        fused = elu(self.pair_l(ctx).unsqueeze(2) * self.pair_v(feats).unsqueeze(1))
        return fused @ self.pair_w  # (B, T, N)

    def forward_encoded(self, ctx, pooled, feats, prior=None):
        B, T, _ = ctx.shape
        N = feats.shape[1]
        logits_tn = self.pair_logits(ctx, feats)
        att = torch.softmax(logits_tn.reshape(B, -1), dim=1).reshape(B, T, N)
        outputs = {"joint": [att], "joint_refined": [], "gates": []}
        if prior is not None:
            joint_star = prior["joint_star"]
            if joint_star.shape[-2:] != (T, N):
                raise ValueError(
                    f"prior is {tuple(joint_star.shape[-2:])}, attention is {(T, N)}"
                )
            lam = self.gate_joint(feats.mean(dim=1), pooled)
            att_ref = refine_joint(att, joint_star, lam, self.refine_mode)
            outputs["gates"].append(lam)
        else:
            att_ref = att
        outputs["joint_refined"].append(att_ref)
        fused = torch.einsum("bit,bij,bjt->bt", ctx @ self.W_L, att_ref, feats @ self.W_V)
        logits = self.head(fused)
        outputs["answer_logits"] = logits
        return outputs, torch.softmax(logits, dim=-1)


def build_model(family, vocab, answers, dim, seed, **kwargs):
    """Seeded construction so identical configs give identical weights."""
    torch.manual_seed(seed)
    if family == "single_shot":
        return SingleShotModel(vocab, answers, dim, **kwargs)
    if family == "multistep":
        return MultiStepModel(vocab, answers, dim, **kwargs)
    if family == "joint":
        return JointModel(vocab, answers, dim, **kwargs)
    raise ValueError(f"unknown model family {family!r}; expected one of {MODEL_FAMILIES}")


# ---------------------------------------------------------------------------
# Per-instance entry points (wrap the batched path with a singleton batch).


def _outputs_to_attention(raw):
    out = AttentionOutputs()
    for key in ("alpha", "beta", "joint", "alpha_refined", "beta_refined", "joint_refined"):
        for t in raw.get(key, []):
            getattr(out, key).append(t.squeeze(0))
    out.gates = raw.get("gates", [])
    return out


def _prior_batch(prior):
    if prior is None:
        return None
    return {
        "alpha_star": prior.alpha_star.unsqueeze(0),
        "beta_star": prior.beta_star.unsqueeze(0),
        "joint_star": prior.joint_star.unsqueeze(0),
    }


def single_shot_forward(enc, regions, prior, model):
    raw, probs = model.forward_encoded(
        enc.contextual.unsqueeze(0), enc.pooled.unsqueeze(0),
        regions.features.unsqueeze(0), prior=_prior_batch(prior),
    )
    return _outputs_to_attention(raw), probs.squeeze(0)


multistep_forward = single_shot_forward
joint_forward = single_shot_forward


# ---------------------------------------------------------------------------
# Two-stage training.


def _answer_index(model, answer):
    if answer not in model.answer_ids:
        raise KeyError(f"answer {answer!r} not in answer vocabulary")
    return model.answer_ids[answer]


def _bucket_batches(indices, instances, batch_size, rng):
    """Batches of equal query length, length-pure so no masking is needed."""
    buckets = {}
    for i in indices:
        buckets.setdefault(len(instances[i].tokens), []).append(i)
    batches = []
    for length in sorted(buckets):
        bucket = buckets[length]
        rng.shuffle(bucket)
        for start in range(0, len(bucket), batch_size):
            batches.append(bucket[start : start + batch_size])
    rng.shuffle(batches)
    return batches


def _stack_batch(model, instances, batch, priors=None):
    token_ids = torch.stack([model.encoder.lookup(instances[i].tokens) for i in batch])
    feats = torch.stack([instances[i].region_set().features for i in batch])
    prior = None
    if priors is not None:
        picked = [priors[instances[i].id] for i in batch]
        prior = {
            "alpha_star": torch.stack([p.alpha_star for p in picked]),
            "beta_star": torch.stack([p.beta_star for p in picked]),
            "joint_star": torch.stack([p.joint_star for p in picked]),
        }
    return token_ids, feats, prior


def _check_priors(instances, priors):
    for inst in instances:
        if inst.id not in priors:
            raise KeyError(f"no prior for instance {inst.id!r}")


def _prior_kl_batch(model, outputs, prior):
    """Stage-1 objective for one batch: KL to prior on the raw attention."""
    if model.family == "joint":
        att = outputs["joint"][0]
        flat = att.reshape(att.shape[0], -1)
        flat = flat / flat.sum(dim=1, keepdim=True)
        target = prior["joint_star"].reshape(flat.shape[0], -1)
        return kl_divergence(target, flat)
    kls = [kl_divergence(prior["beta_star"], outputs["beta"][k - 1]) for k in model.refine_steps]
    return torch.stack(kls, dim=0).mean(dim=0)


def mean_prior_kl(model, instances, priors, batch_size=64):
    """Held-out mean KL between priors and raw model attention."""
    _check_priors(instances, priors)
    rng = random.Random(0)
    total, count = 0.0, 0
    with torch.no_grad():
        for batch in _bucket_batches(list(range(len(instances))), instances, batch_size, rng):
            token_ids, feats, prior = _stack_batch(model, instances, batch, priors)
            outputs, _ = model.forward_batch(token_ids, feats, prior=None)
            total += float(_prior_kl_batch(model, outputs, prior).sum())
            count += len(batch)
    return total / count


def pretrain_attention(model, instances, priors, config, seed):
    """Stage 1: align raw attention with priors; answer head untouched.

    Optimizes only ``model.attention_parameters()`` with the KL losses
    (visual-vector KL for marginalized families, flattened-matrix KL for
    the joint family). Returns one {"epoch", "loss"} record per epoch.
    """
    _check_priors(instances, priors)
    params = model.attention_parameters()
    optimizer = torch.optim.Adam(params, lr=config.pretrain_lr)
    rng = random.Random(seed)
    log = []
    for epoch in range(config.pretrain_epochs):
        epoch_loss, seen = 0.0, 0
        for batch in _bucket_batches(list(range(len(instances))), instances, config.batch_size, rng):
            token_ids, feats, prior = _stack_batch(model, instances, batch, priors)
            optimizer.zero_grad()
            outputs, _ = model.forward_batch(token_ids, feats, prior=None)
            loss = _prior_kl_batch(model, outputs, prior).mean()
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item() * len(batch)
            seen += len(batch)
        log.append({"epoch": epoch + 1, "loss": epoch_loss / seen})
    return log


def supervised_subset(num_instances, fraction, seed):
    """Seeded index subset for limited-supervision runs; same (n,
    fraction, seed) always picks the same instances."""
    if not (0 < fraction <= 1):
        raise ValueError(f"supervision fraction must be in (0, 1], got {fraction}")
    count = round(num_instances * fraction)
    if count == 0:
        raise ValueError(f"supervision fraction {fraction} selects no instances")
    rng = random.Random(seed)
    return sorted(rng.sample(range(num_instances), count))


def finetune_vqa(model, instances, priors, config, seed, supervision_fraction=1.0):
    """Stage 2: answer cross-entropy over the full model.

    Refinement is active whenever ``priors`` is given. The supervision
    fraction selects a seeded subset of answer labels. Returns one
    {"epoch", "loss", "train_accuracy"} record per epoch.
    """
    if priors is not None:
        _check_priors(instances, priors)
    subset = supervised_subset(len(instances), supervision_fraction, seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = random.Random(seed)
    log = []
    for epoch in range(config.epochs):
        epoch_loss, correct, seen = 0.0, 0, 0
        for batch in _bucket_batches(list(subset), instances, config.batch_size, rng):
            token_ids, feats, prior = _stack_batch(model, instances, batch, priors)
            gold = torch.tensor([_answer_index(model, instances[i].answer) for i in batch])
            optimizer.zero_grad()
            outputs, _ = model.forward_batch(token_ids, feats, prior=prior)
            logp = torch.log_softmax(outputs["answer_logits"], dim=1)
            loss = -logp[torch.arange(len(batch)), gold].mean()
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item() * len(batch)
            correct += int((logp.argmax(dim=1) == gold).sum())
            seen += len(batch)
        log.append(
            {"epoch": epoch + 1, "loss": epoch_loss / seen, "train_accuracy": correct / seen}
        )
    return log


# ---------------------------------------------------------------------------
# Checkpoints.


def save_model(path, model, config_echo=None):
    torch.save(
        {
            "format_version": 1,
            "kind": "vqa_model",
            "model": model.config_dict(),
            "vocab": model.encoder.vocab,
            "answers": model.answers,
            "config": config_echo or {},
            "state": model.state_dict(),
        },
        path,
    )


def load_model(path):
    payload = torch.load(path, weights_only=False)
    if payload.get("kind") != "vqa_model":
        raise ValueError(f"{path} is not a model checkpoint")
    cfg = payload["model"]
    model = build_model(
        cfg["family"], payload["vocab"], payload["answers"], cfg["dim"], seed=0,
        refine_mode=cfg["refine_mode"], steps=cfg["steps"],
        refine_steps=tuple(cfg["refine_steps"]), fixed_gate=cfg["fixed_gate"],
    )
    model.load_state_dict(payload["state"])
    model.eval()
    return model
