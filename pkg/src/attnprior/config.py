"""Run configuration: a flat ``key = value`` text format.

Lines are ``key = value``; ``#`` starts a comment; blank lines are
ignored. Values are typed by the field they set (bools accept
true/false, integer lists are comma-separated). Unknown keys are
errors, so typos fail loudly. Command-line ``--set key=value`` flags
override file values.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    model: str = "single_shot"  # single_shot | multistep | joint
    refine_mode: str = ""  # additive | multiplicative; empty = family default
    dim: int = 32
    steps: int = 4
    refine_steps: tuple = (1,)

    # ablation switches
    no_prior: bool = False
    uniform_prior: bool = False
    random_prior: bool = False
    fixed_gate: float | None = None
    no_re_grounding: bool = False
    no_pretrain_stage: bool = False
    prior_only: bool = False

    # seeds
    seed: int = 0
    seeds: tuple = (0, 1, 2)

    # training
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 8
    pretrain_lr: float = 1e-3
    pretrain_epochs: int = 3
    grounder_lr: float = 1e-3
    grounder_epochs: int = 5
    contrastive_batch: int = 32
    re_divisor: str = "coverage"  # coverage | total
    supervision_fraction: float = 1.0

    # synthetic world
    grid_size: int = 4
    n_regions: int = 8
    feature_noise: float = 0.1
    train_count: int = 5000
    val_count: int = 1000
    box_jitter: bool = False

    # paths
    data_dir: str = "data"
    run_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.model not in ("single_shot", "multistep", "joint"):
            raise ConfigError(f"unknown model family {self.model!r}")
        if self.refine_mode not in ("", "additive", "multiplicative"):
            raise ConfigError(f"unknown refine_mode {self.refine_mode!r}")
        exclusive = [self.no_prior, self.uniform_prior, self.random_prior]
        if sum(exclusive) > 1:
            raise ConfigError(
                "no_prior, uniform_prior and random_prior are mutually exclusive"
            )
        if self.fixed_gate is not None and not (0.0 <= self.fixed_gate <= 1.0):
            raise ConfigError(f"fixed_gate must be in [0, 1], got {self.fixed_gate}")
        if self.prior_only and self.fixed_gate not in (None, 0.0):
            raise ConfigError("prior_only means fixed_gate = 0; remove the conflicting value")
        if self.re_divisor not in ("coverage", "total"):
            raise ConfigError(f"unknown re_divisor {self.re_divisor!r}")
        if not (0.0 < self.supervision_fraction <= 1.0):
            raise ConfigError("supervision_fraction must be in (0, 1]")
        if any(k < 1 or k > self.steps for k in self.refine_steps):
            raise ConfigError(f"refine_steps {self.refine_steps} outside 1..{self.steps}")
        return self

    @property
    def effective_refine_mode(self):
        if self.refine_mode:
            return self.refine_mode
        return "multiplicative" if self.model == "joint" else "additive"

    @property
    def effective_fixed_gate(self):
        return 0.0 if self.prior_only else self.fixed_gate

    def to_text(self):
        """Canonical echo of every key, suitable for re-parsing."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif value is None:
                value = ""
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def hash(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def _parse_value(name, text, current):
    text = text.strip()
    if name == "fixed_gate":
        return None if text == "" else float(text)
    if isinstance(current, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name} expects true/false, got {text!r}")
    if isinstance(current, tuple):
        if text == "":
            return ()
        try:
            return tuple(int(v) for v in text.split(","))
        except ValueError as exc:
            raise ConfigError(f"{name} expects a comma-separated integer list") from exc
    if isinstance(current, int):
        try:
            return int(text)
        except ValueError as exc:
            raise ConfigError(f"{name} expects an integer, got {text!r}") from exc
    if isinstance(current, float):
        try:
            return float(text)
        except ValueError as exc:
            raise ConfigError(f"{name} expects a number, got {text!r}") from exc
    return text


def parse_config_text(text, base=None):
    config = base or RunConfig()
    known = {f.name for f in fields(config)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        setattr(config, key, _parse_value(key, value, getattr(config, key)))
    return config.validate()


def load_config(path, overrides=()):
    """Parse a config file then apply 'key=value' override strings."""
    with open(path) as fh:
        config = parse_config_text(fh.read())
    return apply_overrides(config, overrides)


def apply_overrides(config, overrides):
    known = {f.name for f in fields(config)}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(config, key, _parse_value(key, value, getattr(config, key)))
    return config.validate()
