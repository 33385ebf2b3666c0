"""Flat ``key = value`` run configuration.

Every key has a default; a config file only lists the keys it changes.
Unknown keys are an error so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .regularization import AdvConfig, EamConfig, SerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # layout
    out_dir: str = "runs"
    seed: int = 0
    seeds: str = "0,1,2,3,4"
    # corpora
    n_pretrain: int = 6000
    n_pretrain_heldout: int = 500
    n_finetune: int = 300
    n_clean_heldout: int = 500
    n_eval: int = 1000
    # reward model
    rm_width: int = 32
    batch_size: int = 32
    pretrain_steps: int = 1500
    pretrain_lr: float = 1e-2
    pretrain_decay: bool = True
    finetune_steps: int = 300
    finetune_lr: float = 1e-3
    eval_every: int = 100
    # hybrid regularization
    eps_ls: float = 0.1
    r_min: float = 0.0
    r_max: float = 10.0
    energy_floor: float = 1e-10
    eps_adv: float = 0.5
    alpha: float = 0.5
    # policy
    vocab: int = 32
    policy_width: int = 32
    T: int = 24
    sft_steps: int = 200
    sft_lr: float = 1e-3
    sft_batch: int = 32
    rl_steps: int = 500
    policy_lr: float = 1e-3
    policy_batch: int = 10
    temp: float = 1.0
    temp_final: float = 0.0
    straight_through: bool = True
    train_codebook: bool = True
    codebook_lr_scale: float = 10.0
    reward_mode: str = "plain-ls"
    reward_eps_ls: float = 0.1
    policy_rm: str = "adv"
    eval_rollouts: int = 100

    def __post_init__(self):
        if self.reward_mode not in ("plain-ls", "literal-eq5"):
            raise ConfigError(f"reward_mode must be plain-ls or literal-eq5, got {self.reward_mode!r}")
        if self.policy_rm not in VARIANTS and self.policy_rm != "vanilla":
            raise ConfigError(f"policy_rm must be vanilla or one of {list(VARIANTS)}, got {self.policy_rm!r}")
        if self.r_min > self.r_max:
            raise ConfigError("r_min exceeds r_max")
        if self.temp <= 0 or self.temp_final < 0:
            raise ConfigError("temperatures must be positive (temp_final=0 disables the anneal)")
        for name in ("n_pretrain", "n_finetune", "n_eval", "pretrain_steps", "finetune_steps", "rl_steps", "T", "vocab"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        self.seed_list()

    def seed_list(self) -> list[int]:
        try:
            return [int(s) for s in self.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"seeds must be a comma-separated list of integers, got {self.seeds!r}") from None

    def ser(self, use_ls=True, use_eam=True, use_adv=True) -> SerConfig:
        return SerConfig(
            eps_ls=self.eps_ls,
            eam=EamConfig(self.r_min, self.r_max, self.energy_floor),
            adv=AdvConfig(self.eps_adv, self.alpha),
            use_ls=use_ls, use_eam=use_eam, use_adv=use_adv,
        )

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def as_dict(self) -> dict[str, str]:
        return {k: _format(v) for k, v in self.items()}

    def echo(self) -> list[str]:
        return [f"{k} = {_format(v)}" for k, v in self.items()]

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def fingerprint(self, keys) -> str:
        """Short hash over the values of ``keys``; used to detect stale artifacts."""
        text = "\n".join(f"{k}={_format(getattr(self, k))}" for k in sorted(keys))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


# Cumulative flag sets, matching the nested ablation rows.
VARIANTS = {
    "base": (False, False, False),
    "ls": (True, False, False),
    "eam": (True, True, False),
    "adv": (True, True, True),
}


def variant_name(ls: bool, eam: bool, adv: bool) -> str:
    if eam and not ls:
        raise ConfigError("--eam requires --ls (the mixup targets are label-smoothed)")
    if adv and not eam:
        raise ConfigError("--adv requires --eam (flags are cumulative: ls, ls+eam, ls+eam+adv)")
    for name, flags in VARIANTS.items():
        if flags == (ls, eam, adv):
            return name
    raise AssertionError("unreachable")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(raw: str, typ, key: str):
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        return typ(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {typ.__name__})") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in fields(RunConfig)}
    pytypes = {"int": int, "float": float, "bool": bool, "str": str}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse(raw, pytypes[types[key]], key)
    try:
        return dataclasses.replace(base or RunConfig(), **values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None, **overrides) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        cfg = parse_config(p.read_text(), cfg)
    return cfg.replace(**{k: v for k, v in overrides.items() if v is not None})
