"""Experiment stages: data, reward models, oracle, policies, evaluation, ablation.

Every stage writes its artifact under ``<out_dir>/seed<N>/`` together with a
JSON sidecar holding a fingerprint of the config keys it depends on. A later
stage that needs the artifact reuses it when the fingerprint matches and
rebuilds it otherwise, so the commands can be run in any order.
"""

from __future__ import annotations

import json
import logging
import multiprocessing
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import meta_path
from .config import VARIANTS, ConfigError, RunConfig
from .corpus import domain_spec, gen_samples, natural_band, artifact_energy, read_corpus, write_corpus
from .metrics import MetricsWriter, code_version
from .optim import Adam
from .oracle import OracleJudge, default_oracle
from .policy import (
    PolicyHyper, PolicyParams, RewardSpec, build_codebook, load_policy, policy_init,
    rrpo_step, sample_frames, save_policy, sft_step, tokenize,
)
from .regularization import smooth_label
from .reward_model import RmParams, accuracy, load_rm, predict, rm_init, save_rm
from .rng import Rng, stream_id
from .train import PLAIN, batch_indices, train_rm

log = logging.getLogger(__name__)

# Frozen after the calibration run; see the acceptance tests.
HACK_MARGINS = {"oracle_gap": 0.15, "vanilla_energy_ratio": 3.0, "robust_energy_ratio": 1.5}
PRETRAIN_TARGET = 0.9

CORPORA = {
    # name: (domain, config key for the sample count)
    "pretrain": ("pretrain", "n_pretrain"),
    "pretrain_heldout": ("pretrain", "n_pretrain_heldout"),
    "finetune": ("finetune", "n_finetune"),
    "clean_heldout": ("finetune", "n_clean_heldout"),
    "eval": ("eval-shifted", "n_eval"),
}

PRETRAIN_KEYS = ("n_pretrain", "n_pretrain_heldout", "rm_width", "batch_size", "pretrain_steps", "pretrain_lr", "pretrain_decay")
FINETUNE_KEYS = PRETRAIN_KEYS + (
    "n_finetune", "finetune_steps", "finetune_lr", "eps_ls", "r_min", "r_max", "energy_floor", "eps_adv", "alpha",
)
SFT_KEYS = ("n_finetune", "vocab", "policy_width", "T", "sft_steps", "sft_lr", "sft_batch")
POLICY_KEYS = SFT_KEYS + (
    "rl_steps", "policy_lr", "policy_batch", "temp", "temp_final", "straight_through", "train_codebook",
    "codebook_lr_scale", "reward_mode", "reward_eps_ls",
)


def corpus_seed(seed: int, name: str) -> int:
    return stream_id("corpus", seed, name) & 0xFFFFFFFF


@dataclass
class Layout:
    root: Path

    @classmethod
    def of(cls, cfg: RunConfig, seed: int) -> "Layout":
        return cls(Path(cfg.out_dir) / f"seed{seed}")

    def data(self, name):
        return self.root / "data" / f"{name}.corp"

    def ckpt(self, name):
        return self.root / "ckpt" / name

    def metrics(self, name):
        return self.root / "metrics" / f"{name}.csv"


def _meta(cfg: RunConfig, seed: int, keys, **extra) -> dict:
    return {"seed": seed, "fingerprint": cfg.fingerprint(keys), "code_version": code_version(),
            "config": cfg.as_dict(),
            **extra}


def _fresh(path: Path, cfg: RunConfig, seed: int, keys) -> bool:
    mp = meta_path(path)
    if not (path.exists() and mp.exists()):
        return False
    try:
        meta = json.loads(mp.read_text())
    except json.JSONDecodeError:
        return False
    return (meta.get("fingerprint") == cfg.fingerprint(keys) and meta.get("seed") == seed
            and meta.get("code_version") == code_version())


# ---------------------------------------------------------------- data


def corpus_keys(name: str) -> tuple[str, ...]:
    return (CORPORA[name][1],)


def gen_data(cfg: RunConfig, seed: int, force: bool = False) -> dict[str, Path]:
    lay = Layout.of(cfg, seed)
    paths = {name: lay.data(name) for name in CORPORA}
    taken = [str(p) for p in paths.values() if p.exists()]
    if taken and not force:
        raise ConfigError("refusing to overwrite existing corpora (use --force): " + ", ".join(taken))
    for name in CORPORA:
        _write_corpus(cfg, seed, name, paths[name])
    return paths


def _write_corpus(cfg, seed, name, path):
    domain, key = CORPORA[name]
    spec = domain_spec(domain, getattr(cfg, key), seed=corpus_seed(seed, name))
    feats, labels = gen_samples(spec)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(path, feats, labels)
    meta = _meta(cfg, seed, corpus_keys(name), corpus=name, domain=domain, n_samples=len(feats))
    meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    log.info("wrote %s (%d samples)", path, len(feats))


def load_data(cfg: RunConfig, seed: int, name: str):
    path = Layout.of(cfg, seed).data(name)
    if not _fresh(path, cfg, seed, corpus_keys(name)):
        _write_corpus(cfg, seed, name, path)
    return read_corpus(path)


# ---------------------------------------------------------------- reward models


def _rm_eval(params: RmParams, sets: dict) -> dict:
    return {f"acc_{k}": accuracy(params, f, y) for k, (f, y) in sets.items()}


def pretrain(cfg: RunConfig, seed: int) -> tuple[RmParams, dict]:
    """Plain cross-entropy on the shortcut-correlated corpus (the vanilla model)."""
    lay = Layout.of(cfg, seed)
    feats, labels = load_data(cfg, seed, "pretrain")
    heldout = load_data(cfg, seed, "pretrain_heldout")
    writer = MetricsWriter(lay.metrics("pretrain"), cfg, f"seed{seed}", "pretrain")
    res = train_rm(
        rm_init(seed, (feats[0].shape[1], cfg.rm_width, 5)), feats, labels, PLAIN,
        steps=cfg.pretrain_steps, batch_size=cfg.batch_size, lr=cfg.pretrain_lr, seed=seed,
        phase="pretrain", eval_every=cfg.eval_every, decay=cfg.pretrain_decay,
        evaluate=lambda p: _rm_eval(p, {"pretrain_heldout": heldout}),
    )
    for row in res.rows:
        writer.row(**row)
    acc = accuracy(res.params, *heldout)
    if acc < PRETRAIN_TARGET:
        log.warning("vanilla model reached %.3f on pretrain held-out (< %.2f)", acc, PRETRAIN_TARGET)
    info = {"acc_pretrain_heldout": acc}
    path = lay.ckpt("vanilla.rm")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_rm(path, res.params, _meta(cfg, seed, PRETRAIN_KEYS, **info))
    return res.params, info


def vanilla(cfg: RunConfig, seed: int) -> RmParams:
    path = Layout.of(cfg, seed).ckpt("vanilla.rm")
    if _fresh(path, cfg, seed, PRETRAIN_KEYS):
        return load_rm(path)
    return pretrain(cfg, seed)[0]


def finetune(cfg: RunConfig, seed: int, variant: str) -> tuple[RmParams, dict]:
    """Fine-tune the vanilla model on the clean corpus with one cumulative flag set."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    lay = Layout.of(cfg, seed)
    start = vanilla(cfg, seed)
    feats, labels = load_data(cfg, seed, "finetune")
    sets = {"clean": load_data(cfg, seed, "clean_heldout"), "shifted": load_data(cfg, seed, "eval")}
    writer = MetricsWriter(lay.metrics(f"finetune_{variant}"), cfg, f"seed{seed}", f"finetune_{variant}",
                           {"variant": variant})
    res = train_rm(
        start, feats, labels, cfg.ser(*VARIANTS[variant]),
        steps=cfg.finetune_steps, batch_size=cfg.batch_size, lr=cfg.finetune_lr, seed=seed,
        phase="finetune", eval_every=cfg.eval_every, evaluate=lambda p: _rm_eval(p, sets),
    )
    for row in res.rows:
        writer.row(**row)
    info = _rm_eval(res.params, sets)
    save_rm(lay.ckpt(f"rm_{variant}.rm"), res.params, _meta(cfg, seed, FINETUNE_KEYS, variant=variant, **info))
    return res.params, info


def robust(cfg: RunConfig, seed: int, variant: str = "adv") -> RmParams:
    return finetuned(cfg, seed, variant)[0]


def finetuned(cfg: RunConfig, seed: int, variant: str) -> tuple[RmParams, dict]:
    """Cached ``finetune``: reuses a checkpoint whose fingerprint matches."""
    path = Layout.of(cfg, seed).ckpt(f"rm_{variant}.rm")
    if _fresh(path, cfg, seed, FINETUNE_KEYS):
        meta = json.loads(meta_path(path).read_text())
        return load_rm(path), {k: meta[k] for k in ("acc_clean", "acc_shifted")}
    return finetune(cfg, seed, variant)


def reward_model(cfg: RunConfig, seed: int, name: str) -> RmParams:
    return vanilla(cfg, seed) if name == "vanilla" else robust(cfg, seed, name)


def oracle(cfg: RunConfig, seed: int) -> OracleJudge:
    path = Layout.of(cfg, seed).ckpt("oracle.rm")
    if _fresh(path, cfg, seed, ()):
        judge = OracleJudge.load(path)
        judge.heldout_accuracy = json.loads(meta_path(path).read_text())["heldout_accuracy"]
        return judge
    judge = default_oracle(seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    judge.save(path, _meta(cfg, seed, (), heldout_accuracy=judge.heldout_accuracy))
    return judge


# ---------------------------------------------------------------- policies


def policy_hyper(cfg: RunConfig) -> PolicyHyper:
    return PolicyHyper(
        lr=cfg.policy_lr, batch_size=cfg.policy_batch, T=cfg.T, temp=cfg.temp,
        temp_final=cfg.temp_final or None, straight_through=cfg.straight_through,
        train_codebook=cfg.train_codebook, codebook_lr_scale=cfg.codebook_lr_scale,
    )


def reward_spec(cfg: RunConfig) -> RewardSpec:
    return RewardSpec(mode=cfg.reward_mode, eps_ls=cfg.reward_eps_ls, ser=cfg.ser())


def sft_policy(cfg: RunConfig, seed: int) -> PolicyParams:
    """Teacher-forced warm start on the tokenized clean corpus (cached)."""
    lay = Layout.of(cfg, seed)
    path = lay.ckpt("sft.pol")
    if _fresh(path, cfg, seed, SFT_KEYS):
        return load_policy(path)
    feats, labels = load_data(cfg, seed, "finetune")
    codebook = build_codebook(feats, cfg.vocab, seed)
    policy = policy_init(seed, codebook, K=5, width=cfg.policy_width)
    tokens = [tokenize(f, codebook) for f in feats]
    opt = Adam(cfg.sft_lr)
    writer = MetricsWriter(lay.metrics("sft"), cfg, f"seed{seed}", "sft")
    for step in range(1, cfg.sft_steps + 1):
        idx = batch_indices(len(feats), cfg.sft_batch, seed, "sft", step)
        policy, loss = sft_step(policy, [tokens[i] for i in idx], [int(labels[i]) for i in idx], opt, cfg.T)
        if cfg.eval_every and (step % cfg.eval_every == 0 or step == cfg.sft_steps):
            writer.row(step, loss=loss)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_policy(path, policy, _meta(cfg, seed, SFT_KEYS))
    return policy


@dataclass
class PolicyEval:
    reward: dict[str, float]
    oracle_acc: float
    energy: float
    energy_ratio: float


def score_frames(rm: RmParams, frames, conds, eps: float) -> float:
    """Mean label-smoothed log-likelihood of the conditioning class (the plain reward)."""
    lg = predict(rm, frames)
    lg = lg - lg.max(axis=1, keepdims=True)
    logp = lg - np.log(np.exp(lg).sum(axis=1, keepdims=True))
    tgt = np.stack([smooth_label(c, eps, rm.K) for c in conds])
    return float(np.mean(np.sum(tgt * logp, axis=1)))


def evaluate_policy(cfg: RunConfig, seed: int, policy: PolicyParams, rms: dict[str, RmParams], judge: OracleJudge,
                    natural: float) -> PolicyEval:
    conds = [i % 5 for i in range(cfg.eval_rollouts)]
    hyper = policy_hyper(cfg)
    temp = hyper.temp_final or hyper.temp
    frames = sample_frames(policy, conds, hyper, Rng(seed, stream_id("eval-rollouts")), temp=temp)
    energy = float(np.mean([artifact_energy(f) for f in frames]))
    return PolicyEval(
        reward={k: score_frames(rm, frames, conds, cfg.reward_eps_ls) for k, rm in rms.items()},
        oracle_acc=judge.accuracy(frames, conds),
        energy=energy,
        energy_ratio=energy / natural,
    )


@dataclass
class HackingReport:
    reward: float
    oracle_acc: float
    energy: float
    natural: float
    energy_ratio: float


def hacking_gap(policy: PolicyParams, frozen_rm: RmParams, judge: OracleJudge, n_rollouts: int, natural: float,
                hyper: PolicyHyper | None = None, eps_ls: float = 0.1, seed: int = 0) -> HackingReport:
    """Mean reward, oracle accuracy and artifact energy of ``n_rollouts`` class-cycled rollouts."""
    hyper = hyper or PolicyHyper()
    conds = [i % frozen_rm.K for i in range(n_rollouts)]
    frames = sample_frames(policy, conds, hyper, Rng(seed, stream_id("eval-rollouts")), temp=hyper.temp_final or hyper.temp)
    energy = float(np.mean([artifact_energy(f) for f in frames]))
    return HackingReport(score_frames(frozen_rm, frames, conds, eps_ls), judge.accuracy(frames, conds), energy,
                         natural, energy / natural)


def natural_energy(cfg: RunConfig, seed: int) -> float:
    return natural_band(load_data(cfg, seed, "finetune")[0])[0]


def train_policy(cfg: RunConfig, seed: int, rm_name: str | None = None, rm: RmParams | None = None) -> PolicyParams:
    """SFT warm start, then reward-gradient ascent against a frozen model."""
    rm_name = rm_name or cfg.policy_rm
    lay = Layout.of(cfg, seed)
    if rm is None:
        rm = reward_model(cfg, seed, rm_name)
    policy = sft_policy(cfg, seed)
    judge = oracle(cfg, seed)
    natural = natural_energy(cfg, seed)
    hyper = policy_hyper(cfg)
    spec = reward_spec(cfg)
    opt = Adam(hyper.lr, hyper.betas)
    writer = MetricsWriter(lay.metrics(f"policy_{rm_name}"), cfg, f"seed{seed}", f"policy_{rm_name}", {"rm": rm_name})
    recent = []
    for step in range(1, cfg.rl_steps + 1):
        temp = hyper.temp
        if hyper.temp_final:
            temp = hyper.temp + (hyper.temp_final - hyper.temp) * (step - 1) / max(1, cfg.rl_steps - 1)
        policy, rep = rrpo_step(policy, rm, spec, opt, hyper, Rng(seed, stream_id("rl", rm_name, step)), temp=temp)
        recent.append(rep.reward)
        if cfg.eval_every and (step % cfg.eval_every == 0 or step == cfg.rl_steps):
            ev = evaluate_policy(cfg, seed, policy, {"rm": rm}, judge, natural)
            writer.row(step, reward=float(np.mean(recent)), eval_reward=ev.reward["rm"], oracle_acc=ev.oracle_acc,
                       energy_ratio=ev.energy_ratio, grad_norm=rep.grad_norm, skipped=int(rep.skipped))
            recent = []
    save_policy(lay.ckpt(f"policy_{rm_name}.pol"), policy, _meta(cfg, seed, POLICY_KEYS + FINETUNE_KEYS, rm=rm_name))
    return policy


def trained_policy(cfg: RunConfig, seed: int, rm_name: str) -> PolicyParams:
    path = Layout.of(cfg, seed).ckpt(f"policy_{rm_name}.pol")
    if _fresh(path, cfg, seed, POLICY_KEYS + FINETUNE_KEYS):
        return load_policy(path)
    return train_policy(cfg, seed, rm_name)


# ---------------------------------------------------------------- evaluation


EVAL_COLUMNS = ("rm_reward", "reward_vanilla", "reward_robust", "oracle_acc", "energy", "energy_ratio", "rm_clean_acc",
                "rm_shifted_acc")


def eval_seed(cfg: RunConfig, seed: int) -> list[dict]:
    """Hacking-gap rows for one seed: SFT start, policy vs vanilla, policy vs robust."""
    rob_name = cfg.policy_rm if cfg.policy_rm != "vanilla" else "adv"
    rms = {"vanilla": vanilla(cfg, seed), "robust": robust(cfg, seed, rob_name)}
    judge = oracle(cfg, seed)
    natural = natural_energy(cfg, seed)
    sets = {"clean": load_data(cfg, seed, "clean_heldout"), "shifted": load_data(cfg, seed, "eval")}
    rows = []
    for label, rm_key, policy in (
        ("sft", "vanilla", sft_policy(cfg, seed)),
        ("vanilla", "vanilla", trained_policy(cfg, seed, "vanilla")),
        (rob_name, "robust", trained_policy(cfg, seed, rob_name)),
    ):
        ev = evaluate_policy(cfg, seed, policy, rms, judge, natural)
        accs = _rm_eval(rms[rm_key], sets)
        rows.append({
            "seed": seed, "policy": label,
            "rm_reward": ev.reward[rm_key],
            "reward_vanilla": ev.reward["vanilla"],
            "reward_robust": ev.reward["robust"],
            "oracle_acc": ev.oracle_acc,
            "energy": ev.energy,
            "energy_ratio": ev.energy_ratio,
            "rm_clean_acc": accs["acc_clean"],
            "rm_shifted_acc": accs["acc_shifted"],
        })
    return rows


def hacking_verdict(rows: list[dict]) -> dict:
    """Seed-averaged hacking-gap checks against the frozen margins."""
    def mean(policy, col):
        return float(np.mean([r[col] for r in rows if r["policy"] == policy]))

    rob = next(r["policy"] for r in rows if r["policy"] not in ("sft", "vanilla"))
    out = {
        "reward_gain": mean("vanilla", "reward_vanilla") - mean("sft", "reward_vanilla"),
        "oracle_gap": mean(rob, "oracle_acc") - mean("vanilla", "oracle_acc"),
        "vanilla_energy_ratio": mean("vanilla", "energy_ratio"),
        "robust_energy_ratio": mean(rob, "energy_ratio"),
    }
    r = HACK_MARGINS["robust_energy_ratio"]
    out["checks"] = {
        "reward_not_below_sft": out["reward_gain"] >= 0.0,
        "oracle_gap": out["oracle_gap"] >= HACK_MARGINS["oracle_gap"],
        "vanilla_energy_elevated": out["vanilla_energy_ratio"] >= HACK_MARGINS["vanilla_energy_ratio"],
        "robust_energy_natural": 1.0 / r <= out["robust_energy_ratio"] <= r,
    }
    return out


def _pool_map(fn, tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with multiprocessing.get_context("fork").Pool(min(jobs, len(tasks))) as pool:
        return pool.map(fn, tasks, chunksize=1)


def _eval_task(args):
    cfg, seed = args
    return eval_seed(cfg, seed)


def run_eval(cfg: RunConfig, seeds, jobs: int = 1) -> dict:
    rows = [r for part in _pool_map(_eval_task, [(cfg, s) for s in seeds], jobs) for r in part]
    return {"rows": rows, "verdict": hacking_verdict(rows), "columns": list(EVAL_COLUMNS)}


# ---------------------------------------------------------------- ablation


def _pretrain_task(args):
    cfg, seed = args
    try:
        vanilla(cfg, seed)
        return None
    except Exception as exc:  # recorded per cell, the run continues
        return f"{type(exc).__name__}: {exc}"


def _cell_task(args):
    cfg, seed, variant = args
    try:
        _, info = finetuned(cfg, seed, variant)
        return {"seed": seed, "variant": variant, "clean_acc": info["acc_clean"], "shifted_acc": info["acc_shifted"],
                "status": "ok"}
    except Exception as exc:
        return {"seed": seed, "variant": variant, "clean_acc": float("nan"), "shifted_acc": float("nan"),
                "status": f"{type(exc).__name__}: {exc}"}


def run_ablation(cfg: RunConfig, seeds, jobs: int = 1) -> dict:
    """Four cumulative flag sets x seeds, scored on clean and shifted domains."""
    failed = dict(zip(seeds, _pool_map(_pretrain_task, [(cfg, s) for s in seeds], jobs)))
    tasks = [(cfg, s, v) for s in seeds for v in VARIANTS if failed[s] is None]
    cells = _pool_map(_cell_task, tasks, jobs)
    for s, err in failed.items():
        if err is not None:
            cells += [{"seed": s, "variant": v, "clean_acc": float("nan"), "shifted_acc": float("nan"), "status": err}
                      for v in VARIANTS]
    cells.sort(key=lambda c: (c["seed"], list(VARIANTS).index(c["variant"])))
    means = {}
    for v in VARIANTS:
        ok = [c for c in cells if c["variant"] == v and c["status"] == "ok"]
        means[v] = {
            "clean_acc": float(np.mean([c["clean_acc"] for c in ok])) if ok else float("nan"),
            "shifted_acc": float(np.mean([c["shifted_acc"] for c in ok])) if ok else float("nan"),
            "n": len(ok),
        }
    gains = {
        "ls_over_base": means["ls"]["shifted_acc"] - means["base"]["shifted_acc"],
        "eam_over_ls": means["eam"]["shifted_acc"] - means["ls"]["shifted_acc"],
        "adv_over_eam": means["adv"]["shifted_acc"] - means["eam"]["shifted_acc"],
    }
    return {"cells": cells, "means": means, "gains": gains}
