"""Experiment orchestration: config, seeding, checkpoints and CSV outputs.

Every random draw comes from a stream derived from the config seed and a
fixed stream id, so a run is a pure function of its config.  CSV files carry
the run id (a prefix of the config hash) instead of timestamps and are
byte-identical across repeats.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import struct
import time
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .baselines import cumulative_control_train, evaluate_sequence, run_bandit_baseline
from .envs import DOMAINS, make_domain
from .envs.bandit import BanditDomain
from .oracles import (
    MWU_EXACT_MAX,
    closed_form_checks,
    bandit_best_arm_value,
    mc_check,
    myopic_optimal_bound,
    raymaze_optimal_bound,
)
from .policy import ModelConfig, ModelPolicy, PolicyModel, RandomPolicy, model_config_for
from .selection import DEFAULT_EVAL_ENVS, CombinedPolicy, evaluate, select_k
from .training import TrainConfig, TrainingDivergence, init_generator, train

log = logging.getLogger(__name__)

TREATMENTS = ("first_explore", "ucb1", "ts", "random", "cumulative_control", "oracle")
STREAMS = {"train": 1, "eval": 2, "select_k": 3, "init": 4, "baseline": 5, "oracle": 6}
CONVENTIONS = {
    "mann_whitney": f"two-sided; exact null with midranks when min(n1, n2) <= {MWU_EXACT_MAX}, "
    "else normal approximation with tie and continuity correction; U = min(U1, U2)",
    "thompson_fixed_arm_prior": "point mass at mu1",
    "cumulative_control": "simplified REINFORCE surrogate, not a faithful meta-RL baseline",
}


class ConfigError(ValueError):
    pass


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named purpose."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(STREAMS[name],)))


def torch_generator(seed: int) -> torch.Generator:
    return init_generator(np.random.SeedSequence(int(seed), spawn_key=(STREAMS["init"],)))


@dataclass
class ExperimentConfig:
    treatment: str = "first_explore"
    domain: str = "bandit"
    domain_params: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    selection: dict = field(default_factory=dict)
    eval_envs: int | None = None
    seed: int = 1
    out: str = "runs/out"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.treatment not in TREATMENTS:
            raise ConfigError(f"unknown treatment {self.treatment!r}; expected one of {TREATMENTS}")
        if self.domain not in DOMAINS:
            raise ConfigError(f"unknown domain {self.domain!r}; expected one of {sorted(DOMAINS)}")
        if self.treatment in ("ucb1", "ts") and self.domain != "bandit":
            raise ConfigError(f"{self.treatment} only runs on the bandit domain")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an integer in [0, 2^64)")
        if self.eval_envs is not None and self.eval_envs < 1:
            raise ConfigError("eval_envs must be positive")
        try:
            domain = self.make_domain()
            TrainConfig.for_domain(self.domain, **self.train)
            mc = model_config_for(domain, **self.model)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if mc.hidden % mc.heads:
            raise ConfigError("model hidden size must be divisible by heads")
        unknown = set(self.selection) - {"eval_envs", "chunk"}
        if unknown:
            raise ConfigError(f"unknown selection keys {sorted(unknown)}")

    def make_domain(self):
        return make_domain(self.domain, **self.domain_params)

    def to_dict(self):
        return asdict(self)

    def canonical(self) -> str:
        """Serialisation that identifies the experiment; the output path is excluded."""
        d = self.to_dict()
        d.pop("out")
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    @property
    def run_id(self) -> str:
        return self.hash()[:12]

    @property
    def n_eval_envs(self) -> int:
        return self.eval_envs or DEFAULT_EVAL_ENVS[self.domain]

    @classmethod
    def from_dict(cls, d: dict):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- checkpoints

MAGIC = b"FEXCKPT\0"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def save_checkpoint(model: PolicyModel, path, domain: str = "", extra: dict | None = None):
    """Header (magic, version, JSON meta with shapes), float32 LE tensors, CRC32."""
    state = model.state_dict()
    header = {
        "domain": domain,
        "model": model.config.to_dict(),
        "tensors": [[name, list(t.shape)] for name, t in state.items()],
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
    buf.write(hbytes)
    for t in state.values():
        buf.write(t.detach().cpu().numpy().astype("<f4").tobytes())
    body = buf.getvalue()
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_checkpoint(path):
    """Returns (header dict, {name: float32 array})."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 12 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    version, hlen = struct.unpack("<II", body[len(MAGIC) : len(MAGIC) + 8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    off = len(MAGIC) + 8
    header = json.loads(body[off : off + hlen])
    off += hlen
    arrays = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape))
        if off + 4 * count > len(body):
            raise CheckpointError(f"{path}: tensor data truncated")
        arrays[name] = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
    if off != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensors")
    return header, arrays


def load_checkpoint(path, model: PolicyModel | None = None):
    """Load parameters; into ``model`` if given (shapes must match), else a new model."""
    header, arrays = read_checkpoint(path)
    if model is None:
        model = PolicyModel(ModelConfig(**header["model"]))
    state = model.state_dict()
    if set(state) != set(arrays):
        raise CheckpointShapeError(f"{path}: parameter names do not match the model")
    for name, t in state.items():
        if tuple(t.shape) != arrays[name].shape:
            raise CheckpointShapeError(f"{path}: {name} has shape {arrays[name].shape}, model expects {tuple(t.shape)}")
    with torch.no_grad():
        for name, t in state.items():
            t.copy_(torch.from_numpy(arrays[name].copy()).to(t.dtype))
    model.bump()
    return model


# ---------------------------------------------------------------- outputs

RESULT_FIELDS = ["run_id", "treatment", "domain", "seed", "episode_index", "mean_episode_reward", "mean_cumulative_reward", "n_envs"]


@dataclass
class ResultRow:
    run_id: str
    treatment: str
    domain: str
    seed: int
    episode_index: int
    mean_episode_reward: float
    mean_cumulative_reward: float
    n_envs: int


def result_rows(cfg: ExperimentConfig, episode_means, n_envs: int):
    cum = np.cumsum(episode_means)
    return [
        ResultRow(cfg.run_id, cfg.treatment, cfg.domain, cfg.seed, i + 1, float(m), float(c), n_envs)
        for i, (m, c) in enumerate(zip(episode_means, cum))
    ]


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_results(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def git_blob_id(path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def set_threads():
    n = os.environ.get("FE_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


# ---------------------------------------------------------------- runs


class RunDiverged(RuntimeError):
    pass


def build_model_config(cfg: ExperimentConfig, domain) -> ModelConfig:
    return model_config_for(domain, **cfg.model)


def run_first_explore(cfg, domain, out: Path, manifest: dict):
    tcfg = TrainConfig.for_domain(cfg.domain, **cfg.train)
    mcfg = build_model_config(cfg, domain)
    try:
        res = train(domain, tcfg, mcfg, stream(cfg.seed, "train"), torch_generator(cfg.seed))
    except TrainingDivergence as exc:
        if exc.last_good is not None:
            model = PolicyModel(mcfg)
            model.load_state_dict(exc.last_good)
            save_checkpoint(model, out / "last_good.ckpt", cfg.domain, {"run_id": cfg.run_id})
        raise RunDiverged(str(exc)) from exc
    write_training_log(out / "training_log.csv", cfg.run_id, res.log)
    save_checkpoint(res.theta, out / "policy.ckpt", cfg.domain, {"run_id": cfg.run_id})
    sel, ev = select_and_evaluate(cfg, domain, res.theta, out)
    manifest["k_star"] = sel.k_star
    return ev.episode_means


def select_and_evaluate(cfg, domain, model, out: Path):
    explore = ModelPolicy(model, "explore", greedy=True)
    exploit = ModelPolicy(model, "exploit", greedy=True)
    n_sel = cfg.selection.get("eval_envs", cfg.n_eval_envs)
    chunk = cfg.selection.get("chunk", 1024)
    sel = select_k(explore, exploit, domain, n_sel, stream(cfg.seed, "select_k"), chunk=chunk)
    write_csv(
        out / "k_curve.csv",
        ["run_id", "k", "mean", "std", "n_envs"],
        [[cfg.run_id, k, m, s, sel.n_envs] for k, (m, s) in enumerate(zip(sel.curve, sel.std))],
    )
    ev = evaluate(CombinedPolicy(explore, exploit, sel.k_star), domain, cfg.n_eval_envs, stream(cfg.seed, "eval"), chunk)
    return sel, ev


def write_training_log(path, run_id, rows):
    if not rows:
        return
    keys = [k for k in rows[0] if not k.startswith("_")]
    write_csv(path, ["run_id"] + keys, [[run_id] + [r[k] for k in keys] for r in rows])


def run_control(cfg, domain, out: Path, manifest: dict):
    tcfg = TrainConfig.for_domain(cfg.domain, **cfg.train)
    mcfg = build_model_config(cfg, domain)
    try:
        res = cumulative_control_train(domain, tcfg, mcfg, stream(cfg.seed, "train"), torch_generator(cfg.seed))
    except TrainingDivergence as exc:
        if exc.last_good is not None:
            model = PolicyModel(mcfg)
            model.load_state_dict(exc.last_good)
            save_checkpoint(model, out / "last_good.ckpt", cfg.domain, {"run_id": cfg.run_id})
        raise RunDiverged(str(exc)) from exc
    write_training_log(out / "training_log.csv", cfg.run_id, res.log)
    save_checkpoint(res.theta, out / "policy.ckpt", cfg.domain, {"run_id": cfg.run_id, "head": res.head})
    policy = ModelPolicy(res.theta, res.head, greedy=True)
    ev = evaluate_sequence(policy, domain, cfg.n_eval_envs, stream(cfg.seed, "eval"))
    return ev.episode_means


def run_bandit(cfg, domain: BanditDomain, algo: str):
    rng = stream(cfg.seed, "eval")
    E = cfg.n_eval_envs
    means = np.stack([e.means for e in domain.sample_envs(rng, E)])
    rewards = run_bandit_baseline(algo, means, domain.pulls, domain.noise_variance, rng)
    return rewards.mean(axis=0)


def run_random(cfg, domain):
    policy = RandomPolicy(domain.spec.action_count)
    ev = evaluate_sequence(policy, domain, cfg.n_eval_envs, stream(cfg.seed, "eval"))
    return ev.episode_means


def oracle_table(cfg, domain, n_samples: int = 1_000_000, tolerance: float = 0.02):
    """Rows (name, closed form, MC estimate, passed) relevant to ``domain``."""
    rng = stream(cfg.seed, "oracle")
    p = domain.params()
    rows = []
    if cfg.domain == "darkroom":
        checks = closed_form_checks(rho=p["rho"], n=p["episodes"] - 1)[:3]
    elif cfg.domain == "raymaze":
        checks = closed_form_checks(p=p["p_treasure"], episodes=p["episodes"], goals=p["goals"])[3:]
    else:
        checks = []
    for name, value, sampler, statistic in checks:
        r = mc_check(value, sampler, n_samples, tolerance, rng, statistic)
        rows.append((name, value, r.estimate, r.passed))
    if cfg.domain == "bandit":
        value = bandit_best_arm_value(domain.mu1, domain.arms)
        per_pull = np.array([e.means.max() for e in domain.sample_envs(rng, cfg.n_eval_envs)])
        # standard error of a max of normals is below 1 / sqrt(n); allow four of them
        tol = max(tolerance, 4.0 / np.sqrt(len(per_pull)))
        rows.append(("bandit_best_arm_per_pull", value, float(per_pull.mean()), abs(per_pull.mean() - value) <= tol))
    return rows


def oracle_headline(cfg, domain) -> float:
    p = domain.params()
    if cfg.domain == "darkroom":
        return myopic_optimal_bound(p["rho"], p["episodes"] - 1)
    if cfg.domain == "raymaze":
        return raymaze_optimal_bound(p["p_treasure"], p["episodes"], p["goals"])
    return float("nan")


def run_oracle(cfg, domain, out: Path, manifest: dict):
    rows = oracle_table(cfg, domain)
    write_csv(out / "oracle.csv", ["run_id", "name", "closed_form", "mc_estimate", "passed"], [[cfg.run_id, *r] for r in rows])
    manifest["oracle"] = {name: value for name, value, _, _ in rows}
    if cfg.domain == "bandit":
        return np.full(domain.pulls, rows[-1][1])
    manifest["oracle_bound"] = oracle_headline(cfg, domain)
    return None


def run_experiment(cfg: ExperimentConfig, out=None) -> dict:
    """Run one configured experiment and write its artifacts to ``out``."""
    set_threads()
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    domain = cfg.make_domain()
    cfg.save(out / "config.json")
    manifest = {
        "run_id": cfg.run_id,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "package_version": __version__,
        "conventions": CONVENTIONS,
        "status": "running",
    }
    try:
        if cfg.treatment == "first_explore":
            episode_means = run_first_explore(cfg, domain, out, manifest)
        elif cfg.treatment == "cumulative_control":
            episode_means = run_control(cfg, domain, out, manifest)
        elif cfg.treatment in ("ucb1", "ts"):
            episode_means = run_bandit(cfg, domain, cfg.treatment)
        elif cfg.treatment == "random":
            episode_means = run_random(cfg, domain)
        else:
            episode_means = run_oracle(cfg, domain, out, manifest)
        if episode_means is not None:
            rows = result_rows(cfg, episode_means, cfg.n_eval_envs)
            write_csv(out / "results.csv", RESULT_FIELDS, [list(asdict(r).values()) for r in rows])
            manifest["mean_cumulative_reward"] = rows[-1].mean_cumulative_reward
        manifest["status"] = "ok"
    except RunDiverged as exc:
        manifest["status"] = "diverged"
        manifest["error"] = str(exc)
        raise
    finally:
        manifest["wall_time_s"] = time.perf_counter() - start
        manifest["artifacts"] = {
            p.name: git_blob_id(p) for p in sorted(out.iterdir()) if p.is_file() and p.name != "manifest.json"
        }
        (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return manifest
