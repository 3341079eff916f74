"""End-to-end orchestration: prompts -> data -> pretrain -> experts ->
merge -> evaluation, with on-disk artifacts between stages.

Every stage reads only the artifacts of earlier stages plus the config,
and derives its randomness from the config seed via labelled child
streams, so stages rerun independently and the whole pipeline is
byte-for-byte reproducible. File writes go through a temp file with a
``.partial`` suffix and are renamed into place on success.

Ground-truth data comes from seeded per-domain Gaussian mixtures; the
trained denoiser never doubles as its own data source.
"""

from __future__ import annotations

import hashlib
import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from hers.diffusion import Condition, NoiseSchedule, denoise_loss_terms, generate, make_schedule
from hers.experts import ExpertSet, TrainConfig, attach_adapters, fit_denoiser, merge_experts, train_expert
from hers.linalg import GaussianStats, SeededRng, as_matrix, gaussian_fit, sqrtm_psd
from hers.metrics import (
    DomainTrust,
    FeatureProjector,
    MetricsReport,
    fid,
    fit_epsilon,
    kl_gaussian,
    probe_faithfulness,
    risk_bound_check,
)
from hers.net import LoRAAdapter, MlpDenoiser, LinearLayer, build_denoiser
from hers.promptbank import (
    DOMAINS,
    PromptRecord,
    bank_to_lines,
    default_grammar,
    filter_bank,
    generate_prompts,
    read_bank,
)

CHECKPOINT_MAGIC = "HERS-CKPT"
CHECKPOINT_VERSION = 1


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MixtureComponent:
    mean: tuple[float, ...]
    cov: tuple[tuple[float, ...], ...]
    weight: float


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 42
    data_dim: int = 8
    domains: tuple[str, ...] = DOMAINS
    mixtures: dict[str, tuple[MixtureComponent, ...]] = field(default_factory=dict)
    n_per_domain: int = 400
    tau: float = 0.7
    delta: float = 0.9
    rank: int = 4
    lam: float = 1e-4
    lr: float = 3e-4
    batch_size: int = 32
    pretrain_steps: int = 600
    expert_steps: int = 2000
    timesteps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.08
    hidden: tuple[int, ...] = (64, 64, 64)
    cond_init_scale: float = 2.0
    adapt_input: bool = True
    feature_dim: int = 4
    eval_samples: int = 256
    out_dir: str = "runs/default"

    def __post_init__(self):
        if not self.domains:
            raise ValueError("at least one domain is required")
        if len(set(self.domains)) != len(self.domains):
            raise ValueError("domain labels must be unique")
        for name, value in (("tau", self.tau), ("delta", self.delta)):
            if not 0.0 < value <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {value}")
        for name, value in (
            ("data_dim", self.data_dim),
            ("n_per_domain", self.n_per_domain),
            ("rank", self.rank),
            ("batch_size", self.batch_size),
            ("timesteps", self.timesteps),
            ("feature_dim", self.feature_dim),
            ("eval_samples", self.eval_samples),
        ):
            if value < 1:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.pretrain_steps < 0 or self.expert_steps < 0:
            raise ValueError("step counts must be nonnegative")
        mixtures = self.mixtures or default_mixtures(self.domains, self.data_dim, self.seed)
        if set(mixtures) != set(self.domains):
            raise ValueError(f"mixtures cover {sorted(mixtures)} but domains are {sorted(self.domains)}")
        for domain, components in mixtures.items():
            total = sum(c.weight for c in components)
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"mixture weights for {domain!r} sum to {total}, expected 1")
            for c in components:
                if len(c.mean) != self.data_dim:
                    raise ValueError(f"mixture mean for {domain!r} has length {len(c.mean)}, expected {self.data_dim}")
        object.__setattr__(self, "mixtures", dict(mixtures))

    @classmethod
    def default(cls, seed: int = 42, **overrides) -> "PipelineConfig":
        return cls(seed=seed, **overrides)

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "data_dim": self.data_dim,
            "domains": list(self.domains),
            "mixtures": {
                d: [
                    {"mean": list(c.mean), "cov": [list(row) for row in c.cov], "weight": c.weight}
                    for c in comps
                ]
                for d, comps in self.mixtures.items()
            },
            "n_per_domain": self.n_per_domain,
            "tau": self.tau,
            "delta": self.delta,
            "rank": self.rank,
            "lam": self.lam,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "pretrain_steps": self.pretrain_steps,
            "expert_steps": self.expert_steps,
            "timesteps": self.timesteps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "hidden": list(self.hidden),
            "cond_init_scale": self.cond_init_scale,
            "adapt_input": self.adapt_input,
            "feature_dim": self.feature_dim,
            "eval_samples": self.eval_samples,
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "PipelineConfig":
        payload = dict(payload)
        if "mixtures" in payload:
            payload["mixtures"] = {
                d: tuple(
                    MixtureComponent(
                        mean=tuple(c["mean"]),
                        cov=tuple(tuple(row) for row in c["cov"]),
                        weight=c["weight"],
                    )
                    for c in comps
                )
                for d, comps in payload["mixtures"].items()
            }
        for key in ("domains", "hidden"):
            if key in payload:
                payload[key] = tuple(payload[key])
        return cls(**payload)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.timesteps, self.beta_start, self.beta_end)

    def train_config(self, steps: int) -> TrainConfig:
        return TrainConfig(
            steps=steps,
            labels=self.domains,
            lr=self.lr,
            batch_size=self.batch_size,
            lam=self.lam,
            rank=self.rank,
            seed=self.seed,
            adapt_input=self.adapt_input,
        )


def save_config(cfg: PipelineConfig, path: str | Path) -> None:
    _atomic_write(Path(path), json.dumps(cfg.to_json_dict(), sort_keys=True, indent=2) + "\n")


def load_config(path: str | Path) -> PipelineConfig:
    return PipelineConfig.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def default_mixtures(
    domains: Sequence[str], data_dim: int, seed: int, radius: float = 3.0, min_separation: float = 2.0
) -> dict[str, tuple[MixtureComponent, ...]]:
    """Two-component mixtures with means in a seeded ball and 0.25 I covs.

    Means are drawn uniformly from the radius-``radius`` ball and redrawn
    until every pair is at least ``min_separation`` apart, keeping the
    domains separable but overlapping. The radius bounds the inter-domain
    shifts; larger values make the experts' updates conflict harder under
    factor averaging.
    """
    rng = SeededRng(seed).child("mixtures")
    cov = tuple(tuple(0.25 if i == j else 0.0 for j in range(data_dim)) for i in range(data_dim))
    accepted: list[np.ndarray] = []

    def draw_mean() -> np.ndarray:
        while True:
            direction = rng.normals(data_dim)
            norm = float(np.linalg.norm(direction))
            if norm < 1e-12:
                continue
            r = radius * rng.uniform() ** (1.0 / data_dim)
            mean = direction / norm * r
            if all(float(np.linalg.norm(mean - other)) >= min_separation for other in accepted):
                accepted.append(mean)
                return mean

    mixtures = {}
    for domain in domains:
        components = tuple(
            MixtureComponent(mean=tuple(float(v) for v in draw_mean()), cov=cov, weight=0.5)
            for _ in range(2)
        )
        mixtures[domain] = components
    return mixtures


def mixture_moments(components: Sequence[MixtureComponent]) -> GaussianStats:
    """Analytic mean and covariance of a Gaussian mixture."""
    means = [np.array(c.mean) for c in components]
    covs = [as_matrix(c.cov, "component cov") for c in components]
    weights = [c.weight for c in components]
    mean = sum(w * m for w, m in zip(weights, means))
    cov = sum(w * (c + np.outer(m, m)) for w, m, c in zip(weights, means, covs)) - np.outer(mean, mean)
    return GaussianStats(mean, cov)


def sample_mixture(components: Sequence[MixtureComponent], n: int, rng: SeededRng) -> np.ndarray:
    """Draw ``n`` points; per point: component by weight, then the Gaussian."""
    factors = [sqrtm_psd(as_matrix(c.cov, "component cov")) for c in components]
    means = [np.array(c.mean) for c in components]
    cumulative = np.cumsum([c.weight for c in components])
    dim = means[0].size
    out = np.empty((n, dim))
    for i in range(n):
        u = rng.uniform()
        comp = int(np.searchsorted(cumulative, u, side="right"))
        comp = min(comp, len(components) - 1)
        out[i] = means[comp] + factors[comp] @ rng.normals(dim)
    return out


# ---------------------------------------------------------------------------
# Synthetic dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthPair:
    prompt_id: str
    domain: str
    sample: np.ndarray

    def to_json_line(self) -> str:
        return json.dumps(
            {"prompt_id": self.prompt_id, "domain": self.domain, "sample": [float(v) for v in self.sample]},
            sort_keys=True,
        )


def synth_dataset(bank: Sequence[PromptRecord], cfg: PipelineConfig, rng: SeededRng) -> list[SynthPair]:
    """One draw from the prompt's domain mixture per retained prompt."""
    retained = [rec for rec in bank if rec.retained]
    if not retained:
        raise ValueError("prompt bank has no retained records")
    pairs = []
    for rec in retained:
        if rec.domain not in cfg.mixtures:
            raise ValueError(f"unknown domain label {rec.domain!r} in prompt {rec.id}")
        sample = sample_mixture(cfg.mixtures[rec.domain], 1, rng)[0]
        pairs.append(SynthPair(prompt_id=rec.id, domain=rec.domain, sample=sample))
    return pairs


def write_dataset(pairs: Sequence[SynthPair], path: str | Path) -> None:
    _atomic_write(Path(path), "\n".join(p.to_json_line() for p in pairs) + "\n")


def read_dataset(path: str | Path) -> list[SynthPair]:
    pairs = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        payload = json.loads(line)
        pairs.append(
            SynthPair(
                prompt_id=payload["prompt_id"],
                domain=payload["domain"],
                sample=np.array(payload["sample"], dtype=np.float64),
            )
        )
    return pairs


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    """Versioned JSON container for a model, adapters, and schedule."""

    config_hash: str
    arch: dict
    schedule: dict
    layers: list[dict]
    adapters: dict[str, list[dict]] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION


def _encode_matrix(name: str, values: np.ndarray) -> dict:
    arr = np.atleast_2d(np.asarray(values, dtype=np.float64))
    if not np.isfinite(arr).all():
        raise ValueError(f"checkpoint matrix {name!r} contains non-finite entries")
    return {"name": name, "rows": arr.shape[0], "cols": arr.shape[1], "data": [float(v) for v in arr.ravel()]}


def _decode_matrix(payload: dict) -> tuple[str, np.ndarray]:
    rows, cols = payload["rows"], payload["cols"]
    data = np.array(payload["data"], dtype=np.float64)
    if data.size != rows * cols:
        raise ValueError(f"matrix {payload.get('name')!r} has {data.size} values for shape ({rows}, {cols})")
    if not np.isfinite(data).all():
        raise ValueError(f"matrix {payload.get('name')!r} contains non-finite entries")
    return payload["name"], data.reshape(rows, cols)


def checkpoint_from_model(
    model: MlpDenoiser,
    cfg: PipelineConfig,
    adapters: dict[str, list[LoRAAdapter]] | None = None,
) -> Checkpoint:
    layers = []
    for layer in model.layers:
        layers.append(_encode_matrix(f"{layer.name}.w0", layer.w0))
        layers.append(_encode_matrix(f"{layer.name}.bias", layer.bias))
    encoded_adapters = {}
    for domain, adapter_list in (adapters or {}).items():
        encoded_adapters[domain] = [
            {
                "layer_name": ad.layer_name,
                "rank": ad.rank,
                "domain": ad.domain,
                "a": _encode_matrix(f"{ad.layer_name}.a", ad.a),
                "b": _encode_matrix(f"{ad.layer_name}.b", ad.b),
            }
            for ad in adapter_list
        ]
    return Checkpoint(
        config_hash=cfg.config_hash(),
        arch={
            "data_dim": model.data_dim,
            "cond_dim": model.cond_dim,
            "time_dim": model.time_dim,
            "layer_names": [layer.name for layer in model.layers],
        },
        schedule={"timesteps": cfg.timesteps, "beta_start": cfg.beta_start, "beta_end": cfg.beta_end},
        layers=layers,
        adapters=encoded_adapters,
    )


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[MlpDenoiser, dict[str, list[LoRAAdapter]], NoiseSchedule]:
    by_name = {}
    for entry in ckpt.layers:
        name, matrix = _decode_matrix(entry)
        by_name[name] = matrix
    layers = []
    for layer_name in ckpt.arch["layer_names"]:
        w0 = by_name[f"{layer_name}.w0"]
        bias = by_name[f"{layer_name}.bias"].ravel()
        layers.append(LinearLayer(name=layer_name, w0=w0, bias=bias))
    model = MlpDenoiser(
        layers=layers,
        data_dim=ckpt.arch["data_dim"],
        cond_dim=ckpt.arch["cond_dim"],
        time_dim=ckpt.arch["time_dim"],
    )
    adapters = {}
    for domain, adapter_list in ckpt.adapters.items():
        adapters[domain] = [
            LoRAAdapter(
                layer_name=entry["layer_name"],
                a=_decode_matrix(entry["a"])[1],
                b=_decode_matrix(entry["b"])[1],
                rank=entry["rank"],
                domain=entry["domain"],
            )
            for entry in adapter_list
        ]
    sched = make_schedule(ckpt.schedule["timesteps"], ckpt.schedule["beta_start"], ckpt.schedule["beta_end"])
    return model, adapters, sched


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "version": ckpt.version,
        "config_hash": ckpt.config_hash,
        "arch": ckpt.arch,
        "schedule": ckpt.schedule,
        "layers": ckpt.layers,
        "adapters": ckpt.adapters,
    }
    _atomic_write(Path(path), json.dumps(payload, sort_keys=True, indent=1) + "\n")


def load_checkpoint(path: str | Path, expect_hash: str | None = None) -> Checkpoint:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    if payload.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"checkpoint {path} has bad magic {payload.get('magic')!r}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint {path} has unsupported version {payload.get('version')!r}")
    ckpt = Checkpoint(
        config_hash=payload["config_hash"],
        arch=payload["arch"],
        schedule=payload["schedule"],
        layers=payload["layers"],
        adapters=payload.get("adapters", {}),
        version=payload["version"],
    )
    if expect_hash is not None and ckpt.config_hash != expect_hash:
        warnings.warn(
            f"checkpoint {path} was written under config hash {ckpt.config_hash[:12]}..., "
            f"current config hashes to {expect_hash[:12]}...",
            stacklevel=2,
        )
    return ckpt


def _atomic_write(path: Path, text: str) -> None:
    """Write via a .partial temp file, renaming into place on success."""
    path.parent.mkdir(parents=True, exist_ok=True)
    partial = path.with_name(path.name + ".partial")
    partial.write_text(text, encoding="utf-8")
    os.replace(partial, path)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

BANK_FILE = "prompt_bank.jsonl"
DATASET_FILE = "dataset.jsonl"
BASE_CKPT = "base.ckpt.json"
MERGED_CKPT = "merged.ckpt.json"
REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"
PLOT_CSV = "plot_data.csv"


def expert_ckpt_name(domain: str) -> str:
    return f"expert_{domain}.ckpt.json"


def loss_log_name(tag: str) -> str:
    return f"losses_{tag}.json"


def _stage(stage: str):
    def wrap(fn):
        def run(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc

        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run

    return wrap


@_stage("prompts")
def stage_prompts(cfg: PipelineConfig, out: Path) -> Path:
    """Generate and filter the prompt bank; writes prompt_bank.jsonl."""
    rng = SeededRng(cfg.seed).child("prompts")
    records = generate_prompts(default_grammar(), cfg.n_per_domain, rng, domains=cfg.domains)
    filter_bank(records, cfg.tau, cfg.delta)
    path = out / BANK_FILE
    _atomic_write(path, "\n".join(bank_to_lines(records)) + "\n")
    return path


@_stage("synth")
def stage_synth(cfg: PipelineConfig, out: Path) -> Path:
    """Draw one mixture sample per retained prompt; writes dataset.jsonl."""
    bank = read_bank(out / BANK_FILE)
    rng = SeededRng(cfg.seed).child("synth")
    pairs = synth_dataset(bank, cfg, rng)
    path = out / DATASET_FILE
    write_dataset(pairs, path)
    return path


def _dataset_arrays(cfg: PipelineConfig, pairs: Sequence[SynthPair]) -> tuple[np.ndarray, np.ndarray]:
    x0 = np.stack([p.sample for p in pairs])
    one_hots = np.stack([Condition(cfg.domains, p.domain).one_hot() for p in pairs])
    return x0, one_hots


@_stage("pretrain")
def stage_pretrain(cfg: PipelineConfig, out: Path) -> Path:
    """Train the shared base denoiser on the pooled dataset."""
    pairs = read_dataset(out / DATASET_FILE)
    sched = cfg.schedule()
    model = build_denoiser(
        cfg.data_dim,
        len(cfg.domains),
        cfg.hidden,
        SeededRng(cfg.seed).child("model-init"),
        cond_init_scale=cfg.cond_init_scale,
    )
    x0, one_hots = _dataset_arrays(cfg, pairs)
    losses = fit_denoiser(
        model,
        x0,
        one_hots,
        sched,
        cfg.train_config(cfg.pretrain_steps),
        SeededRng(cfg.seed).child("pretrain"),
        model.gradable_params(),
    )
    save_checkpoint(out / BASE_CKPT, checkpoint_from_model(model, cfg))
    _atomic_write(out / loss_log_name("pretrain"), json.dumps(losses) + "\n")
    return out / BASE_CKPT


@_stage("train")
def stage_train(cfg: PipelineConfig, out: Path, domain: str) -> Path:
    """Train one domain expert against the frozen base."""
    if domain not in cfg.domains:
        raise ValueError(f"unknown domain {domain!r}; config has {list(cfg.domains)}")
    pairs = [p for p in read_dataset(out / DATASET_FILE) if p.domain == domain]
    base, _, sched = model_from_checkpoint(load_checkpoint(out / BASE_CKPT, cfg.config_hash()))
    adapters, losses = train_expert(base, domain, pairs, sched, cfg.train_config(cfg.expert_steps))
    path = out / expert_ckpt_name(domain)
    save_checkpoint(path, checkpoint_from_model(base, cfg, adapters={domain: adapters}))
    _atomic_write(out / loss_log_name(f"expert_{domain}"), json.dumps(losses) + "\n")
    return path


@_stage("merge")
def stage_merge(cfg: PipelineConfig, out: Path) -> Path:
    """Average expert factors into the merged adapter set."""
    base, _, _ = model_from_checkpoint(load_checkpoint(out / BASE_CKPT, cfg.config_hash()))
    adapters = {}
    for domain in cfg.domains:
        _, loaded, _ = model_from_checkpoint(load_checkpoint(out / expert_ckpt_name(domain), cfg.config_hash()))
        adapters[domain] = loaded[domain]
    experts = ExpertSet(base=base, adapters=adapters)
    merged = merge_experts(experts)
    path = out / MERGED_CKPT
    save_checkpoint(path, checkpoint_from_model(base, cfg, adapters={"merged": merged}))
    return path


def eval_denoise_loss(
    model: MlpDenoiser,
    x0: np.ndarray,
    one_hots: np.ndarray,
    ts: np.ndarray,
    noise: np.ndarray,
    sched: NoiseSchedule,
) -> float:
    """Noise-prediction MSE on a fixed evaluation draw (no penalty term),
    so different models are scored on identical corruption."""
    loss, _ = denoise_loss_terms(model, x0, one_hots, ts, noise, sched, lam=0.0)
    return loss


@_stage("eval")
def stage_eval(cfg: PipelineConfig, out: Path) -> Path:
    """Compute trust metrics and the loss table; writes the reports."""
    sched = cfg.schedule()
    base, _, _ = model_from_checkpoint(load_checkpoint(out / BASE_CKPT, cfg.config_hash()))
    merged_base, merged_adapters, _ = model_from_checkpoint(load_checkpoint(out / MERGED_CKPT, cfg.config_hash()))
    merged = attach_adapters(merged_base, merged_adapters["merged"])

    models: dict[str, MlpDenoiser] = {"base": base}
    for domain in cfg.domains:
        _, loaded, _ = model_from_checkpoint(load_checkpoint(out / expert_ckpt_name(domain), cfg.config_hash()))
        models[f"expert_{domain}"] = attach_adapters(base, loaded[domain])
    models["merged"] = merged

    eval_rng = SeededRng(cfg.seed)
    n = cfg.eval_samples
    real: dict[str, np.ndarray] = {}
    gen: dict[str, np.ndarray] = {}
    draws: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for domain in cfg.domains:
        real[domain] = sample_mixture(cfg.mixtures[domain], n, eval_rng.child(f"eval/real/{domain}"))
        gen[domain] = generate(
            merged, Condition(cfg.domains, domain), n, sched, eval_rng.child(f"eval/gen/{domain}")
        )
        loss_rng = eval_rng.child(f"eval/loss/{domain}")
        ts = np.array([1 + loss_rng.randbelow(sched.T) for _ in range(n)])
        noise = loss_rng.normals(n * cfg.data_dim).reshape(n, cfg.data_dim)
        draws[domain] = (ts, noise)

    # Per-model per-domain denoising losses on real data.
    denoise_losses: dict[str, dict[str, float]] = {}
    for name, model in models.items():
        denoise_losses[name] = {}
        for domain in cfg.domains:
            ts, noise = draws[domain]
            one_hots = np.tile(Condition(cfg.domains, domain).one_hot(), (n, 1))
            denoise_losses[name][domain] = eval_denoise_loss(model, real[domain], one_hots, ts, noise, sched)

    # Trust metrics on projected features of the merged generator.
    projector = FeatureProjector.from_rng(cfg.feature_dim, cfg.data_dim, eval_rng.child("projector"))
    per_domain_fid: dict[str, float] = {}
    per_domain_kl: dict[str, float] = {}
    excess: dict[str, float] = {}
    gen_losses: dict[str, float] = {}
    for domain in cfg.domains:
        real_stats = gaussian_fit(projector(real[domain]))
        gen_stats = gaussian_fit(projector(gen[domain]))
        per_domain_fid[domain] = fid(real_stats, gen_stats)
        per_domain_kl[domain] = kl_gaussian(real_stats, gen_stats)
        ts, noise = draws[domain]
        one_hots = np.tile(Condition(cfg.domains, domain).one_hot(), (n, 1))
        gen_losses[domain] = eval_denoise_loss(base, gen[domain], one_hots, ts, noise, sched)
        excess[domain] = gen_losses[domain] - denoise_losses["base"][domain]

    pooled_real = np.concatenate([real[d] for d in cfg.domains])
    pooled_gen = np.concatenate([gen[d] for d in cfg.domains])
    pooled_fid = fid(gaussian_fit(projector(pooled_real)), gaussian_fit(projector(pooled_gen)))
    pooled_kl = kl_gaussian(gaussian_fit(projector(pooled_real)), gaussian_fit(projector(pooled_gen)))

    calibration = [(per_domain_fid[d], per_domain_kl[d], excess[d]) for d in cfg.domains]
    if len(calibration) < 2:
        calibration = calibration + [(pooled_fid, pooled_kl, float(np.mean(list(excess.values()))))]
    eps_model = fit_epsilon(calibration)

    per_domain: dict[str, DomainTrust] = {}
    for domain in cfg.domains:
        check = risk_bound_check(
            eps_model,
            per_domain_fid[domain],
            per_domain_kl[domain],
            gen_loss=gen_losses[domain],
            real_loss=denoise_losses["base"][domain],
        )
        per_domain[domain] = DomainTrust(
            fid=per_domain_fid[domain],
            kl=per_domain_kl[domain],
            epsilon_value=check.epsilon_value,
            slack=check.slack,
            bound_satisfied=check.satisfied,
            gen_loss=gen_losses[domain],
            real_loss=denoise_losses["base"][domain],
        )

    pooled_gen_loss = float(np.mean([gen_losses[d] for d in cfg.domains]))
    pooled_real_loss = float(np.mean([denoise_losses["base"][d] for d in cfg.domains]))
    pooled_check = risk_bound_check(eps_model, pooled_fid, pooled_kl, pooled_gen_loss, pooled_real_loss)
    pooled = DomainTrust(
        fid=pooled_fid,
        kl=pooled_kl,
        epsilon_value=pooled_check.epsilon_value,
        slack=pooled_check.slack,
        bound_satisfied=pooled_check.satisfied,
        gen_loss=pooled_gen_loss,
        real_loss=pooled_real_loss,
    )

    if len(cfg.domains) >= 2:
        probe = probe_faithfulness(real, gen, projector)
    else:
        probe = 1.0  # a single-domain probe is vacuous

    report = MetricsReport(
        domains=cfg.domains,
        per_domain=per_domain,
        pooled=pooled,
        probe_accuracy=probe,
        epsilon_a=eps_model.a,
        epsilon_b=eps_model.b,
        epsilon_residual=eps_model.residual,
        denoise_losses=denoise_losses,
        config_hash=cfg.config_hash(),
        seed=cfg.seed,
    )
    _atomic_write(out / REPORT_JSON, report.to_json())
    _atomic_write(out / REPORT_CSV, report.to_csv())
    _atomic_write(out / PLOT_CSV, _plot_csv(cfg, out))
    return out / REPORT_JSON


def _plot_csv(cfg: PipelineConfig, out: Path) -> str:
    rows = ["step,domain,loss"]
    tags = ["pretrain"] + [f"expert_{d}" for d in cfg.domains]
    labels = ["pooled"] + list(cfg.domains)
    for tag, label in zip(tags, labels):
        path = out / loss_log_name(tag)
        if not path.exists():
            continue
        losses = json.loads(path.read_text(encoding="utf-8"))
        for step, loss in enumerate(losses):
            rows.append(f"{step},{label},{loss!r}")
    return "\n".join(rows) + "\n"


def run_all(cfg: PipelineConfig, out: str | Path) -> Path:
    """Run every stage in order; returns the report path."""
    out = Path(out)
    stage_prompts(cfg, out)
    stage_synth(cfg, out)
    stage_pretrain(cfg, out)
    for domain in cfg.domains:
        stage_train(cfg, out, domain)
    stage_merge(cfg, out)
    return stage_eval(cfg, out)
