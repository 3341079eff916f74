"""Per-domain expert training and factor-wise merging.

An expert is a set of low-rank adapters trained on one domain's data
against a shared frozen base denoiser. Merging averages the adapter
factors elementwise per layer and then multiplies, so the merged update
is mean(b) @ mean(a). That is generally not the mean of the per-expert
updates mean(b_t @ a_t); :func:`merge_deltas_oracle` computes the latter
and :func:`merge_discrepancy` measures the gap, so the choice is audited
rather than assumed away.

All experts share one adapter initialisation (the init stream is keyed by
layer only, not by domain). With a common anchor for the ``a`` factors,
factor averaging stays close to delta averaging; with independent inits
the cross terms in mean(b) @ mean(a) would be uncontrolled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from hers.diffusion import Condition, NoiseSchedule, denoise_loss_terms
from hers.linalg import SeededRng
from hers.net import AdamState, LoRAAdapter, MlpDenoiser, adam_step, init_adapter


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for one denoiser fit (pretraining or a single expert).

    ``adapt_input`` controls whether the input projection carries an
    adapter alongside the hidden layers; the output projection never
    does. Adapting the input lets each expert specialise the conditioning
    channel directly, which is what keeps the merged model conditional.
    """

    steps: int
    labels: tuple[str, ...]
    lr: float = 3e-4
    batch_size: int = 32
    lam: float = 1e-4
    rank: int = 4
    seed: int = 0
    adapt_input: bool = True

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.labels:
            raise ValueError("labels must be nonempty")


def fit_denoiser(
    model: MlpDenoiser,
    x0: np.ndarray,
    one_hots: np.ndarray,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    rng: SeededRng,
    trainable: Mapping[str, np.ndarray],
) -> list[float]:
    """Adam minibatch training loop; returns the per-step loss log.

    Per step the rng draws, in order: batch indices (with replacement),
    one timestep per item, then the noise block. Only the parameters in
    ``trainable`` are updated; gradients for everything else are dropped.
    """
    n = x0.shape[0]
    if n == 0:
        raise ValueError("training set must be nonempty")
    opt = AdamState(lr=cfg.lr)
    losses: list[float] = []
    for _ in range(cfg.steps):
        idx = [rng.randbelow(n) for _ in range(cfg.batch_size)]
        ts = np.array([1 + rng.randbelow(sched.T) for _ in range(cfg.batch_size)])
        noise = rng.normals(cfg.batch_size * x0.shape[1]).reshape(cfg.batch_size, x0.shape[1])
        loss, grads = denoise_loss_terms(model, x0[idx], one_hots[idx], ts, noise, sched, cfg.lam)
        adam_step(opt, dict(trainable), {k: g for k, g in grads.items() if k in trainable})
        losses.append(loss)
    return losses


def train_expert(
    base: MlpDenoiser,
    domain: str,
    dataset: Sequence,
    sched: NoiseSchedule,
    cfg: TrainConfig,
) -> tuple[list[LoRAAdapter], list[float]]:
    """Train one domain expert; the base stays bitwise untouched.

    ``dataset`` items carry ``.domain`` and ``.sample``; every item must
    belong to ``domain``. Fresh adapters (zero effective delta) go on a
    private clone of the base, and only the adapter factors train. The
    adapter init stream depends on the seed alone, so all domains trained
    under one config share the same initialisation; a shared anchor for
    the ``a`` factors is what keeps factor averaging close to delta
    averaging at merge time.

    On the input-layer adapter, the ``a`` columns that read the one-hot
    condition block start at zero. Foreign condition inputs are always
    zero during an expert's training, so those columns receive no
    gradient and stay zero: the expert's update is exactly inert on
    conditions it never saw, which is what lets the merged adapters carry
    per-domain conditioning without cross-talk.
    """
    if len(dataset) == 0:
        raise ValueError(f"empty dataset for domain {domain!r}")
    bad = [item.domain for item in dataset if item.domain != domain]
    if bad:
        raise ValueError(f"dataset for domain {domain!r} contains other domains: {sorted(set(bad))}")
    if domain not in cfg.labels:
        raise ValueError(f"domain {domain!r} is not among labels {list(cfg.labels)}")

    model = base.clone()
    init_rng = SeededRng(cfg.seed).child("adapter-init")
    adapted = model.layers[:-1] if cfg.adapt_input else model.hidden_layers()
    for layer in adapted:
        adapter = init_adapter(layer, cfg.rank, domain, init_rng)
        if layer is model.layers[0]:
            adapter.a[:, model.data_dim : model.data_dim + model.cond_dim] = 0.0
        layer.attach(adapter)

    x0 = np.stack([np.asarray(item.sample, dtype=np.float64) for item in dataset])
    one_hot = Condition(cfg.labels, domain).one_hot()
    one_hots = np.tile(one_hot, (x0.shape[0], 1))

    train_rng = SeededRng(cfg.seed).child(f"train/{domain}")
    losses = fit_denoiser(model, x0, one_hots, sched, cfg, train_rng, model.adapter_params())
    return [layer.adapter for layer in model.layers if layer.adapter is not None], losses


def attach_adapters(base: MlpDenoiser, adapters: Sequence[LoRAAdapter]) -> MlpDenoiser:
    """Clone the base and attach adapters by layer name."""
    model = base.clone()
    for adapter in adapters:
        model.layer(adapter.layer_name).attach(adapter)
    return model


@dataclass
class ExpertSet:
    """A shared frozen base plus one adapter list per domain."""

    base: MlpDenoiser
    adapters: dict[str, list[LoRAAdapter]]
    logs: dict[str, list[float]] = field(default_factory=dict)

    def domains(self) -> list[str]:
        return list(self.adapters)

    def validate(self) -> None:
        if not self.adapters:
            raise ValueError("expert set has no experts")
        reference = None
        for domain, adapters in self.adapters.items():
            signature = [(ad.layer_name, ad.rank, ad.a.shape, ad.b.shape) for ad in adapters]
            if reference is None:
                reference = signature
                continue
            for ref, got in zip(reference, signature):
                if ref != got:
                    raise ValueError(
                        f"expert {domain!r} disagrees on layer {got[0]!r}: expected {ref}, got {got}"
                    )
            if len(signature) != len(reference):
                raise ValueError(f"expert {domain!r} adapts {len(signature)} layers, expected {len(reference)}")


def merge_experts(experts: ExpertSet) -> list[LoRAAdapter]:
    """Factor-wise arithmetic mean: per layer, average a's and b's.

    The merged model is base + mean(b) @ mean(a) per adapted layer.
    """
    experts.validate()
    domains = experts.domains()
    merged: list[LoRAAdapter] = []
    first = experts.adapters[domains[0]]
    for i, template in enumerate(first):
        a_mean = np.mean([experts.adapters[d][i].a for d in domains], axis=0)
        b_mean = np.mean([experts.adapters[d][i].b for d in domains], axis=0)
        merged.append(
            LoRAAdapter(
                layer_name=template.layer_name,
                a=a_mean,
                b=b_mean,
                rank=template.rank,
                domain="merged",
            )
        )
    return merged


def merge_deltas_oracle(experts: ExpertSet) -> dict[str, np.ndarray]:
    """Audit alternative: the dense mean of the materialised updates.

    Per layer returns mean over domains of b_t @ a_t. This is what factor
    averaging does NOT compute (except for a single expert or identical
    experts).
    """
    experts.validate()
    domains = experts.domains()
    out: dict[str, np.ndarray] = {}
    first = experts.adapters[domains[0]]
    for i, template in enumerate(first):
        out[template.layer_name] = np.mean(
            [experts.adapters[d][i].delta() for d in domains], axis=0
        )
    return out


def merge_discrepancy(experts: ExpertSet) -> dict[str, float]:
    """Frobenius gap per layer between factor-merge and delta-average."""
    merged = merge_experts(experts)
    deltas = merge_deltas_oracle(experts)
    gaps: dict[str, float] = {}
    for adapter in merged:
        diff = adapter.delta() - deltas[adapter.layer_name]
        gaps[adapter.layer_name] = float(np.sqrt((diff * diff).sum()))
    return gaps
