"""Conditional denoising-diffusion machinery.

Standard DDPM pieces at desk scale: a linear beta schedule, the closed-form
forward noising, a noise-prediction MSE training loss with a Frobenius
penalty on adapter factors, and the ancestral reverse sampler used as the
generator. Timesteps are 1-indexed (t in 1..T).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from hers.linalg import SeededRng
from hers.net import MlpDenoiser, backward, forward

TIME_DIM = 8


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return self.betas.size

    def alpha_bar(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} out of range 1..{self.T}")
        return float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} out of range 1..{self.T}")
        return float(self.betas[t - 1])


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.08) -> NoiseSchedule:
    """Linear beta schedule with running-product alpha bars.

    The default endpoint is chosen so that at T=100 the terminal signal
    ratio is near zero (alpha_bar_T ~ 0.016): the reverse sampler starts
    from pure noise, so the forward process must actually reach it.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


@dataclass(frozen=True)
class Condition:
    """One-hot domain conditioning over an ordered label set."""

    labels: tuple[str, ...]
    label: str

    def __post_init__(self):
        if self.label not in self.labels:
            raise ValueError(f"unknown domain {self.label!r}; expected one of {list(self.labels)}")

    @property
    def index(self) -> int:
        return self.labels.index(self.label)

    def one_hot(self) -> np.ndarray:
        vec = np.zeros(len(self.labels))
        vec[self.index] = 1.0
        return vec


def time_embedding(ts: np.ndarray, T: int) -> np.ndarray:
    """Sinusoidal features of t/T: sin and cos at frequencies pi * 2^k, k=0..3."""
    u = np.atleast_1d(np.asarray(ts, dtype=np.float64)) / T
    freqs = math.pi * 2.0 ** np.arange(TIME_DIM // 2)
    phases = u[:, None] * freqs[None, :]
    return np.concatenate([np.sin(phases), np.cos(phases)], axis=1)


def q_sample(x0: np.ndarray, t: int, noise: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    abar = sched.alpha_bar(t)
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * noise


def _assemble(model: MlpDenoiser, x_t: np.ndarray, one_hots: np.ndarray, ts: np.ndarray, T: int) -> np.ndarray:
    if one_hots.shape[1] != model.cond_dim:
        raise ValueError(f"condition width {one_hots.shape[1]} != model cond dim {model.cond_dim}")
    if x_t.shape[1] != model.data_dim:
        raise ValueError(f"data width {x_t.shape[1]} != model data dim {model.data_dim}")
    return np.concatenate([x_t, one_hots, time_embedding(ts, T)], axis=1)


def regularizer(model: MlpDenoiser) -> float:
    """Sum of squared Frobenius norms of all attached adapter factors."""
    total = 0.0
    for ad in model.adapters():
        total += float((ad.a * ad.a).sum() + (ad.b * ad.b).sum())
    return total


def denoise_loss_terms(
    model: MlpDenoiser,
    x0: np.ndarray,
    one_hots: np.ndarray,
    ts: np.ndarray,
    noise: np.ndarray,
    sched: NoiseSchedule,
    lam: float,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradients for fixed timesteps and noise.

    loss = mean over the batch of the squared noise-prediction residual
    norm, plus lam times the adapter Frobenius penalty. Gradients cover
    the model's gradable parameters and include the penalty term. This
    deterministic core is what the gradient checker drives.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    one_hots = np.atleast_2d(np.asarray(one_hots, dtype=np.float64))
    ts = np.asarray(ts, dtype=np.int64)
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    n = x0.shape[0]
    if n == 0:
        raise ValueError("batch must be nonempty")

    abars = np.array([sched.alpha_bar(int(t)) for t in ts])
    x_t = np.sqrt(abars)[:, None] * x0 + np.sqrt(1.0 - abars)[:, None] * noise
    inputs = _assemble(model, x_t, one_hots, ts, sched.T)
    pred, cache = forward(model, inputs)
    resid = pred - noise
    mse = float((resid * resid).sum() / n)
    grads = backward(model, cache, 2.0 * resid / n)

    reg = 0.0
    for layer in model.layers:
        ad = layer.adapter
        if ad is None:
            continue
        reg += float((ad.a * ad.a).sum() + (ad.b * ad.b).sum())
        grads[f"{layer.name}.a"] = grads[f"{layer.name}.a"] + 2.0 * lam * ad.a
        grads[f"{layer.name}.b"] = grads[f"{layer.name}.b"] + 2.0 * lam * ad.b
    return mse + lam * reg, grads


def denoise_loss(
    model: MlpDenoiser,
    batch: Sequence[tuple[np.ndarray, Condition]],
    sched: NoiseSchedule,
    rng: SeededRng,
    lam: float = 0.0,
) -> tuple[float, dict[str, np.ndarray]]:
    """Training loss on a batch of (sample, condition) pairs.

    Timesteps are drawn uniformly per item, then the per-item noise, in
    that order, so the draw sequence is pinned by the rng.
    """
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    x0 = np.stack([np.asarray(x, dtype=np.float64) for x, _ in batch])
    one_hots = np.stack([cond.one_hot() for _, cond in batch])
    ts = np.array([1 + rng.randbelow(sched.T) for _ in batch])
    noise = rng.normals(x0.size).reshape(x0.shape)
    return denoise_loss_terms(model, x0, one_hots, ts, noise, sched, lam)


def make_grad_check_loss(
    model: MlpDenoiser,
    x0: np.ndarray,
    one_hots: np.ndarray,
    ts: np.ndarray,
    noise: np.ndarray,
    sched: NoiseSchedule,
    lam: float,
):
    """Bind a fixed evaluation batch into (loss_fn, kink_signature_fn).

    The signature function reports the activation sign pattern of the most
    recent evaluation, letting the checker skip kink-crossing coordinates.
    """
    state: dict[str, bytes] = {"sig": b""}
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    one_hots = np.atleast_2d(np.asarray(one_hots, dtype=np.float64))
    ts_arr = np.asarray(ts, dtype=np.int64)
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))

    abars = np.array([sched.alpha_bar(int(t)) for t in ts_arr])
    x_t = np.sqrt(abars)[:, None] * x0 + np.sqrt(1.0 - abars)[:, None] * noise
    inputs = _assemble(model, x_t, one_hots, ts_arr, sched.T)
    n = x0.shape[0]

    def loss_fn() -> tuple[float, dict[str, np.ndarray]]:
        pred, cache = forward(model, inputs)
        state["sig"] = cache.kink_signature()
        resid = pred - noise
        mse = float((resid * resid).sum() / n)
        grads = backward(model, cache, 2.0 * resid / n)
        reg = 0.0
        for layer in model.layers:
            ad = layer.adapter
            if ad is None:
                continue
            reg += float((ad.a * ad.a).sum() + (ad.b * ad.b).sum())
            grads[f"{layer.name}.a"] = grads[f"{layer.name}.a"] + 2.0 * lam * ad.a
            grads[f"{layer.name}.b"] = grads[f"{layer.name}.b"] + 2.0 * lam * ad.b
        return mse + lam * reg, grads

    return loss_fn, lambda: state["sig"]


def generate(
    model: MlpDenoiser,
    cond: Condition,
    n: int,
    sched: NoiseSchedule,
    rng: SeededRng,
) -> np.ndarray:
    """Ancestral reverse sampling from pure noise under one condition.

    Uses the posterior variance beta_t * (1 - abar_{t-1}) / (1 - abar_t)
    with abar_0 = 1, and adds no noise at the final step. Deterministic
    under the rng: the initial batch noise is drawn first, then one batch
    of noise per step from t = T down to 2.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(cond.labels) != model.cond_dim:
        raise ValueError(f"condition has {len(cond.labels)} labels but model cond dim is {model.cond_dim}")
    d = model.data_dim
    one_hots = np.tile(cond.one_hot(), (n, 1))
    x = rng.normals(n * d).reshape(n, d)
    for t in range(sched.T, 0, -1):
        abar = sched.alpha_bar(t)
        abar_prev = sched.alpha_bar(t - 1) if t > 1 else 1.0
        beta = sched.beta(t)
        alpha = 1.0 - beta
        ts = np.full(n, t)
        eps_hat, _ = forward(model, _assemble(model, x, one_hots, ts, sched.T))
        mean = (x - beta / math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(alpha)
        if t > 1:
            var = beta * (1.0 - abar_prev) / (1.0 - abar)
            x = mean + math.sqrt(var) * rng.normals(n * d).reshape(n, d)
        else:
            x = mean
    return x
