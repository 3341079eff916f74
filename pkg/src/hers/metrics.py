"""Distribution-trust metrics: Frechet distance, Gaussian KL, a learned
risk penalty with its bound check, and a probe-accuracy faithfulness proxy.

Features are a fixed seeded orthonormal projection of the raw samples (a
stand-in for a pretrained embedding network). Distances compare Gaussian
moment summaries of projected real versus generated samples. The risk
penalty is an affine nonnegative function of (Frechet, KL) fit by
projected coordinate descent, and the bound check asks whether generated
downstream loss stays within real loss plus that penalty.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from hers.linalg import GaussianStats, Matrix, SeededRng, as_matrix, sqrtm_psd, sym_eig

_KL_SINGULAR_TOL = 1e-10
_KL_RIDGE = 1e-10


@dataclass(frozen=True)
class FeatureProjector:
    """Fixed k x d projection with orthonormal rows."""

    proj: Matrix

    def __post_init__(self):
        proj = as_matrix(self.proj, "projection")
        gram = proj @ proj.T
        if not np.allclose(gram, np.eye(proj.shape[0]), atol=1e-10):
            raise ValueError("projection rows are not orthonormal")
        object.__setattr__(self, "proj", proj)

    @classmethod
    def from_rng(cls, k: int, d: int, rng: SeededRng) -> "FeatureProjector":
        """Orthonormalise a seeded Gaussian d x k matrix by modified Gram-Schmidt."""
        if not 1 <= k <= d:
            raise ValueError(f"need 1 <= k <= d, got k={k}, d={d}")
        g = rng.normals(d * k).reshape(d, k)
        for j in range(k):
            for i in range(j):
                g[:, j] -= (g[:, i] @ g[:, j]) * g[:, i]
            norm = float(np.linalg.norm(g[:, j]))
            if norm < 1e-12:
                raise ValueError("seeded Gaussian matrix was rank deficient")
            g[:, j] /= norm
        return cls(proj=g.T)

    @property
    def k(self) -> int:
        return self.proj.shape[0]

    @property
    def d(self) -> int:
        return self.proj.shape[1]

    def __call__(self, samples: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
        if x.shape[1] != self.d:
            raise ValueError(f"samples have width {x.shape[1]}, projector expects {self.d}")
        return x @ self.proj.T


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------


def fid(real: GaussianStats, gen: GaussianStats) -> float:
    """Frechet distance between Gaussian moment summaries.

    ||mu_r - mu_g||^2 + tr(S_r + S_g - 2 (S_r S_g)^{1/2}), with the cross
    square root evaluated on the symmetrised product
    sqrt(S_r) S_g sqrt(S_r), which shares its spectrum with S_r S_g but is
    symmetric PSD. Values within -1e-8 of zero clamp to zero.
    """
    if real.dim != gen.dim:
        raise ValueError(f"dimension mismatch: {real.dim} vs {gen.dim}")
    root_real = sqrtm_psd(real.cov)
    inner = root_real @ gen.cov @ root_real
    inner = 0.5 * (inner + inner.T)
    eigenvalues, _ = sym_eig(inner)
    cross = float(np.sqrt(np.clip(eigenvalues, 0.0, None)).sum())
    diff = real.mean - gen.mean
    value = float(diff @ diff + np.trace(real.cov) + np.trace(gen.cov) - 2.0 * cross)
    if value < -1e-8:
        raise ArithmeticError(f"Frechet distance evaluated to {value:.3e}; inputs are numerically inconsistent")
    return max(value, 0.0)


def kl_gaussian(p: GaussianStats, q: GaussianStats) -> float:
    """KL(p || q) between Gaussians in closed form.

    Requires q's covariance to be strictly positive definite. A singular
    p covariance is ridged by 1e-10 I for its log-determinant only.
    Values within -1e-10 of zero clamp to zero.
    """
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    k = p.dim
    wq, vq = sym_eig(q.cov)
    if float(wq.min()) <= _KL_SINGULAR_TOL:
        raise ValueError(f"covariance of q is singular (min eigenvalue {wq.min():.3e})")
    q_inv = (vq / wq) @ vq.T
    logdet_q = float(np.log(wq).sum())

    wp, _ = sym_eig(p.cov)
    if float(wp.min()) <= _KL_SINGULAR_TOL:
        logdet_p = float(np.log(wp + _KL_RIDGE).sum())
    else:
        logdet_p = float(np.log(wp).sum())

    diff = q.mean - p.mean
    value = 0.5 * (
        float(np.trace(q_inv @ p.cov)) + float(diff @ q_inv @ diff) - k + logdet_q - logdet_p
    )
    if value < -_KL_SINGULAR_TOL:
        raise ArithmeticError(f"KL evaluated to {value:.3e}; inputs are numerically inconsistent")
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# Risk penalty
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpsilonModel:
    """Nonnegative affine penalty a * frechet + b * kl."""

    a: float
    b: float
    residual: float

    def __post_init__(self):
        if self.a < 0.0 or self.b < 0.0:
            raise ValueError(f"penalty coefficients must be nonnegative, got ({self.a}, {self.b})")

    def __call__(self, fid_value: float, kl_value: float) -> float:
        return self.a * fid_value + self.b * kl_value


def nnls_two_term(
    f: np.ndarray,
    k: np.ndarray,
    e: np.ndarray,
    tol: float = 1e-10,
    max_iters: int = 100_000,
) -> tuple[float, float, list[float]]:
    """Projected coordinate descent for min ||a f + b k - e||^2, a,b >= 0.

    Each coordinate is minimised exactly then clamped at zero, so the
    objective never increases. Iterates until the coefficient change per
    sweep drops below ``tol``; returns (a, b, per-sweep objectives).
    """
    a = 0.0
    b = 0.0
    sff = float(f @ f)
    skk = float(k @ k)
    history: list[float] = []
    for _ in range(max_iters):
        a_new = a if sff == 0.0 else max(0.0, float(f @ (e - b * k)) / sff)
        b_new = b if skk == 0.0 else max(0.0, float(k @ (e - a_new * f)) / skk)
        resid = a_new * f + b_new * k - e
        history.append(float(resid @ resid))
        moved = abs(a_new - a) + abs(b_new - b)
        a, b = a_new, b_new
        if moved < tol:
            break
    return a, b, history


def fit_epsilon(calibration: Sequence[tuple[float, float, float]]) -> EpsilonModel:
    """Fit the penalty on (frechet, kl, observed excess loss) triples."""
    if len(calibration) < 2:
        raise ValueError(f"need at least 2 calibration points, got {len(calibration)}")
    f = np.array([p[0] for p in calibration], dtype=np.float64)
    k = np.array([p[1] for p in calibration], dtype=np.float64)
    e = np.array([p[2] for p in calibration], dtype=np.float64)
    if not (np.isfinite(f).all() and np.isfinite(k).all() and np.isfinite(e).all()):
        raise ValueError("calibration points must be finite")
    a, b, history = nnls_two_term(f, k, e)
    return EpsilonModel(a=a, b=b, residual=history[-1] if history else float(e @ e))


@dataclass(frozen=True)
class RiskBoundResult:
    satisfied: bool
    slack: float
    epsilon_value: float


def risk_bound_check(
    eps: EpsilonModel,
    fid_value: float,
    kl_value: float,
    gen_loss: float,
    real_loss: float,
) -> RiskBoundResult:
    """Check gen_loss <= real_loss + epsilon(frechet, kl); slack = rhs - lhs."""
    for name, value in (("fid", fid_value), ("kl", kl_value), ("gen_loss", gen_loss), ("real_loss", real_loss)):
        if not math.isfinite(value):
            raise ValueError(f"{name} must be finite, got {value}")
    epsilon_value = eps(fid_value, kl_value)
    slack = real_loss + epsilon_value - gen_loss
    return RiskBoundResult(satisfied=slack >= 0.0, slack=slack, epsilon_value=epsilon_value)


# ---------------------------------------------------------------------------
# Probe faithfulness
# ---------------------------------------------------------------------------


@dataclass
class LogisticProbe:
    weights: np.ndarray  # (classes, features)
    bias: np.ndarray  # (classes,)
    feat_mean: np.ndarray
    feat_scale: np.ndarray


def fit_probe(
    features: np.ndarray,
    labels: np.ndarray,
    n_classes: int,
    lr: float = 0.5,
    steps: int = 500,
    l2: float = 1e-4,
) -> LogisticProbe:
    """Multinomial logistic regression by full-batch gradient descent.

    Features are standardised with training statistics; weights start at
    zero, so the fit is deterministic.
    """
    x = as_matrix(features, "features")
    y = np.asarray(labels, dtype=np.int64)
    feat_mean = x.mean(axis=0)
    feat_scale = np.maximum(x.std(axis=0), 1e-8)
    z = (x - feat_mean) / feat_scale
    n = z.shape[0]
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y] = 1.0

    w = np.zeros((n_classes, z.shape[1]))
    b = np.zeros(n_classes)
    for _ in range(steps):
        logits = z @ w.T + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (g.T @ z + l2 * w)
        b -= lr * g.sum(axis=0)
    return LogisticProbe(weights=w, bias=b, feat_mean=feat_mean, feat_scale=feat_scale)


def probe_predict(probe: LogisticProbe, features: np.ndarray) -> np.ndarray:
    z = (np.atleast_2d(features) - probe.feat_mean) / probe.feat_scale
    return np.argmax(z @ probe.weights.T + probe.bias, axis=1)


def probe_accuracy(probe: LogisticProbe, features: np.ndarray, labels: np.ndarray) -> float:
    return float((probe_predict(probe, features) == np.asarray(labels)).mean())


def probe_faithfulness(
    real: Mapping[str, np.ndarray],
    gen: Mapping[str, np.ndarray],
    projector: FeatureProjector,
) -> float:
    """Accuracy of a real-trained domain probe on generated samples.

    The probe is fit on projected real samples with their domain labels
    and scored on projected generated samples against the domain each was
    conditioned on. Both mappings must cover the same domains in the same
    order, with at least two domains and ten samples per side per domain.
    """
    domains = list(real)
    if list(gen) != domains:
        raise ValueError(f"real and generated domain sets differ: {domains} vs {list(gen)}")
    if len(domains) < 2:
        raise ValueError("need at least 2 domains")
    for domain in domains:
        if real[domain].shape[0] < 10 or gen[domain].shape[0] < 10:
            raise ValueError(f"domain {domain!r} needs at least 10 real and 10 generated samples")

    real_feats = projector(np.concatenate([real[d] for d in domains]))
    real_labels = np.concatenate([np.full(real[d].shape[0], i) for i, d in enumerate(domains)])
    probe = fit_probe(real_feats, real_labels, n_classes=len(domains))

    gen_feats = projector(np.concatenate([gen[d] for d in domains]))
    gen_labels = np.concatenate([np.full(gen[d].shape[0], i) for i, d in enumerate(domains)])
    return probe_accuracy(probe, gen_feats, gen_labels)


# ---------------------------------------------------------------------------
# Report container
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DomainTrust:
    """Trust numbers for one domain (or the pooled aggregate)."""

    fid: float
    kl: float
    epsilon_value: float
    slack: float
    bound_satisfied: bool
    gen_loss: float
    real_loss: float

    def __post_init__(self):
        if self.fid < 0.0 or self.kl < 0.0:
            raise ValueError("distances must be nonnegative")


@dataclass(frozen=True)
class MetricsReport:
    """Per-run trust metrics, probe accuracy, and denoising-loss table.

    ``denoise_losses`` maps model name (base, expert_<domain>, merged) to
    a per-domain map of evaluation losses on real data.
    """

    domains: tuple[str, ...]
    per_domain: dict[str, DomainTrust]
    pooled: DomainTrust
    probe_accuracy: float
    epsilon_a: float
    epsilon_b: float
    epsilon_residual: float
    denoise_losses: dict[str, dict[str, float]]
    config_hash: str = ""
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.probe_accuracy <= 1.0:
            raise ValueError(f"probe accuracy {self.probe_accuracy} outside [0, 1]")

    def to_json(self) -> str:
        payload = {
            "schema_version": 1,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "domains": list(self.domains),
            "per_domain": {d: vars(t).copy() for d, t in self.per_domain.items()},
            "pooled": vars(self.pooled).copy(),
            "probe_accuracy": self.probe_accuracy,
            "epsilon_model": {"a": self.epsilon_a, "b": self.epsilon_b, "residual": self.epsilon_residual},
            "denoise_losses": self.denoise_losses,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        payload = json.loads(text)
        per_domain = {d: DomainTrust(**t) for d, t in payload["per_domain"].items()}
        eps = payload["epsilon_model"]
        return cls(
            domains=tuple(payload["domains"]),
            per_domain=per_domain,
            pooled=DomainTrust(**payload["pooled"]),
            probe_accuracy=payload["probe_accuracy"],
            epsilon_a=eps["a"],
            epsilon_b=eps["b"],
            epsilon_residual=eps["residual"],
            denoise_losses=payload["denoise_losses"],
            config_hash=payload["config_hash"],
            seed=payload["seed"],
        )

    # CSV columns, one row per model x domain plus merged-model pooled row.
    CSV_COLUMNS = (
        "model",
        "domain",
        "denoise_loss",
        "fid",
        "kl",
        "epsilon",
        "slack",
        "bound_satisfied",
        "probe_accuracy",
    )

    def to_csv(self) -> str:
        """Flatten to CSV. Trust columns are filled only on merged-model
        rows (the merged generator is what the distances audit); the
        probe accuracy appears on the pooled merged row."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.CSV_COLUMNS)
        for model_name in self.denoise_losses:
            for domain in self.domains:
                row = [model_name, domain, repr(self.denoise_losses[model_name][domain])]
                if model_name == "merged" and domain in self.per_domain:
                    t = self.per_domain[domain]
                    row += [repr(t.fid), repr(t.kl), repr(t.epsilon_value), repr(t.slack), str(t.bound_satisfied), ""]
                else:
                    row += ["", "", "", "", "", ""]
                writer.writerow(row)
        pooled = self.pooled
        writer.writerow(
            [
                "merged",
                "pooled",
                "",
                repr(pooled.fid),
                repr(pooled.kl),
                repr(pooled.epsilon_value),
                repr(pooled.slack),
                str(pooled.bound_satisfied),
                repr(self.probe_accuracy),
            ]
        )
        return buf.getvalue()
