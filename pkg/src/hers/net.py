"""A small MLP with low-rank-adapted linear layers and manual gradients.

Layers hold a frozen base weight ``w0`` plus an optional low-rank adapter
``(a, b)`` whose effective update is ``b @ a``. The adapter path is always
evaluated factored, ``b @ (a @ x)``, so the dense update matrix is never
materialised. Reverse-mode gradients are written out by hand and validated
against central finite differences by :func:`grad_check`.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from hers.linalg import SeededRng, as_matrix, as_vector


@dataclass
class LoRAAdapter:
    """Low-rank update factors for one named layer of one domain expert."""

    layer_name: str
    a: np.ndarray  # (rank, d_in)
    b: np.ndarray  # (d_out, rank)
    rank: int
    domain: str

    def __post_init__(self):
        self.a = as_matrix(self.a, "adapter factor a")
        self.b = as_matrix(self.b, "adapter factor b")
        if self.rank < 1:
            raise ValueError(f"adapter rank must be >= 1, got {self.rank}")
        if self.a.shape[0] != self.rank or self.b.shape[1] != self.rank:
            raise ValueError(
                f"adapter factors disagree with rank {self.rank}: a {self.a.shape}, b {self.b.shape}"
            )
        d_in = self.a.shape[1]
        d_out = self.b.shape[0]
        if self.rank > min(d_in, d_out):
            raise ValueError(f"rank {self.rank} exceeds min({d_out}, {d_in})")

    def delta(self) -> np.ndarray:
        """Materialised dense update b @ a (for audits and tests only)."""
        return self.b @ self.a


def init_adapter(layer: "LinearLayer", rank: int, domain: str, rng: SeededRng) -> LoRAAdapter:
    """Fresh adapter: a ~ N(0, 1/rank) entries, b = 0, so the delta is zero."""
    a = rng.normals(rank * layer.d_in).reshape(rank, layer.d_in) / math.sqrt(rank)
    b = np.zeros((layer.d_out, rank))
    return LoRAAdapter(layer_name=layer.name, a=a, b=b, rank=rank, domain=domain)


@dataclass
class LinearLayer:
    name: str
    w0: np.ndarray  # (d_out, d_in), frozen once adapted
    bias: np.ndarray  # (d_out,)
    adapter: LoRAAdapter | None = None

    def __post_init__(self):
        self.w0 = as_matrix(self.w0, f"{self.name}.w0")
        self.bias = as_vector(self.bias, f"{self.name}.bias")
        if self.bias.size != self.w0.shape[0]:
            raise ValueError(f"{self.name}: bias length {self.bias.size} != d_out {self.w0.shape[0]}")
        if self.adapter is not None:
            self.attach(self.adapter)

    @property
    def d_in(self) -> int:
        return self.w0.shape[1]

    @property
    def d_out(self) -> int:
        return self.w0.shape[0]

    def attach(self, adapter: LoRAAdapter) -> None:
        if adapter.a.shape[1] != self.d_in or adapter.b.shape[0] != self.d_out:
            raise ValueError(
                f"adapter shapes a {adapter.a.shape} / b {adapter.b.shape} do not compose "
                f"with layer {self.name} of shape ({self.d_out}, {self.d_in})"
            )
        self.adapter = adapter


def linear_forward(layer: LinearLayer, x: np.ndarray) -> np.ndarray:
    """Apply (w0 + b@a) @ x + bias, computing the adapter path factored.

    Accepts a single vector of length d_in or a batch of shape (n, d_in).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.d_in:
        raise ValueError(f"input of shape {x.shape} does not match layer {layer.name} d_in {layer.d_in}")
    y = x @ layer.w0.T + layer.bias
    if layer.adapter is not None:
        ad = layer.adapter
        y = y + (x @ ad.a.T) @ ad.b.T
    return y


@dataclass
class MlpDenoiser:
    """MLP noise predictor: leaky-ReLU hidden layers, identity output.

    The input is the concatenation of a data vector, a one-hot condition,
    and an 8-dim time embedding; the dimensional split is recorded so the
    diffusion code can validate what it feeds in.
    """

    layers: list[LinearLayer]
    data_dim: int
    cond_dim: int
    time_dim: int = 8
    leak: float = 0.01

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one layer")
        expected = self.data_dim + self.cond_dim + self.time_dim
        if self.layers[0].d_in != expected:
            raise ValueError(
                f"first layer d_in {self.layers[0].d_in} != data+cond+time dims {expected}"
            )
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.d_out != nxt.d_in:
                raise ValueError(f"layers {prev.name} -> {nxt.name} do not chain: {prev.d_out} != {nxt.d_in}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].d_in

    @property
    def out_dim(self) -> int:
        return self.layers[-1].d_out

    def hidden_layers(self) -> list[LinearLayer]:
        """The layers between the input and output projections."""
        return self.layers[1:-1]

    def layer(self, name: str) -> LinearLayer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(f"no layer named {name!r}")

    def gradable_params(self) -> dict[str, np.ndarray]:
        """Parameters that receive gradients, in layer order.

        Biases always flow; a layer's w0 flows only while no adapter is
        attached (the base is frozen under adaptation), and adapter
        factors flow whenever present.
        """
        params: dict[str, np.ndarray] = {}
        for layer in self.layers:
            if layer.adapter is None:
                params[f"{layer.name}.w0"] = layer.w0
            else:
                params[f"{layer.name}.a"] = layer.adapter.a
                params[f"{layer.name}.b"] = layer.adapter.b
            params[f"{layer.name}.bias"] = layer.bias
        return params

    def adapter_params(self) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        for layer in self.layers:
            if layer.adapter is not None:
                params[f"{layer.name}.a"] = layer.adapter.a
                params[f"{layer.name}.b"] = layer.adapter.b
        return params

    def base_params(self) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        for layer in self.layers:
            params[f"{layer.name}.w0"] = layer.w0
            params[f"{layer.name}.bias"] = layer.bias
        return params

    def adapters(self) -> list[LoRAAdapter]:
        return [layer.adapter for layer in self.layers if layer.adapter is not None]

    def clone(self) -> "MlpDenoiser":
        return copy.deepcopy(self)


def build_denoiser(
    data_dim: int,
    cond_dim: int,
    hidden: tuple[int, ...],
    rng: SeededRng,
    time_dim: int = 8,
    cond_init_scale: float = 1.0,
) -> MlpDenoiser:
    """Construct a denoiser with He-style seeded init and zero biases.

    ``cond_init_scale`` multiplies the initial input-projection columns
    that read the one-hot condition block. One-hot entries are O(1) while
    data coordinates spread over the mixture's range, so a modest boost
    keeps the conditioning channel from being drowned out early in
    training.
    """
    if not hidden:
        raise ValueError("need at least one hidden width")
    dims = [data_dim + cond_dim + time_dim, *hidden, data_dim]
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        w0 = rng.normals(d_out * d_in).reshape(d_out, d_in) * math.sqrt(2.0 / d_in)
        if i == 0 and cond_init_scale != 1.0:
            w0[:, data_dim : data_dim + cond_dim] *= cond_init_scale
        layers.append(LinearLayer(name=f"lin{i}", w0=w0, bias=np.zeros(d_out)))
    return MlpDenoiser(layers=layers, data_dim=data_dim, cond_dim=cond_dim, time_dim=time_dim)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    """Intermediates of one forward pass, consumed by :func:`backward`."""

    model: MlpDenoiser
    inputs: list[np.ndarray]  # input to each layer, 2-D
    pre_acts: list[np.ndarray]  # pre-activation output of each layer
    output: np.ndarray

    def kink_signature(self) -> bytes:
        """Sign pattern of all hidden pre-activations.

        Two evaluations with different signatures straddle a leaky-ReLU
        kink, which invalidates a finite-difference comparison there.
        """
        signs = [z > 0.0 for z in self.pre_acts[:-1]]
        if not signs:
            return b""
        return np.concatenate([s.ravel() for s in signs]).tobytes()


def forward(model: MlpDenoiser, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run the MLP on a vector or batch, caching intermediates."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    h = np.atleast_2d(x)
    if h.shape[1] != model.in_dim:
        raise ValueError(f"input width {h.shape[1]} != model input dim {model.in_dim}")
    inputs: list[np.ndarray] = []
    pre_acts: list[np.ndarray] = []
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        inputs.append(h)
        z = linear_forward(layer, h)
        pre_acts.append(z)
        h = np.where(z > 0.0, z, model.leak * z) if i < last else z
    cache = ForwardCache(model=model, inputs=inputs, pre_acts=pre_acts, output=h)
    return (h[0] if squeeze else h), cache


def backward(model: MlpDenoiser, cache: ForwardCache, upstream_grad: np.ndarray) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients for the cached forward pass.

    Returns gradients keyed like :meth:`MlpDenoiser.gradable_params`:
    biases everywhere, w0 for unadapted layers, and the (a, b) factors
    where an adapter is attached (the frozen w0 receives none).
    """
    if cache.model is not model:
        raise ValueError("cache does not belong to this model; run forward first")
    g = np.atleast_2d(np.asarray(upstream_grad, dtype=np.float64))
    if g.shape != cache.output.shape:
        raise ValueError(f"upstream grad shape {g.shape} != cached output shape {cache.output.shape}")

    grads: dict[str, np.ndarray] = {}
    last = len(model.layers) - 1
    for i in range(last, -1, -1):
        layer = model.layers[i]
        if i < last:
            z = cache.pre_acts[i]
            g = g * np.where(z > 0.0, 1.0, model.leak)
        x_in = cache.inputs[i]
        grads[f"{layer.name}.bias"] = g.sum(axis=0)
        if layer.adapter is None:
            grads[f"{layer.name}.w0"] = g.T @ x_in
            g = g @ layer.w0
        else:
            ad = layer.adapter
            u = x_in @ ad.a.T  # (n, rank)
            grads[f"{layer.name}.b"] = g.T @ u
            grads[f"{layer.name}.a"] = (g @ ad.b).T @ x_in
            g = g @ layer.w0 + (g @ ad.b) @ ad.a
    return {name: grads[name] for name in _gradable_order(model)}


def _gradable_order(model: MlpDenoiser) -> list[str]:
    names = []
    for layer in model.layers:
        if layer.adapter is None:
            names.append(f"{layer.name}.w0")
        else:
            names.append(f"{layer.name}.a")
            names.append(f"{layer.name}.b")
        names.append(f"{layer.name}.bias")
    return names


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam with bias correction; moment buffers mirror parameter shapes."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]
) -> dict[str, np.ndarray]:
    """One in-place Adam update of ``params`` along ``grads``."""
    state.step += 1
    t = state.step
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

LossFn = Callable[[], tuple[float, dict[str, np.ndarray]]]


def grad_check(
    model: MlpDenoiser,
    loss: LossFn,
    n_coords: int,
    rng: SeededRng,
    h: float = 1e-4,
    kink_signature: Callable[[], bytes] | None = None,
    max_resamples: int = 50,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss`` evaluates the model at its current parameters and returns
    ``(value, grads)`` with gradients covering the gradable parameters;
    frozen coordinates are therefore never sampled. Relative error per
    coordinate is |g_a - g_fd| / max(1e-8, |g_a| + |g_fd|); the maximum
    over ``n_coords`` sampled coordinates is returned.

    If ``kink_signature`` is given, a coordinate whose +/-h evaluations
    produce different activation sign patterns crossed a leaky-ReLU kink
    and is resampled rather than compared.
    """
    _, analytic = loss()
    params = model.gradable_params()
    names = [n for n in analytic if n in params]
    if not names:
        raise ValueError("loss returned no gradients for the model's gradable parameters")
    sizes = [params[n].size for n in names]
    total = sum(sizes)

    worst = 0.0
    for _ in range(n_coords):
        for _attempt in range(max_resamples):
            flat_index = rng.randbelow(total)
            for name, size in zip(names, sizes):
                if flat_index < size:
                    break
                flat_index -= size
            arr = params[name].reshape(-1)
            saved = arr[flat_index]

            arr[flat_index] = saved + h
            loss_plus, _ = loss()
            sig_plus = kink_signature() if kink_signature else None
            arr[flat_index] = saved - h
            loss_minus, _ = loss()
            sig_minus = kink_signature() if kink_signature else None
            arr[flat_index] = saved

            if kink_signature is not None and sig_plus != sig_minus:
                continue
            fd = (loss_plus - loss_minus) / (2.0 * h)
            ga = float(analytic[name].reshape(-1)[flat_index])
            rel = abs(ga - fd) / max(1e-8, abs(ga) + abs(fd))
            worst = max(worst, rel)
            break
        else:
            raise RuntimeError("could not sample a kink-free coordinate; model sits on activation kinks")
    return worst
