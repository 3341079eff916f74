"""Network forward/backward against finite differences and hand cases."""

import numpy as np
import pytest

from hers.diffusion import make_grad_check_loss, make_schedule
from hers.linalg import SeededRng
from hers.net import (
    AdamState,
    LinearLayer,
    LoRAAdapter,
    MlpDenoiser,
    adam_step,
    backward,
    build_denoiser,
    forward,
    grad_check,
    init_adapter,
    linear_forward,
)


def small_model(rng=None, cond_dim=2, hidden=(6, 6)):
    rng = rng or SeededRng(0)
    return build_denoiser(data_dim=3, cond_dim=cond_dim, hidden=hidden, rng=rng)


def adapted_model(rng=None, rank=2, perturb_b=0.0):
    rng = rng or SeededRng(0)
    model = small_model(rng)
    for layer in model.layers[:-1]:
        adapter = init_adapter(layer, rank, "dom", rng)
        if perturb_b:
            adapter.b += perturb_b * rng.normals(adapter.b.size).reshape(adapter.b.shape)
        layer.attach(adapter)
    return model


class TestLinearForward:
    def test_fresh_adapter_is_exact_noop(self):
        layer = LinearLayer("l", w0=SeededRng(1).normals(12).reshape(3, 4), bias=np.array([0.1, -0.2, 0.3]))
        x = SeededRng(2).normals(4)
        base_out = linear_forward(layer, x)
        layer.attach(init_adapter(layer, rank=2, domain="d", rng=SeededRng(3)))
        assert np.array_equal(linear_forward(layer, x), base_out)

    def test_hand_case(self):
        layer = LinearLayer(
            "l",
            w0=np.eye(2),
            bias=np.zeros(2),
            adapter=LoRAAdapter("l", a=np.array([[1.0, 0.0]]), b=np.array([[1.0], [0.0]]), rank=1, domain="d"),
        )
        np.testing.assert_allclose(linear_forward(layer, np.array([1.0, 1.0])), [2.0, 1.0])

    def test_factored_equals_dense(self):
        rng = SeededRng(4)
        for _ in range(10):
            w0 = rng.normals(20).reshape(4, 5)
            layer = LinearLayer("l", w0=w0, bias=rng.normals(4))
            adapter = init_adapter(layer, rank=2, domain="d", rng=rng)
            adapter.b += rng.normals(adapter.b.size).reshape(adapter.b.shape)
            layer.attach(adapter)
            x = rng.normals(5)
            dense = (w0 + adapter.b @ adapter.a) @ x + layer.bias
            np.testing.assert_allclose(linear_forward(layer, x), dense, atol=1e-12)

    def test_shape_mismatch(self):
        layer = LinearLayer("l", w0=np.eye(3), bias=np.zeros(3))
        with pytest.raises(ValueError, match="d_in"):
            linear_forward(layer, np.zeros(4))


class TestAdapterInvariants:
    def test_rank_bounds(self):
        with pytest.raises(ValueError, match="rank"):
            LoRAAdapter("l", a=np.zeros((5, 3)), b=np.zeros((3, 5)), rank=5, domain="d")

    def test_fresh_delta_is_zero(self):
        layer = LinearLayer("l", w0=np.zeros((4, 6)), bias=np.zeros(4))
        adapter = init_adapter(layer, rank=3, domain="d", rng=SeededRng(5))
        assert np.array_equal(adapter.delta(), np.zeros((4, 6)))

    def test_attach_rejects_wrong_shape(self):
        layer = LinearLayer("l", w0=np.zeros((4, 6)), bias=np.zeros(4))
        bad = LoRAAdapter("l", a=np.zeros((2, 5)), b=np.zeros((4, 2)), rank=2, domain="d")
        with pytest.raises(ValueError, match="compose"):
            layer.attach(bad)


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        model = adapted_model(perturb_b=0.1)
        x = SeededRng(6).normals(model.in_dim)
        _, cache = forward(model, x)
        grads = backward(model, cache, np.zeros(model.out_dim))
        assert all(np.array_equal(g, np.zeros_like(g)) for g in grads.values())

    def test_scalar_chain_bias_grad_is_one(self):
        layer = LinearLayer("l", w0=np.array([[2.0]]), bias=np.array([0.0]))
        model = MlpDenoiser(layers=[layer], data_dim=1, cond_dim=0, time_dim=0)
        _, cache = forward(model, np.array([0.7]))
        grads = backward(model, cache, np.array([1.0]))
        np.testing.assert_allclose(grads["l.bias"], [1.0])

    def test_frozen_w0_receives_no_gradient(self):
        model = adapted_model()
        x = SeededRng(7).normals(model.in_dim)
        _, cache = forward(model, x)
        grads = backward(model, cache, np.ones(model.out_dim))
        adapted = {f"{layer.name}" for layer in model.layers if layer.adapter is not None}
        for name in adapted:
            assert f"{name}.w0" not in grads
            assert f"{name}.a" in grads and f"{name}.b" in grads

    def test_backward_requires_matching_cache(self):
        model = adapted_model()
        other = adapted_model()
        _, cache = forward(model, SeededRng(8).normals(model.in_dim))
        with pytest.raises(ValueError, match="cache"):
            backward(other, cache, np.ones(model.out_dim))

    def test_matches_finite_differences_everywhere(self):
        sched = make_schedule(10)
        model = adapted_model(perturb_b=0.05)
        rng = SeededRng(9)
        n = 4
        x0 = rng.normals(n * 3).reshape(n, 3)
        one_hots = np.zeros((n, 2))
        one_hots[:, 0] = 1.0
        ts = np.array([1 + rng.randbelow(10) for _ in range(n)])
        noise = rng.normals(n * 3).reshape(n, 3)
        loss_fn, kink = make_grad_check_loss(model, x0, one_hots, ts, noise, sched, lam=1e-4)
        err = grad_check(model, loss_fn, n_coords=120, rng=SeededRng(10), kink_signature=kink)
        assert err < 1e-4


class TestGradCheck:
    def test_quadratic_closed_form(self):
        # single linear layer, loss = ||Wx + b - y||^2: finite differences
        # are exact for quadratics up to rounding
        layer = LinearLayer("l", w0=SeededRng(11).normals(6).reshape(2, 3), bias=np.zeros(2))
        model = MlpDenoiser(layers=[layer], data_dim=1, cond_dim=0, time_dim=2)
        x = SeededRng(12).normals(3)
        y = np.array([0.3, -0.7])

        def loss():
            out, cache = forward(model, x)
            resid = out - y
            grads = backward(model, cache, 2.0 * resid)
            return float(resid @ resid), grads

        err = grad_check(model, loss, n_coords=8, rng=SeededRng(13))
        assert err < 1e-6

    def test_only_trainable_coords_sampled(self):
        model = adapted_model()
        sampled_names = set()
        x = SeededRng(14).normals(model.in_dim)

        def loss():
            out, cache = forward(model, x)
            grads = backward(model, cache, out)
            sampled_names.update(grads)
            return float(0.5 * (out @ out)), grads

        grad_check(model, loss, n_coords=30, rng=SeededRng(15))
        assert not any(name.endswith(".w0") for layer in model.layers[:-1] for name in sampled_names if layer.name in name)


class TestAdam:
    def test_zero_gradient_is_fixed_point(self):
        params = {"p": np.array([1.0, -2.0])}
        before = params["p"].copy()
        adam_step(AdamState(lr=0.1), params, {"p": np.zeros(2)})
        assert np.array_equal(params["p"], before)

    def test_first_step_moves_by_lr(self):
        params = {"p": np.array([0.0])}
        adam_step(AdamState(lr=3e-4), params, {"p": np.array([1.0])})
        np.testing.assert_allclose(params["p"], [-3e-4], rtol=1e-6)

    def test_deterministic_trajectories(self):
        def run():
            rng = SeededRng(16)
            params = {"p": rng.normals(4)}
            state = AdamState(lr=0.01)
            for _ in range(25):
                g = params["p"] * 2.0 + rng.normals(4) * 0.1
                adam_step(state, params, {"p": g})
            return params["p"].copy()

        assert np.array_equal(run(), run())

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            adam_step(AdamState(lr=0.1), {"p": np.zeros(2)}, {"p": np.zeros(3)})


class TestModelInvariants:
    def test_zero_delta_init_model_outputs_bitwise_equal(self):
        rng = SeededRng(17)
        base = small_model(rng)
        x = rng.normals(base.in_dim)
        base_out, _ = forward(base, x)
        adapted = base.clone()
        for layer in adapted.layers[:-1]:
            layer.attach(init_adapter(layer, rank=2, domain="d", rng=rng))
        adapted_out, _ = forward(adapted, x)
        assert np.array_equal(base_out, adapted_out)

    def test_cond_init_scale_boosts_condition_columns(self):
        plain = build_denoiser(3, 2, (6,), SeededRng(18), cond_init_scale=1.0)
        boosted = build_denoiser(3, 2, (6,), SeededRng(18), cond_init_scale=2.0)
        np.testing.assert_allclose(boosted.layers[0].w0[:, 3:5], 2.0 * plain.layers[0].w0[:, 3:5])
        np.testing.assert_allclose(boosted.layers[0].w0[:, :3], plain.layers[0].w0[:, :3])

    def test_layer_chain_validation(self):
        l0 = LinearLayer("a", w0=np.zeros((4, 5)), bias=np.zeros(4))
        l1 = LinearLayer("b", w0=np.zeros((4, 3)), bias=np.zeros(4))
        with pytest.raises(ValueError, match="chain"):
            MlpDenoiser(layers=[l0, l1], data_dim=2, cond_dim=1, time_dim=2)
