"""LoRA layers: zero-init neutrality, forward algebra, merge equivalence, and
analytic gradients against central finite differences."""
import numpy as np
import pytest

from deskvla.lora import (
    AdaptedLinear,
    LoRAAdapter,
    adapter_forward,
    adapter_gradients,
    adapter_input_gradient,
    merge,
)
from deskvla.quant import dequantize_nf4, quantize_nf4


def make_layer(d_in=16, d_out=8, rank=4, alpha=8.0, dropout_p=0.0, seed=0, nf4=False):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((d_out, d_in)).astype(np.float32) * 0.3
    base = quantize_nf4(w) if nf4 else w
    ad = LoRAAdapter.create(d_in, d_out, rank=rank, alpha=alpha,
                            dropout_p=dropout_p, rng=rng)
    return AdaptedLinear(base=base, adapter=ad), rng


class TestForward:
    def test_zero_init_is_neutral(self):
        layer, rng = make_layer()
        x = rng.standard_normal(16).astype(np.float32)
        y, _ = adapter_forward(layer, x)
        assert np.array_equal(y, (x @ layer.base.T).astype(np.float32))

    def test_alpha_scaling_zero_means_base(self):
        layer, rng = make_layer()
        layer.adapter.b[:] = rng.standard_normal(layer.adapter.b.shape) * 0.1
        y_full, _ = adapter_forward(layer, np.ones(16, dtype=np.float32))
        # scale the adapter away via a tiny alpha and compare against base
        tiny = LoRAAdapter(a=layer.adapter.a, b=np.zeros_like(layer.adapter.b),
                           rank=4, alpha=8.0)
        y_base, _ = adapter_forward(AdaptedLinear(layer.base, tiny),
                                    np.ones(16, dtype=np.float32))
        assert not np.array_equal(y_full, y_base)
        assert np.allclose(y_base, np.ones(16, dtype=np.float32) @ layer.base.T)

    def test_matches_two_step_reference(self):
        layer, rng = make_layer(seed=3)
        layer.adapter.b[:] = rng.standard_normal(layer.adapter.b.shape).astype(np.float32) * 0.1
        x = rng.standard_normal((5, 16)).astype(np.float32)
        y, _ = adapter_forward(layer, x)
        ad = layer.adapter
        ref = x @ layer.base.T + (ad.alpha / ad.rank) * (x @ ad.a.T) @ ad.b.T
        assert np.allclose(y, ref, rtol=1e-6, atol=1e-7)

    def test_nf4_base_routes_through_matvec(self):
        layer, rng = make_layer(seed=5, nf4=True)
        x = rng.standard_normal(16).astype(np.float32)
        y, _ = adapter_forward(layer, x)
        ref = dequantize_nf4(layer.base).astype(np.float64) @ x
        assert np.abs(y - ref).max() <= 1e-5 * max(1.0, np.abs(ref).max())

    def test_dropout_identity_at_inference(self):
        layer, rng = make_layer(dropout_p=0.5)
        layer.adapter.b[:] = 0.1
        x = rng.standard_normal(16).astype(np.float32)
        y1, _ = adapter_forward(layer, x, training=False)
        y2, _ = adapter_forward(layer, x, training=False)
        assert np.array_equal(y1, y2)

    def test_dropout_applies_only_to_adapter_branch(self):
        layer, rng = make_layer(dropout_p=0.9, seed=9)
        x = rng.standard_normal(16).astype(np.float32)
        # B is zero, so even aggressive dropout must not change the output
        y, _ = adapter_forward(layer, x, training=True, rng=np.random.default_rng(0))
        assert np.allclose(y, x @ layer.base.T, rtol=1e-6, atol=1e-7)

    def test_dimension_mismatch(self):
        layer, _ = make_layer()
        with pytest.raises(ValueError, match="dim"):
            adapter_forward(layer, np.ones(17, dtype=np.float32))


class TestMerge:
    def test_zero_adapter_merge_is_base(self):
        layer, _ = make_layer()
        assert np.array_equal(merge(layer), layer.base)

    def test_rank_one_outer_product(self):
        layer, _ = make_layer(rank=1, alpha=2.0)
        u = np.arange(8, dtype=np.float32).reshape(8, 1)
        v = np.linspace(-1, 1, 16, dtype=np.float32).reshape(1, 16)
        layer.adapter.b[:] = u
        layer.adapter.a[:] = v
        expected = layer.base + 2.0 * (u @ v)
        assert np.allclose(merge(layer), expected, rtol=1e-6)

    def test_merged_equals_adapted_on_probes(self):
        layer, rng = make_layer(seed=11)
        layer.adapter.b[:] = rng.standard_normal(layer.adapter.b.shape).astype(np.float32) * 0.2
        merged = merge(layer)
        for _ in range(100):
            x = rng.standard_normal(16).astype(np.float32)
            y_ad, _ = adapter_forward(layer, x)
            y_merged = x @ merged.T
            denom = max(np.abs(y_merged).max(), 1e-6)
            assert np.abs(y_ad - y_merged).max() <= 1e-5 * denom


class TestGradients:
    def test_zero_upstream_gives_zero_grads(self):
        layer, rng = make_layer()
        x = rng.standard_normal(16).astype(np.float32)
        da, db = adapter_gradients(layer, x, np.zeros(8, dtype=np.float32))
        assert (da == 0).all() and (db == 0).all()

    def test_finite_differences_on_random_layers(self):
        """Central differences (h = 1e-4) on a float64 closed-form oracle:
        loss(A, B) = up . (W x + (alpha/r) B A x)."""
        h = 1e-4
        for seed in range(100):
            rng = np.random.default_rng(seed)
            layer, _ = make_layer(d_in=16, d_out=8, rank=4, seed=seed)
            layer.adapter.b[:] = rng.standard_normal(layer.adapter.b.shape).astype(np.float32) * 0.1
            x = rng.standard_normal(16).astype(np.float32)
            up = rng.standard_normal(8).astype(np.float32)
            da, db = adapter_gradients(layer, x, up)

            w64 = layer.base.astype(np.float64)
            x64, up64 = x.astype(np.float64), up.astype(np.float64)
            s = layer.adapter.alpha / layer.adapter.rank

            def loss(a_mat, b_mat):
                return up64 @ (w64 @ x64 + s * b_mat @ (a_mat @ x64))

            a64 = layer.adapter.a.astype(np.float64)
            b64 = layer.adapter.b.astype(np.float64)
            for which, grad in [("a", da), ("b", db)]:
                mat = a64 if which == "a" else b64
                num = np.zeros_like(mat)
                it = np.nditer(mat, flags=["multi_index"])
                while not it.finished:
                    idx = it.multi_index
                    bump = np.zeros_like(mat)
                    bump[idx] = h
                    if which == "a":
                        num[idx] = (loss(a64 + bump, b64) - loss(a64 - bump, b64)) / (2 * h)
                    else:
                        num[idx] = (loss(a64, b64 + bump) - loss(a64, b64 - bump)) / (2 * h)
                    it.iternext()
                scale = max(np.abs(num).max(), 1e-8)
                assert np.abs(grad - num).max() <= 1e-4 * scale, f"seed {seed} {which}"

    def test_base_never_touched(self):
        layer, rng = make_layer()
        before = layer.base.copy()
        x = rng.standard_normal((4, 16)).astype(np.float32)
        up = rng.standard_normal((4, 8)).astype(np.float32)
        adapter_gradients(layer, x, up)
        y, cache = adapter_forward(layer, x, training=True,
                                   rng=np.random.default_rng(1))
        adapter_input_gradient(layer, up, cache)
        assert np.array_equal(layer.base, before)

    def test_input_gradient_matches_finite_difference(self):
        layer, rng = make_layer(seed=17)
        layer.adapter.b[:] = rng.standard_normal(layer.adapter.b.shape).astype(np.float32) * 0.1
        x = rng.standard_normal(16).astype(np.float32)
        up = rng.standard_normal(8).astype(np.float32)
        _, cache = adapter_forward(layer, x)
        dx = adapter_input_gradient(layer, up, cache)
        h = 1e-3
        num = np.zeros(16)
        for i in range(16):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            yp, _ = adapter_forward(layer, xp)
            ym, _ = adapter_forward(layer, xm)
            num[i] = np.dot((yp - ym).astype(np.float64), up) / (2 * h)
        assert np.abs(dx - num).max() <= 2e-3 * max(np.abs(num).max(), 1e-8)
