"""NF4 quantization: codebook generation, nearest-level choice, error bounds,
double quantization, fused matvec, and memory accounting."""
import numpy as np
import pytest
from scipy.stats import norm

from deskvla import quant
from deskvla.kernels import get_backend
from deskvla.quant import (
    MemoryReport,
    NF4Tensor,
    QuantizationError,
    dequantize_nf4,
    double_quantize_scales,
    matvec_nf4,
    memory_footprint,
    nf4_codebook,
    quantize_nf4,
    quantized_payload_bytes,
)


def generate_codebook_oracle():
    """Independent inverse-normal-CDF construction of the 16 NF4 levels.

    Evenly spaced quantile probabilities over the symmetric range
    [1 - d, d] with d = 1 - (1/32 + 1/30)/2: eight positive levels, seven
    negative levels, an exact zero, renormalized so the extremes are +/-1.
    """
    d = 1.0 - 0.5 * (1 / 32 + 1 / 30)
    pos = norm.ppf(np.linspace(d, 0.5, 9))[:-1]
    neg = -norm.ppf(np.linspace(d, 0.5, 8))[:-1]
    levels = np.sort(np.concatenate([neg, [0.0], pos]))
    return levels / np.abs(levels).max()


def nearest_code_oracle(z):
    """Brute-force nearest level over all 16 codes, ties to the lower index."""
    lv = nf4_codebook()
    dist = np.abs(np.float32(z)[:, None] - lv[None, :])
    return dist.argmin(axis=1).astype(np.uint8)  # argmin takes first minimum


class TestCodebook:
    def test_frozen_table_matches_generator(self):
        oracle = generate_codebook_oracle()
        assert np.array_equal(np.array(quant.NF4_LEVELS_F64), oracle)

    def test_extremes_are_exact(self):
        lv = nf4_codebook()
        assert lv[0] == -1.0
        assert lv[15] == 1.0

    def test_exactly_one_zero(self):
        lv = nf4_codebook()
        assert np.count_nonzero(lv == 0.0) == 1
        assert lv[quant.NF4_ZERO_CODE] == 0.0

    def test_strictly_increasing(self):
        lv = nf4_codebook()
        assert (np.diff(lv) > 0).all()

    def test_max_gap_constant(self):
        assert quant.MAX_LEVEL_GAP == pytest.approx(float(np.diff(nf4_codebook()).max()))


class TestQuantize:
    def test_all_zero_block(self):
        q = quantize_nf4(np.zeros(64, dtype=np.float32))
        assert q.block_scales()[0] == 0.0
        assert (q.codes() == quant.NF4_ZERO_CODE).all()

    def test_extremes_and_zero_are_exact(self):
        x = np.zeros(64, dtype=np.float32)
        x[0], x[1], x[2] = 2.0, -2.0, 0.0
        q = quantize_nf4(x)
        assert q.block_scales()[0] == 2.0
        codes = q.codes()
        assert codes[0] == 15  # +1.0
        assert codes[1] == 0   # -1.0
        assert codes[2] == quant.NF4_ZERO_CODE
        dq = dequantize_nf4(q)
        assert dq[0] == 2.0 and dq[1] == -2.0 and dq[2] == 0.0

    def test_nearest_level_matches_bruteforce(self):
        rng = np.random.default_rng(42)
        x = rng.standard_normal(4096).astype(np.float32)
        q = quantize_nf4(x)
        scales = np.repeat(q.block_scales(), 64)
        z = (x / scales).astype(np.float32)
        assert np.array_equal(q.codes(), nearest_code_oracle(z))

    def test_bounded_error(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal(4096).astype(np.float32)
        q = quantize_nf4(x)
        dq = dequantize_nf4(q)
        bound = np.repeat(q.block_scales(), 64) * (quant.MAX_LEVEL_GAP / 2)
        assert (np.abs(x.astype(np.float64) - dq) <= bound + 1e-12).all()

    def test_rejects_non_finite_with_index(self):
        x = np.ones(64, dtype=np.float32)
        x[17] = np.nan
        with pytest.raises(QuantizationError, match="index 17"):
            quantize_nf4(x)

    def test_rejects_empty_and_bad_block(self):
        with pytest.raises(QuantizationError):
            quantize_nf4(np.zeros((0,), dtype=np.float32))
        with pytest.raises(QuantizationError):
            quantize_nf4(np.ones(8, dtype=np.float32), block_size=1)

    def test_partial_tail_block_padding(self):
        x = np.full(70, 3.0, dtype=np.float32)
        q = quantize_nf4(x, block_size=64)
        assert q.n_blocks == 2 and q.n_padded == 128
        assert np.allclose(dequantize_nf4(q), x)
        # padded elements quantize as zeros against the tail block scale
        tail_codes = np.empty(q.packed.shape[0] * 2, dtype=np.uint8)
        tail_codes[0::2] = q.packed & 0x0F
        tail_codes[1::2] = q.packed >> 4
        assert (tail_codes[70:] == quant.NF4_ZERO_CODE).all()


class TestDequantize:
    def test_zeros_roundtrip(self):
        q = quantize_nf4(np.zeros((4, 32), dtype=np.float32))
        assert (dequantize_nf4(q) == 0.0).all()

    def test_requantization_is_fixed_point(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((16, 64)).astype(np.float32)
        q1 = quantize_nf4(x)
        q2 = quantize_nf4(dequantize_nf4(q1))
        assert np.array_equal(q1.packed, q2.packed)
        assert np.array_equal(q1.scales, q2.scales)

    def test_matches_scalar_reference_loop(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal(130).astype(np.float32)
        q = quantize_nf4(x, block_size=32)
        lv = nf4_codebook()
        scales = q.block_scales()
        codes = q.codes()
        expected = np.array(
            [np.float32(scales[i // 32]) * lv[codes[i]] for i in range(130)],
            dtype=np.float32)
        assert np.array_equal(dequantize_nf4(q), expected)

    def test_corrupt_packing_rejected(self):
        q = quantize_nf4(np.ones(64, dtype=np.float32))
        with pytest.raises(QuantizationError, match="corrupt"):
            NF4Tensor(shape=(64,), block_size=64, packed=q.packed[:-1], scales=q.scales)


class TestBackendParity:
    def test_quantize_bitwise_identical(self):
        ext = get_backend("ext")
        py = get_backend("python")
        rng = np.random.default_rng(5)
        mids = quant.nf4_midpoints()
        for n, block in [(256, 64), (96, 32), (640, 128)]:
            flat = rng.standard_normal(n).astype(np.float32)
            p1, s1 = ext.quantize_blocks(flat, block, mids, quant.NF4_ZERO_CODE)
            p2, s2 = py.quantize_blocks(flat, block, mids, quant.NF4_ZERO_CODE)
            assert np.array_equal(p1, p2)
            assert np.array_equal(s1, s2)
            lv = nf4_codebook()
            d1 = ext.dequantize_flat(p1, s1, lv, block, n)
            d2 = py.dequantize_flat(p2, s2, lv, block, n)
            assert np.array_equal(d1, d2)


class TestDoubleQuant:
    def affine_oracle(self, scales):
        """Brute-force per-group affine quantizer with a shared global offset."""
        offset = scales.min()
        out = np.empty_like(scales)
        ng = -(-len(scales) // 256)
        for g in range(ng):
            grp = scales[g * 256:(g + 1) * 256]
            step = (grp.max() - offset) / np.float32(255.0)
            if step == 0:
                out[g * 256:(g + 1) * 256] = offset
                continue
            codes = np.rint((grp - offset) / step)
            out[g * 256:(g + 1) * 256] = offset + codes * step
        return out

    def test_uniform_scales_exact(self):
        x = np.tile(np.linspace(-1, 1, 64, dtype=np.float32), 8)
        q = quantize_nf4(x)
        assert np.allclose(q.scales, q.scales[0])
        q2, changed = double_quantize_scales(q)
        assert changed
        assert np.array_equal(q2.block_scales(), q.scales)

    def test_reconstruction_error_within_half_step(self):
        rng = np.random.default_rng(9)
        scales = (rng.random(512) * 3 + 0.1).astype(np.float32)
        q = NF4Tensor(shape=(512 * 64,), block_size=64,
                      packed=np.zeros(512 * 32, dtype=np.uint8), scales=scales)
        q2, _ = double_quantize_scales(q)
        recon = q2.block_scales()
        oracle = self.affine_oracle(scales)
        assert np.allclose(recon, oracle, rtol=0, atol=1e-6)
        steps = np.repeat(q2.scales.group_steps, 256)
        assert (np.abs(recon.astype(np.float64) - scales) <= steps / 2 + 1e-7).all()

    def test_already_quantized_is_noop(self):
        q = quantize_nf4(np.ones(512, dtype=np.float32))
        q2, changed = double_quantize_scales(q)
        assert changed
        q3, changed2 = double_quantize_scales(q2)
        assert not changed2
        assert q3 is q2

    def test_bits_per_parameter_arithmetic(self):
        n = 64 * 256 * 4  # whole groups
        plain = quantized_payload_bytes(n, 64, False) * 8 / n
        dq = quantized_payload_bytes(n, 64, True) * 8 / n
        assert plain == 4 + 32 / 64
        assert dq == 4 + 8 / 64 + 32 / (64 * 256)


class TestMatvec:
    def test_identity_pattern(self):
        w = np.eye(64, dtype=np.float32)
        q = quantize_nf4(w)
        x = np.arange(64, dtype=np.float32)
        y = matvec_nf4(q, x)
        # each row's sole nonzero is the block absmax, reproduced exactly
        assert np.array_equal(y, x)

    def test_zero_matrix(self):
        q = quantize_nf4(np.zeros((16, 32), dtype=np.float32))
        y = matvec_nf4(q, np.ones(32, dtype=np.float32))
        assert (y == 0.0).all()

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(21)
        w = rng.standard_normal((128, 128)).astype(np.float32)
        x = rng.standard_normal(128).astype(np.float32)
        q = quantize_nf4(w)
        y = matvec_nf4(q, x)
        ref = dequantize_nf4(q).astype(np.float64) @ x.astype(np.float64)
        assert np.abs(y - ref).max() <= 1e-5 * np.abs(ref).max()

    def test_unaligned_row_length(self):
        rng = np.random.default_rng(22)
        w = rng.standard_normal((8, 48)).astype(np.float32)  # blocks cross rows
        x = rng.standard_normal(48).astype(np.float32)
        q = quantize_nf4(w)
        ref = dequantize_nf4(q).astype(np.float64) @ x.astype(np.float64)
        assert np.abs(matvec_nf4(q, x) - ref).max() <= 1e-5 * max(np.abs(ref).max(), 1e-9)

    def test_shape_mismatch(self):
        q = quantize_nf4(np.ones((4, 8), dtype=np.float32))
        with pytest.raises(QuantizationError, match="mismatch"):
            matvec_nf4(q, np.ones(9, dtype=np.float32))
        q1 = quantize_nf4(np.ones(8, dtype=np.float32))
        with pytest.raises(QuantizationError, match="2-D"):
            matvec_nf4(q1, np.ones(8, dtype=np.float32))


class TestMemory:
    def test_reference_config_plain(self):
        q = quantize_nf4(np.ones(1 << 20, dtype=np.float32))
        rep = memory_footprint(q)
        assert rep.bits_per_parameter == 4.5
        assert rep.reduction_fraction == pytest.approx(1 - 4.5 / 32)

    def test_reference_config_double_quant(self):
        q, _ = double_quantize_scales(quantize_nf4(np.ones(1 << 20, dtype=np.float32)))
        rep = memory_footprint(q)
        assert rep.bits_per_parameter == pytest.approx(4 + 8 / 64 + 32 / (64 * 256))
        assert rep.bits_per_parameter == pytest.approx(4.127, abs=5e-4)

    def test_formula_on_random_shapes(self):
        rng = np.random.default_rng(31)
        for _ in range(50):
            shape = tuple(int(rng.integers(1, 40)) for _ in range(int(rng.integers(1, 3))))
            block = int(rng.choice([2, 16, 32, 64, 128]))
            dq = bool(rng.integers(0, 2))
            q = quantize_nf4(rng.standard_normal(shape).astype(np.float32), block_size=block)
            if dq:
                q, _ = double_quantize_scales(q)
            n = q.size
            nb = -(-n // block)
            if dq:
                expect = (n + 1) // 2 + nb + 4 * (-(-nb // 256))
            else:
                expect = (n + 1) // 2 + 4 * nb
            assert memory_footprint(q).quantized_bytes == expect

    def test_fp32_tensor_report(self):
        rep = memory_footprint(np.ones((10, 10), dtype=np.float32))
        assert rep.fp32_bytes == rep.quantized_bytes == 400
        assert rep.bits_per_parameter == 32.0
        assert rep.reduction_fraction == 0.0

    def test_combine(self):
        a = memory_footprint(quantize_nf4(np.ones(4096, dtype=np.float32)))
        b = memory_footprint(np.ones(4096, dtype=np.float32))
        c = MemoryReport.combine([a, b])
        assert c.fp32_bytes == a.fp32_bytes + b.fp32_bytes
        assert c.quantized_bytes == a.quantized_bytes + b.quantized_bytes
