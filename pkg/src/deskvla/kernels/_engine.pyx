# cython: language_level=3
"""Compiled kernel backend.

Thin wrappers over the C hot loops in nf4kernels.c plus BLAS calls routed
through scipy's exported sgemm.  Signatures mirror kernels._fallback exactly;
quantize/dequantize are bit-identical between the two backends.
"""
import numpy as np
from scipy.linalg.cython_blas cimport sgemm

cdef extern from "nf4kernels.h":
    void nf4_quantize_blocks(const float *flat, size_t n_padded, int block,
                             const float *midpoints, int zero_code,
                             unsigned char *packed, float *scales) nogil
    void nf4_dequantize_flat(const unsigned char *packed, const float *scales,
                             const float *levels, int block, size_t n, float *out) nogil
    void nf4_dequant_tile(const unsigned char *packed, const float *scales,
                          const float *levels, int block, int row0, int n_rows,
                          int cols, float *buf) nogil
    void nf4_matvec_rows(const unsigned char *packed, const float *scales,
                         const float *levels, int block, int rows, int cols,
                         const float *x, float *y) nogil
    void layer_norm_rows(const float *x, const float *gamma, const float *beta,
                         int rows, int cols, float eps, float *out) nogil
    void softmax_rows_inplace(float *a, int rows, int cols) nogil
    void silu_gate_rows(const float *g, const float *u, size_t n, float *out) nogil


cdef void _sgemm_nt(const float[:, ::1] x, const float[:, ::1] w, float[:, ::1] out) nogil:
    # out(S x R) = x(S x C) @ w(R x C)^T, all row-major.
    # In column-major terms: out^T(R x S) = w^T'(R x C) ... expressed as
    # sgemm('T', 'N', m=R, n=S, k=C, A=w (k x m cm), B=x (k x n cm), C=out (m x n cm)).
    cdef int S = x.shape[0], C = x.shape[1], R = w.shape[0]
    cdef float one = 1.0, zero = 0.0
    if S == 0 or R == 0:
        return
    sgemm("T", "N", &R, &S, &C, &one, &w[0, 0], &C, &x[0, 0], &C, &zero, &out[0, 0], &R)


def quantize_blocks(const float[::1] flat_padded, int block,
                    const float[::1] midpoints, int zero_code):
    """Blockwise absmax NF4 quantization of a zero-padded flat stream."""
    cdef size_t n = flat_padded.shape[0]
    cdef size_t nb = n // block
    packed = np.zeros((n + 1) // 2, dtype=np.uint8)
    scales = np.empty(nb, dtype=np.float32)
    cdef unsigned char[::1] pk = packed
    cdef float[::1] sc = scales
    with nogil:
        nf4_quantize_blocks(&flat_padded[0], n, block, &midpoints[0], zero_code,
                            &pk[0], &sc[0])
    return packed, scales


def dequantize_flat(const unsigned char[::1] packed, const float[::1] scales,
                    const float[::1] levels, int block, size_t n):
    out = np.empty(n, dtype=np.float32)
    cdef float[::1] o = out
    if n > 0:
        with nogil:
            nf4_dequantize_flat(&packed[0], &scales[0], &levels[0], block, n, &o[0])
    return out

def matvec(const unsigned char[::1] packed, const float[::1] scales,
           const float[::1] levels, int block, int rows, int cols,
           const float[::1] x):
    out = np.empty(rows, dtype=np.float32)
    cdef float[::1] o = out
    with nogil:
        nf4_matvec_rows(&packed[0], &scales[0], &levels[0], block, rows, cols,
                        &x[0], &o[0])
    return out


def matmat(const unsigned char[::1] packed, const float[::1] scales,
           const float[::1] levels, int block, int rows, int cols,
           const float[:, ::1] x, float[:, ::1] scratch, out=None):
    """out[s, r] = sum_j W[r, j] * x[s, j], dequantizing <=tile rows at a time.

    scratch is a (tile, cols) float32 buffer owned by the caller so repeated
    calls allocate nothing.
    """
    cdef int S = x.shape[0]
    cdef int tile = scratch.shape[0]
    if out is None:
        out = np.empty((S, rows), dtype=np.float32)
    cdef float[:, ::1] y = out
    cdef float[:, ::1] wb = scratch
    cdef int r0, tr
    cdef float one = 1.0, zero = 0.0
    with nogil:
        r0 = 0
        while r0 < rows:
            tr = rows - r0 if rows - r0 < tile else tile
            nf4_dequant_tile(&packed[0], &scales[0], &levels[0], block, r0, tr,
                             cols, &wb[0, 0])
            sgemm("T", "N", &tr, &S, &cols, &one, &wb[0, 0], &cols, &x[0, 0], &cols,
                  &zero, &y[0, r0], &rows)
            r0 += tile
    return out


def linear_f32(const float[:, ::1] x, const float[:, ::1] w, out=None):
    """out(S x R) = x(S x C) @ w(R x C)^T via BLAS."""
    if out is None:
        out = np.empty((x.shape[0], w.shape[0]), dtype=np.float32)
    cdef float[:, ::1] y = out
    with nogil:
        _sgemm_nt(x, w, y)
    return out


def layer_norm(const float[:, ::1] x, const float[::1] gamma, const float[::1] beta,
               float eps, out=None):
    if out is None:
        out = np.empty((x.shape[0], x.shape[1]), dtype=np.float32)
    cdef float[:, ::1] y = out
    with nogil:
        layer_norm_rows(&x[0, 0], &gamma[0], &beta[0], x.shape[0], x.shape[1], eps,
                        &y[0, 0])
    return out


def attention(const float[:, ::1] q, const float[:, ::1] k, const float[:, ::1] v,
              int n_heads, float[:, ::1] scores_scratch, out=None):
    """Bidirectional multi-head attention over one token sequence.

    q, k, v: (T, d_model) row-major; scores_scratch: (T, T) float32.
    """
    cdef int T = q.shape[0], d = q.shape[1]
    cdef int hd = d // n_heads
    if out is None:
        out = np.empty((T, d), dtype=np.float32)
    cdef float[:, ::1] y = out
    cdef float[:, ::1] s = scores_scratch
    cdef float inv_sqrt = <float>(1.0 / np.sqrt(hd))
    cdef float one = 1.0, zero = 0.0
    cdef int h, off
    with nogil:
        for h in range(n_heads):
            off = h * hd
            # s(T x T) = q_h(T x hd) @ k_h(T x hd)^T, strided head slices:
            # column-major: sgemm('T','N', m=T, n=T, k=hd, A=k_h lda=d, B=q_h ldb=d)
            sgemm("T", "N", &T, &T, &hd, &inv_sqrt, &k[0, off], &d, &q[0, off], &d,
                  &zero, &s[0, 0], &T)
            softmax_rows_inplace(&s[0, 0], T, T)
            # y_h(T x hd) = s(T x T) @ v_h(T x hd):
            # column-major: sgemm('N','N', m=hd, n=T, k=T, A=v_h lda=d, B=s ldb=T, C=y_h ldc=d)
            sgemm("N", "N", &hd, &T, &T, &one, &v[0, off], &d, &s[0, 0], &T,
                  &zero, &y[0, off], &d)
    return out


def silu_gate(const float[:, ::1] g, const float[:, ::1] u, out=None):
    if out is None:
        out = np.empty((g.shape[0], g.shape[1]), dtype=np.float32)
    cdef float[:, ::1] y = out
    cdef size_t n = g.shape[0] * g.shape[1]
    with nogil:
        silu_gate_rows(&g[0, 0], &u[0, 0], n, &y[0, 0])
    return out
