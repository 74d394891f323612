/* Hot loops for block-wise NF4 weights: nearest-level quantization, streaming
 * dequantization, and a fused dequantizing mat-vec.  All element-wise float
 * math is single precision so results are bit-identical to the numpy
 * fallback; only dot-product accumulation (tolerance-contracted) differs.
 */
#include "nf4kernels.h"

#include <math.h>

/* Nearest codebook level for z in [-1, 1]: number of midpoints strictly
 * below z.  Ties at a midpoint resolve to the lower index. */
static inline int nearest_code(float z, const float *restrict mids) {
    int lo = 0, hi = 15; /* code in [lo, hi]; mids[k] separates k from k+1 */
    while (lo < hi) {
        int mid = (lo + hi) / 2;
        if (z > mids[mid])
            lo = mid + 1;
        else
            hi = mid;
    }
    return lo;
}

void nf4_quantize_blocks(const float *restrict flat, size_t n_padded, int block,
                         const float *restrict midpoints, int zero_code,
                         uint8_t *restrict packed, float *restrict scales) {
    size_t n_blocks = n_padded / block;
    for (size_t b = 0; b < n_blocks; b++) {
        const float *restrict src = flat + b * block;
        float amax = 0.0f;
        for (int i = 0; i < block; i++) {
            float a = fabsf(src[i]);
            if (a > amax) amax = a;
        }
        scales[b] = amax;
        size_t f = b * block;
        if (amax == 0.0f) {
            for (int i = 0; i < block; i++, f++) {
                uint8_t c = (uint8_t)zero_code;
                if (f & 1)
                    packed[f >> 1] = (uint8_t)((packed[f >> 1] & 0x0F) | (c << 4));
                else
                    packed[f >> 1] = c;
            }
            continue;
        }
        for (int i = 0; i < block; i++, f++) {
            float z = src[i] / amax;
            uint8_t c = (uint8_t)nearest_code(z, midpoints);
            if (f & 1)
                packed[f >> 1] = (uint8_t)((packed[f >> 1] & 0x0F) | (c << 4));
            else
                packed[f >> 1] = c;
        }
    }
}

void nf4_dequantize_flat(const uint8_t *restrict packed, const float *restrict scales,
                         const float *restrict levels, int block, size_t n,
                         float *restrict out) {
    size_t f = 0;
    while (f < n) {
        float sc = scales[f / block];
        size_t end = f + (size_t)(block - (int)(f % block));
        if (end > n) end = n;
        for (; f < end; f++) {
            uint8_t byte = packed[f >> 1];
            int code = (f & 1) ? (byte >> 4) : (byte & 0xF);
            out[f] = sc * levels[code];
        }
    }
}

void nf4_dequant_tile(const uint8_t *restrict packed, const float *restrict scales,
                      const float *restrict levels, int block, int row0, int n_rows,
                      int cols, float *restrict buf) {
    /* buf[r*cols + j] = W[row0 + r, j]; blocks run along the flat row-major
     * stream, so a block boundary may fall inside a row. */
    for (int r = 0; r < n_rows; r++) {
        size_t f = (size_t)(row0 + r) * cols;
        float *restrict row = buf + (size_t)r * cols;
        int j = 0;
        while (j < cols) {
            float sc = scales[f / block];
            int run = block - (int)(f % block);
            if (run > cols - j) run = cols - j;
            for (int k = 0; k < run; k++, j++, f++) {
                uint8_t byte = packed[f >> 1];
                int code = (f & 1) ? (byte >> 4) : (byte & 0xF);
                row[j] = sc * levels[code];
            }
        }
    }
}

void nf4_matvec_rows(const uint8_t *restrict packed, const float *restrict scales,
                     const float *restrict levels, int block, int rows, int cols,
                     const float *restrict x, float *restrict y) {
    /* One quantization block is dequantized at a time; the full-precision
     * matrix is never materialized. */
    float buf[256];
    for (int r = 0; r < rows; r++) {
        size_t f = (size_t)r * cols;
        double acc = 0.0;
        int j = 0;
        while (j < cols) {
            float sc = scales[f / block];
            int run = block - (int)(f % block);
            if (run > cols - j) run = cols - j;
            while (run > 0) {
                int m = run < 256 ? run : 256;
                for (int k = 0; k < m; k++) {
                    uint8_t byte = packed[(f + k) >> 1];
                    int code = ((f + k) & 1) ? (byte >> 4) : (byte & 0xF);
                    buf[k] = sc * levels[code];
                }
                float part = 0.0f;
                #pragma omp simd reduction(+:part)
                for (int k = 0; k < m; k++)
                    part += buf[k] * x[j + k];
                acc += (double)part;
                j += m;
                f += m;
                run -= m;
            }
        }
        y[r] = (float)acc;
    }
}

void layer_norm_rows(const float *restrict x, const float *restrict gamma,
                     const float *restrict beta, int rows, int cols, float eps,
                     float *restrict out) {
    for (int r = 0; r < rows; r++) {
        const float *restrict xr = x + (size_t)r * cols;
        float *restrict yr = out + (size_t)r * cols;
        double s = 0.0, s2 = 0.0;
        for (int j = 0; j < cols; j++) {
            s += xr[j];
            s2 += (double)xr[j] * xr[j];
        }
        float mean = (float)(s / cols);
        float var = (float)(s2 / cols) - mean * mean;
        if (var < 0.0f) var = 0.0f;
        float inv = 1.0f / sqrtf(var + eps);
        #pragma omp simd
        for (int j = 0; j < cols; j++)
            yr[j] = (xr[j] - mean) * inv * gamma[j] + beta[j];
    }
}

void softmax_rows_inplace(float *restrict a, int rows, int cols) {
    for (int r = 0; r < rows; r++) {
        float *restrict ar = a + (size_t)r * cols;
        float m = ar[0];
        for (int j = 1; j < cols; j++)
            if (ar[j] > m) m = ar[j];
        float s = 0.0f;
        for (int j = 0; j < cols; j++) {
            ar[j] = expf(ar[j] - m);
            s += ar[j];
        }
        float inv = 1.0f / s;
        #pragma omp simd
        for (int j = 0; j < cols; j++)
            ar[j] *= inv;
    }
}

void silu_gate_rows(const float *restrict g, const float *restrict u, size_t n,
                    float *restrict out) {
    for (size_t i = 0; i < n; i++)
        out[i] = (g[i] / (1.0f + expf(-g[i]))) * u[i];
}
