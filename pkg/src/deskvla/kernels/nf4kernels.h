#ifndef DESKVLA_NF4KERNELS_H
#define DESKVLA_NF4KERNELS_H

#include <stdint.h>
#include <stddef.h>

void nf4_quantize_blocks(const float *flat, size_t n_padded, int block,
                         const float *midpoints, int zero_code,
                         uint8_t *packed, float *scales);

void nf4_dequantize_flat(const uint8_t *packed, const float *scales,
                         const float *levels, int block, size_t n, float *out);

void nf4_dequant_tile(const uint8_t *packed, const float *scales,
                      const float *levels, int block, int row0, int n_rows,
                      int cols, float *buf);

void nf4_matvec_rows(const uint8_t *packed, const float *scales,
                     const float *levels, int block, int rows, int cols,
                     const float *x, float *y);

void layer_norm_rows(const float *x, const float *gamma, const float *beta,
                     int rows, int cols, float eps, float *out);

void softmax_rows_inplace(float *a, int rows, int cols);

void silu_gate_rows(const float *g, const float *u, size_t n, float *out);

#endif
