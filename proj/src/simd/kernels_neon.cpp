// aarch64 only; NEON (Advanced SIMD) is part of the base ISA there.

#include "mkoop/simd/kernels.hpp"

#if defined(__aarch64__)

#include <arm_neon.h>

#include <cmath>

namespace mkoop::simd::detail {
namespace {

template <int R>
inline void tile4(std::size_t k, const double* a, std::size_t lda, const double* b,
                  std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
    float64x2_t acc0[R];
    float64x2_t acc1[R];
    for (int r = 0; r < R; ++r) {
        acc0[r] = accumulate ? vld1q_f64(c + r * ldc) : vdupq_n_f64(0.0);
        acc1[r] = accumulate ? vld1q_f64(c + r * ldc + 2) : vdupq_n_f64(0.0);
    }
    for (std::size_t p = 0; p < k; ++p) {
        const float64x2_t b0 = vld1q_f64(b + p * ldb);
        const float64x2_t b1 = vld1q_f64(b + p * ldb + 2);
        for (int r = 0; r < R; ++r) {
            const double av = a[r * lda + p];
            acc0[r] = vfmaq_n_f64(acc0[r], b0, av);
            acc1[r] = vfmaq_n_f64(acc1[r], b1, av);
        }
    }
    for (int r = 0; r < R; ++r) {
        vst1q_f64(c + r * ldc, acc0[r]);
        vst1q_f64(c + r * ldc + 2, acc1[r]);
    }
}

template <int R>
inline void row_block(std::size_t n, std::size_t k, const double* a, std::size_t lda,
                      const double* b, std::size_t ldb, double* c, std::size_t ldc,
                      bool accumulate) {
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) tile4<R>(k, a, lda, b + j, ldb, c + j, ldc, accumulate);
    for (; j < n; ++j) {
        for (int r = 0; r < R; ++r) {
            double s = accumulate ? c[r * ldc + j] : 0.0;
            for (std::size_t p = 0; p < k; ++p) s += a[r * lda + p] * b[p * ldb + j];
            c[r * ldc + j] = s;
        }
    }
}

void gemm_neon(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
               const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        row_block<4>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc, accumulate);
    }
    for (; i < m; ++i) {
        row_block<1>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc, accumulate);
    }
}

void axpy_neon(std::size_t n, double alpha, const double* x, double* y) {
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vfmaq_n_f64(vld1q_f64(y + i), vld1q_f64(x + i), alpha));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

double dot_neon(std::size_t n, const double* x, const double* y) {
    float64x2_t acc = vdupq_n_f64(0.0);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) acc = vfmaq_f64(acc, vld1q_f64(x + i), vld1q_f64(y + i));
    double s = vaddvq_f64(acc);
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
}

void tanh_grad_neon(std::size_t n, const double* y, const double* dy, double* out) {
    const float64x2_t one = vdupq_n_f64(1.0);
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        const float64x2_t yv = vld1q_f64(y + i);
        vst1q_f64(out + i, vmulq_f64(vld1q_f64(dy + i), vfmsq_f64(one, yv, yv)));
    }
    for (; i < n; ++i) out[i] = dy[i] * (1.0 - y[i] * y[i]);
}

void add_bias_neon(std::size_t rows, std::size_t cols, const double* bias, double* x) {
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = x + r * cols;
        std::size_t j = 0;
        for (; j + 2 <= cols; j += 2) vst1q_f64(row + j, vaddq_f64(vld1q_f64(row + j), vld1q_f64(bias + j)));
        for (; j < cols; ++j) row[j] += bias[j];
    }
}

void adam_neon(std::size_t n, const AdamStep& s, const double* grad, double* m, double* v,
               double* param) {
    const double k1 = 1.0 - s.beta1;
    const double k2 = 1.0 - s.beta2;
    std::size_t i = 0;
    for (; i + 2 <= n; i += 2) {
        const float64x2_t g = vld1q_f64(grad + i);
        const float64x2_t mv = vfmaq_n_f64(vmulq_n_f64(g, k1), vld1q_f64(m + i), s.beta1);
        const float64x2_t vv = vfmaq_n_f64(vmulq_n_f64(vmulq_f64(g, g), k2), vld1q_f64(v + i), s.beta2);
        vst1q_f64(m + i, mv);
        vst1q_f64(v + i, vv);
        const float64x2_t mhat = vdivq_f64(mv, vdupq_n_f64(s.bias_correction1));
        const float64x2_t denom =
            vaddq_f64(vsqrtq_f64(vdivq_f64(vv, vdupq_n_f64(s.bias_correction2))), vdupq_n_f64(s.eps));
        vst1q_f64(param + i, vsubq_f64(vld1q_f64(param + i), vdivq_f64(vmulq_n_f64(mhat, s.lr), denom)));
    }
    for (; i < n; ++i) {
        m[i] = s.beta1 * m[i] + k1 * grad[i];
        v[i] = s.beta2 * v[i] + k2 * grad[i] * grad[i];
        param[i] -= s.lr * (m[i] / s.bias_correction1) /
                    (std::sqrt(v[i] / s.bias_correction2) + s.eps);
    }
}

}  // namespace

const KernelTable& neon_table() {
    static const KernelTable table{Isa::neon,    gemm_neon,     axpy_neon, dot_neon,
                                   tanh_grad_neon, add_bias_neon, adam_neon};
    return table;
}

}  // namespace mkoop::simd::detail

#endif
