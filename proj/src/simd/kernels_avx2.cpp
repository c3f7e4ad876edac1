// Compiled with -mavx2 -mfma; only reached after a runtime CPU check.

#include "mkoop/simd/kernels.hpp"

#include <immintrin.h>

#include <cmath>

namespace mkoop::simd::detail {
namespace {

// R rows x 8 columns register tile.
template <int R>
inline void tile8(std::size_t k, const double* a, std::size_t lda, const double* b,
                  std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
    __m256d acc0[R];
    __m256d acc1[R];
    for (int r = 0; r < R; ++r) {
        if (accumulate) {
            acc0[r] = _mm256_loadu_pd(c + r * ldc);
            acc1[r] = _mm256_loadu_pd(c + r * ldc + 4);
        } else {
            acc0[r] = _mm256_setzero_pd();
            acc1[r] = _mm256_setzero_pd();
        }
    }
    for (std::size_t p = 0; p < k; ++p) {
        const __m256d b0 = _mm256_loadu_pd(b + p * ldb);
        const __m256d b1 = _mm256_loadu_pd(b + p * ldb + 4);
        for (int r = 0; r < R; ++r) {
            const __m256d av = _mm256_broadcast_sd(a + r * lda + p);
            acc0[r] = _mm256_fmadd_pd(av, b0, acc0[r]);
            acc1[r] = _mm256_fmadd_pd(av, b1, acc1[r]);
        }
    }
    for (int r = 0; r < R; ++r) {
        _mm256_storeu_pd(c + r * ldc, acc0[r]);
        _mm256_storeu_pd(c + r * ldc + 4, acc1[r]);
    }
}

template <int R>
inline void tile4(std::size_t k, const double* a, std::size_t lda, const double* b,
                  std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
    __m256d acc[R];
    for (int r = 0; r < R; ++r) {
        acc[r] = accumulate ? _mm256_loadu_pd(c + r * ldc) : _mm256_setzero_pd();
    }
    for (std::size_t p = 0; p < k; ++p) {
        const __m256d bv = _mm256_loadu_pd(b + p * ldb);
        for (int r = 0; r < R; ++r) {
            acc[r] = _mm256_fmadd_pd(_mm256_broadcast_sd(a + r * lda + p), bv, acc[r]);
        }
    }
    for (int r = 0; r < R; ++r) _mm256_storeu_pd(c + r * ldc, acc[r]);
}

template <int R>
inline void row_block(std::size_t n, std::size_t k, const double* a, std::size_t lda,
                      const double* b, std::size_t ldb, double* c, std::size_t ldc,
                      bool accumulate) {
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) tile8<R>(k, a, lda, b + j, ldb, c + j, ldc, accumulate);
    for (; j + 4 <= n; j += 4) tile4<R>(k, a, lda, b + j, ldb, c + j, ldc, accumulate);
    for (; j < n; ++j) {
        for (int r = 0; r < R; ++r) {
            double s = accumulate ? c[r * ldc + j] : 0.0;
            for (std::size_t p = 0; p < k; ++p) s += a[r * lda + p] * b[p * ldb + j];
            c[r * ldc + j] = s;
        }
    }
}

void gemm_avx2(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
               const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        row_block<4>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc, accumulate);
    }
    for (; i < m; ++i) {
        row_block<1>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc, accumulate);
    }
}

void axpy_avx2(std::size_t n, double alpha, const double* x, double* y) {
    const __m256d av = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    }
    for (; i < n; ++i) y[i] += alpha * x[i];
}

double dot_avx2(std::size_t n, const double* x, const double* y) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), acc1);
    }
    for (; i + 4 <= n; i += 4) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
    }
    alignas(32) double lanes[4];
    _mm256_store_pd(lanes, _mm256_add_pd(acc0, acc1));
    double s = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
}

void tanh_grad_avx2(std::size_t n, const double* y, const double* dy, double* out) {
    const __m256d one = _mm256_set1_pd(1.0);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d yv = _mm256_loadu_pd(y + i);
        const __m256d g = _mm256_fnmadd_pd(yv, yv, one);
        _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(dy + i), g));
    }
    for (; i < n; ++i) out[i] = dy[i] * (1.0 - y[i] * y[i]);
}

void add_bias_avx2(std::size_t rows, std::size_t cols, const double* bias, double* x) {
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = x + r * cols;
        std::size_t j = 0;
        for (; j + 4 <= cols; j += 4) {
            _mm256_storeu_pd(row + j, _mm256_add_pd(_mm256_loadu_pd(row + j), _mm256_loadu_pd(bias + j)));
        }
        for (; j < cols; ++j) row[j] += bias[j];
    }
}

void adam_avx2(std::size_t n, const AdamStep& s, const double* grad, double* m, double* v,
               double* param) {
    const __m256d b1 = _mm256_set1_pd(s.beta1);
    const __m256d b2 = _mm256_set1_pd(s.beta2);
    const __m256d c1 = _mm256_set1_pd(1.0 - s.beta1);
    const __m256d c2 = _mm256_set1_pd(1.0 - s.beta2);
    const __m256d bc1 = _mm256_set1_pd(s.bias_correction1);
    const __m256d bc2 = _mm256_set1_pd(s.bias_correction2);
    const __m256d lr = _mm256_set1_pd(s.lr);
    const __m256d eps = _mm256_set1_pd(s.eps);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d g = _mm256_loadu_pd(grad + i);
        const __m256d mv = _mm256_fmadd_pd(b1, _mm256_loadu_pd(m + i), _mm256_mul_pd(c1, g));
        const __m256d vv = _mm256_fmadd_pd(b2, _mm256_loadu_pd(v + i), _mm256_mul_pd(_mm256_mul_pd(c2, g), g));
        _mm256_storeu_pd(m + i, mv);
        _mm256_storeu_pd(v + i, vv);
        const __m256d mhat = _mm256_div_pd(mv, bc1);
        const __m256d denom = _mm256_add_pd(_mm256_sqrt_pd(_mm256_div_pd(vv, bc2)), eps);
        const __m256d upd = _mm256_div_pd(_mm256_mul_pd(lr, mhat), denom);
        _mm256_storeu_pd(param + i, _mm256_sub_pd(_mm256_loadu_pd(param + i), upd));
    }
    const double k1 = 1.0 - s.beta1;
    const double k2 = 1.0 - s.beta2;
    for (; i < n; ++i) {
        m[i] = s.beta1 * m[i] + k1 * grad[i];
        v[i] = s.beta2 * v[i] + k2 * grad[i] * grad[i];
        param[i] -= s.lr * (m[i] / s.bias_correction1) /
                    (std::sqrt(v[i] / s.bias_correction2) + s.eps);
    }
}

}  // namespace

const KernelTable& avx2_table() {
    static const KernelTable table{Isa::avx2,    gemm_avx2,     axpy_avx2, dot_avx2,
                                   tanh_grad_avx2, add_bias_avx2, adam_avx2};
    return table;
}

}  // namespace mkoop::simd::detail
