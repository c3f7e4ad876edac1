#include "mkoop/simd/kernels.hpp"

#include <cmath>

namespace mkoop::simd::detail {
namespace {

void gemm_scalar(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda,
                 const double* b, std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * ldc;
        if (!accumulate) {
            for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
        }
        const double* arow = a + i * lda;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = arow[p];
            const double* brow = b + p * ldb;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
        }
    }
}

void axpy_scalar(std::size_t n, double alpha, const double* x, double* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

double dot_scalar(std::size_t n, const double* x, const double* y) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
    return s;
}

void tanh_grad_scalar(std::size_t n, const double* y, const double* dy, double* out) {
    for (std::size_t i = 0; i < n; ++i) out[i] = dy[i] * (1.0 - y[i] * y[i]);
}

void add_bias_scalar(std::size_t rows, std::size_t cols, const double* bias, double* x) {
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = x + r * cols;
        for (std::size_t j = 0; j < cols; ++j) row[j] += bias[j];
    }
}

void adam_scalar(std::size_t n, const AdamStep& s, const double* grad, double* m, double* v,
                 double* param) {
    const double c1 = 1.0 - s.beta1;
    const double c2 = 1.0 - s.beta2;
    for (std::size_t i = 0; i < n; ++i) {
        m[i] = s.beta1 * m[i] + c1 * grad[i];
        v[i] = s.beta2 * v[i] + c2 * grad[i] * grad[i];
        const double mhat = m[i] / s.bias_correction1;
        const double vhat = v[i] / s.bias_correction2;
        param[i] -= s.lr * mhat / (std::sqrt(vhat) + s.eps);
    }
}

}  // namespace

const KernelTable& scalar_table() {
    static const KernelTable table{Isa::scalar,    gemm_scalar,     axpy_scalar, dot_scalar,
                                   tanh_grad_scalar, add_bias_scalar, adam_scalar};
    return table;
}

}  // namespace mkoop::simd::detail
