#pragma once

// Dense arithmetic kernels used on the training hot path.
//
// Every kernel has a scalar reference implementation. Vector variants
// (AVX2+FMA on x86-64, NEON on aarch64) are compiled alongside and the best
// one supported by the running CPU is selected on first use. Setting the
// environment variable MKOOP_ISA=scalar forces the reference path.

#include <cstddef>
#include <span>
#include <string_view>

namespace mkoop::simd {

enum class Isa { scalar, avx2, neon };

std::string_view isa_name(Isa isa);

/// Row-major C(m x n) = A(m x k) * B(k x n) (+ C when accumulate).
using GemmFn = void (*)(std::size_t m, std::size_t n, std::size_t k,
                        const double* a, std::size_t lda,
                        const double* b, std::size_t ldb,
                        double* c, std::size_t ldc, bool accumulate);
/// y += alpha * x
using AxpyFn = void (*)(std::size_t n, double alpha, const double* x, double* y);
using DotFn = double (*)(std::size_t n, const double* x, const double* y);
/// out = dy * (1 - y^2); derivative of tanh expressed through its output.
using TanhGradFn = void (*)(std::size_t n, const double* y, const double* dy, double* out);
/// Broadcast-add a bias row to every row of a row-major (rows x cols) block.
using AddBiasFn = void (*)(std::size_t rows, std::size_t cols, const double* bias, double* x);

struct AdamStep {
    double lr;
    double beta1;
    double beta2;
    double eps;
    double bias_correction1;  // 1 - beta1^t
    double bias_correction2;  // 1 - beta2^t
};
using AdamFn = void (*)(std::size_t n, const AdamStep& step, const double* grad,
                        double* m, double* v, double* param);

struct KernelTable {
    Isa isa;
    GemmFn gemm;
    AxpyFn axpy;
    DotFn dot;
    TanhGradFn tanh_grad;
    AddBiasFn add_bias;
    AdamFn adam;
};

/// True when the variant was compiled in and the CPU supports it.
bool isa_available(Isa isa);

/// Best available table (honours MKOOP_ISA).
const KernelTable& kernels();

/// Specific variant; throws std::invalid_argument when unavailable.
const KernelTable& kernels_for(Isa isa);

// Span-based conveniences over the active table.

inline double dot(std::span<const double> x, std::span<const double> y) {
    return kernels().dot(x.size(), x.data(), y.data());
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    kernels().axpy(x.size(), alpha, x.data(), y.data());
}

namespace detail {
// Per-ISA tables, defined in the corresponding translation units.
const KernelTable& scalar_table();
#if defined(__x86_64__) || defined(_M_X64)
const KernelTable& avx2_table();
#endif
#if defined(__aarch64__)
const KernelTable& neon_table();
#endif
}  // namespace detail

}  // namespace mkoop::simd
