#pragma once

#include <cstddef>

#include <Eigen/Core>

namespace carn::detail {

// C[M,N] (+)= op(A) * op(B), all row-major. op(A) is A[M,K] or A^T with A[K,M];
// op(B) is B[K,N] or B^T with B[N,K].
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b,
          T* c, bool accumulate) {
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using CMap = Eigen::Map<const Mat>;
    const auto M = static_cast<Eigen::Index>(m);
    const auto N = static_cast<Eigen::Index>(n);
    const auto K = static_cast<Eigen::Index>(k);
    Eigen::Map<Mat> C(c, M, N);
    if (!accumulate) C.setZero();
    if (m == 0 || n == 0 || k == 0) return;
    if (!trans_a && !trans_b) {
        C.noalias() += CMap(a, M, K) * CMap(b, K, N);
    } else if (!trans_a && trans_b) {
        C.noalias() += CMap(a, M, K) * CMap(b, N, K).transpose();
    } else if (trans_a && !trans_b) {
        C.noalias() += CMap(a, K, M).transpose() * CMap(b, K, N);
    } else {
        C.noalias() += CMap(a, K, M).transpose() * CMap(b, N, K).transpose();
    }
}

}  // namespace carn::detail
