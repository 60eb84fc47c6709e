#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

#include "diffmorph/parallel.hpp"

namespace diffmorph::detail {

// C[M,N] (+)= A[M,K] * B[K,N], all row-major and dense.
template <class T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C,
             bool accumulate) {
    constexpr std::size_t kColBlock = 256;
    constexpr std::size_t kDepthBlock = 128;
    const std::size_t work = M * N * K;
    const std::size_t min_rows = work > (1u << 18) ? 1 : M;
    parallel_for(
        M,
        [&](std::size_t r0, std::size_t r1) {
            if (!accumulate) {
                std::fill(C + r0 * N, C + r1 * N, T(0));
            }
            for (std::size_t j0 = 0; j0 < N; j0 += kColBlock) {
                const std::size_t j1 = std::min(N, j0 + kColBlock);
                for (std::size_t k0 = 0; k0 < K; k0 += kDepthBlock) {
                    const std::size_t k1 = std::min(K, k0 + kDepthBlock);
                    for (std::size_t i = r0; i < r1; ++i) {
                        T* __restrict crow = C + i * N;
                        const T* arow = A + i * K;
                        std::size_t k = k0;
                        for (; k + 4 <= k1; k += 4) {
                            const T a0 = arow[k], a1 = arow[k + 1], a2 = arow[k + 2], a3 = arow[k + 3];
                            const T* __restrict b0 = B + k * N;
                            const T* __restrict b1 = b0 + N;
                            const T* __restrict b2 = b1 + N;
                            const T* __restrict b3 = b2 + N;
                            for (std::size_t j = j0; j < j1; ++j) {
                                crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
                            }
                        }
                        for (; k < k1; ++k) {
                            const T a = arow[k];
                            const T* __restrict brow = B + k * N;
                            for (std::size_t j = j0; j < j1; ++j) crow[j] += a * brow[j];
                        }
                    }
                }
            }
        },
        min_rows);
}

template <class T>
std::vector<T> transposed(const T* A, std::size_t rows, std::size_t cols) {
    std::vector<T> out(rows * cols);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = A[i * cols + j];
    }
    return out;
}

// General product with optional transposes. Shapes are those of op(A), op(B).
template <class T>
void gemm(bool trans_a, bool trans_b, std::size_t M, std::size_t N, std::size_t K, const T* A,
          const T* B, T* C, bool accumulate) {
    std::vector<T> at, bt;
    if (trans_a) {
        at = transposed(A, K, M);
        A = at.data();
    }
    if (trans_b) {
        bt = transposed(B, N, K);
        B = bt.data();
    }
    gemm_nn(M, N, K, A, B, C, accumulate);
}

}  // namespace diffmorph::detail
