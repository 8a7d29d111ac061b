#pragma once

#include <algorithm>
#include <cstdint>

#include "treenet/parallel.hpp"

// Row-major GEMM kernels. Columns of C are tiled so a tile of B stays in cache
// while every row of A sweeps it; tiles are distributed over workers, which keeps
// each output element owned by a single thread.
namespace treenet::gemm {

inline constexpr std::int64_t kColumnTile = 256;

/// C[M x N] (+)= A[M x K] * B[K x N]
template <class T>
void nn(std::int64_t M, std::int64_t N, std::int64_t K, const T* A, const T* B, T* C, bool accumulate) {
    const std::int64_t tiles = (N + kColumnTile - 1) / kColumnTile;
    parallel_for(tiles, [&](std::int64_t t) {
        const std::int64_t j0 = t * kColumnTile, j1 = std::min(N, j0 + kColumnTile);
        for (std::int64_t i = 0; i < M; ++i) {
            T* c = C + i * N;
            if (!accumulate) std::fill(c + j0, c + j1, T(0));
            const T* a = A + i * K;
            for (std::int64_t k = 0; k < K; ++k) {
                const T av = a[k];
                const T* b = B + k * N;
                for (std::int64_t j = j0; j < j1; ++j) c[j] += av * b[j];
            }
        }
    });
}

/// C[M x N] (+)= A[K x M]^T * B[K x N]
template <class T>
void tn(std::int64_t M, std::int64_t N, std::int64_t K, const T* A, const T* B, T* C, bool accumulate) {
    const std::int64_t tiles = (N + kColumnTile - 1) / kColumnTile;
    parallel_for(tiles, [&](std::int64_t t) {
        const std::int64_t j0 = t * kColumnTile, j1 = std::min(N, j0 + kColumnTile);
        for (std::int64_t i = 0; i < M; ++i) {
            T* c = C + i * N;
            if (!accumulate) std::fill(c + j0, c + j1, T(0));
            for (std::int64_t k = 0; k < K; ++k) {
                const T av = A[k * M + i];
                const T* b = B + k * N;
                for (std::int64_t j = j0; j < j1; ++j) c[j] += av * b[j];
            }
        }
    });
}

/// C[M x N] (+)= A[M x K] * B[N x K]^T
template <class T>
void nt(std::int64_t M, std::int64_t N, std::int64_t K, const T* A, const T* B, T* C, bool accumulate) {
    parallel_for(M, [&](std::int64_t i) {
        const T* a = A + i * K;
        for (std::int64_t j = 0; j < N; ++j) {
            const T* b = B + j * K;
            // Eight fixed partial sums: vectorizable without reassociation flags and
            // independent of the thread count.
            T acc[8] = {};
            std::int64_t k = 0;
            for (; k + 8 <= K; k += 8)
                for (int u = 0; u < 8; ++u) acc[u] += a[k + u] * b[k + u];
            T s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
            for (; k < K; ++k) s += a[k] * b[k];
            T& c = C[i * N + j];
            c = accumulate ? c + s : s;
        }
    });
}

}  // namespace treenet::gemm
