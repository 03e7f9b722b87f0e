#pragma once

#include <cstdint>

#include "vitstem/parallel.hpp"

namespace vitstem {

// Dense row-major matrix kernels. All of them *accumulate* into C, which the
// caller zero-initializes; gradient accumulation reuses the same entry
// points. Every output element is produced by a fixed-order scalar recurrence
// owned by a single thread, so results are bit-identical for any thread count.

namespace detail {

constexpr std::int64_t kParallelMacThreshold = 1 << 18;

}  // namespace detail

// C(m,n) += A(m,k) * B(k,n)
template <class T>
void mm_nn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    auto rows = [=](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
            const T* arow = a + i * k;
            T* crow = c + i * n;
            for (std::int64_t l = 0; l < k; ++l) {
                const T av = arow[l];
                const T* brow = b + l * n;
                for (std::int64_t j = 0; j < n; ++j) {
                    crow[j] += av * brow[j];
                }
            }
        }
    };
    if (m * k * n >= detail::kParallelMacThreshold && compute_threads() > 1) {
        parallel_for(m, rows);
    } else {
        rows(0, m);
    }
}

// C(m,n) += A(m,k) * B(n,k)^T
template <class T>
void mm_nt(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    auto rows = [=](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
            const T* arow = a + i * k;
            T* crow = c + i * n;
            for (std::int64_t j = 0; j < n; ++j) {
                const T* brow = b + j * k;
                T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
                std::int64_t l = 0;
                for (; l + 4 <= k; l += 4) {
                    s0 += arow[l] * brow[l];
                    s1 += arow[l + 1] * brow[l + 1];
                    s2 += arow[l + 2] * brow[l + 2];
                    s3 += arow[l + 3] * brow[l + 3];
                }
                T s = (s0 + s1) + (s2 + s3);
                for (; l < k; ++l) {
                    s += arow[l] * brow[l];
                }
                crow[j] += s;
            }
        }
    };
    if (m * k * n >= detail::kParallelMacThreshold && compute_threads() > 1) {
        parallel_for(m, rows);
    } else {
        rows(0, m);
    }
}

// C(k,n) += A(m,k)^T * B(m,n)
template <class T>
void mm_tn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    auto rows = [=](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t l = 0; l < m; ++l) {
            const T* arow = a + l * k;
            const T* brow = b + l * n;
            for (std::int64_t i = lo; i < hi; ++i) {
                const T av = arow[i];
                T* crow = c + i * n;
                for (std::int64_t j = 0; j < n; ++j) {
                    crow[j] += av * brow[j];
                }
            }
        }
    };
    if (m * k * n >= detail::kParallelMacThreshold && compute_threads() > 1) {
        parallel_for(k, rows);
    } else {
        rows(0, k);
    }
}

}  // namespace vitstem
