// Copyright (c) 2026 two contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Dense>

namespace two::rng {

// std::*_distribution output is implementation-defined, so all randomness
// below is built directly on the mt19937_64 bit stream to keep runs
// reproducible across standard libraries.

inline double uniform01(std::mt19937_64& gen) {
    return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

inline double uniform(std::mt19937_64& gen, double lo, double hi) {
    return lo + (hi - lo) * uniform01(gen);
}

// Unbiased integer in [0, n).
inline uint64_t below(std::mt19937_64& gen, uint64_t n) {
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
        x = gen();
    } while (x >= limit);
    return x % n;
}

inline Eigen::MatrixXd uniform_matrix(std::mt19937_64& gen, Eigen::Index rows, Eigen::Index cols,
                                      double lo, double hi) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = uniform(gen, lo, hi);
    return m;
}

// Glorot-style uniform init for a rows x cols parameter.
inline Eigen::MatrixXd glorot_matrix(std::mt19937_64& gen, Eigen::Index rows, Eigen::Index cols) {
    double scale = std::sqrt(6.0 / static_cast<double>(rows + cols));
    return uniform_matrix(gen, rows, cols, -scale, scale);
}

template <typename T>
void shuffle(std::mt19937_64& gen, std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(gen, i)]);
}

}  // namespace two::rng
