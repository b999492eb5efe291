#pragma once

#include "fedsac/common.hpp"
#include "fedsac/nncore.hpp"

#include <cmath>
#include <random>

namespace testutil {

using namespace fedsac;

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
    return m;
}

inline Vector random_vector(Eigen::Index n, Rng& rng, double sigma = 1.0) {
    std::normal_distribution<double> g(0.0, sigma);
    Vector v(n);
    for (auto& x : v) x = g(rng);
    return v;
}

inline FlatParams random_params(const Manifest& m, Rng& rng, double sigma = 1.0) {
    FlatParams p(m);
    p.values = random_vector(static_cast<Eigen::Index>(param_count(m)), rng, sigma);
    return p;
}

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

}  // namespace testutil
