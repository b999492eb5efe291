#pragma once

#include "fedsac/common.hpp"

#include <vector>

namespace fedsac {

struct SimplexError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Aggregation weights: each entry in [0,1], summing to 1.
struct SimplexAction {
    std::vector<double> weights;

    std::size_t size() const { return weights.size(); }
    double operator[](std::size_t i) const { return weights[i]; }

    static SimplexAction uniform(std::size_t k);
    /// Throws SimplexError if |sum - 1| > sum_tol or an entry leaves
    /// [-entry_tol, 1 + entry_tol].
    void validate(double sum_tol = 1e-9, double entry_tol = 1e-12) const;
    bool is_valid(double sum_tol = 1e-9, double entry_tol = 1e-12) const;
};

}  // namespace fedsac
