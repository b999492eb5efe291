#include "fedsac/simplex.hpp"

#include <cmath>
#include <numeric>

namespace fedsac {

SimplexAction SimplexAction::uniform(std::size_t k) {
    if (k == 0) throw SimplexError("simplex of dimension 0");
    return {std::vector<double>(k, 1.0 / static_cast<double>(k))};
}

void SimplexAction::validate(double sum_tol, double entry_tol) const {
    if (weights.empty()) throw SimplexError("empty weight vector");
    double sum = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double w = weights[i];
        if (!std::isfinite(w) || w < -entry_tol || w > 1.0 + entry_tol)
            throw SimplexError("weight " + std::to_string(i) + " = " + std::to_string(w) + " outside [0,1]");
        sum += w;
    }
    if (std::abs(sum - 1.0) > sum_tol) throw SimplexError("weights sum to " + std::to_string(sum) + ", not 1");
}

bool SimplexAction::is_valid(double sum_tol, double entry_tol) const {
    try {
        validate(sum_tol, entry_tol);
        return true;
    } catch (const SimplexError&) {
        return false;
    }
}

}  // namespace fedsac
