#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace fedsac {

// Row-major so that one sample is one contiguous row.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Rng = std::mt19937_64;

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct MissingFileError : IoError {
    using IoError::IoError;
};

/// Seed splitting. Mixes a parent seed with a label and up to three indices so
/// that every (module, round, client) triple gets an independent stream.
std::uint64_t derive_seed(std::uint64_t parent, std::string_view label,
                          std::uint64_t a = 0, std::uint64_t b = 0, std::uint64_t c = 0);

inline Rng make_rng(std::uint64_t parent, std::string_view label,
                    std::uint64_t a = 0, std::uint64_t b = 0, std::uint64_t c = 0) {
    return Rng(derive_seed(parent, label, a, b, c));
}

}  // namespace fedsac
