#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hypersurf {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidHyperparameter : public Error { using Error::Error; };
class InvalidArgument : public Error { using Error::Error; };
class ConnectivityError : public Error { using Error::Error; };
class SingularDesign : public Error { using Error::Error; };
class SupportViolation : public Error { using Error::Error; };
class UnsupportedOperation : public Error { using Error::Error; };
class DataError : public Error { using Error::Error; };
// A named input file does not exist or cannot be opened.
class InputNotFound : public DataError { using DataError::DataError; };

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// A point in hyperparameter space. The dimension is fixed per density family.
struct Hyperparameter {
    std::vector<double> coords;

    Hyperparameter() = default;
    Hyperparameter(std::initializer_list<double> c) : coords(c) {}
    explicit Hyperparameter(std::vector<double> c) : coords(std::move(c)) {}

    std::size_t dim() const noexcept { return coords.size(); }
    double operator[](std::size_t i) const { return coords.at(i); }
    bool operator==(const Hyperparameter&) const = default;
    std::string str() const;
};

struct ChainSpec {
    Hyperparameter h;
    std::size_t length = 0;
    std::size_t burn_in = 0;
    std::uint64_t seed = 0;

    void validate() const;
};

// splitmix64 mixing of a base seed with a stream index; used to give every
// chain of a study its own reproducible seed.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) noexcept;

double log_sum_exp(std::span<const double> x) noexcept;

// Warnings go through a replaceable sink (stderr by default) so tests can
// observe them.
using WarningSink = std::function<void(const std::string&)>;
void set_warning_sink(WarningSink sink);
void warn(const std::string& msg);

}  // namespace hypersurf
