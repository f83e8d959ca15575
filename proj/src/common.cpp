#include "hypersurf/common.hpp"

#include <algorithm>
#include <iostream>
#include <mutex>
#include <sstream>

namespace hypersurf {

std::string Hyperparameter::str() const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < coords.size(); ++i) {
        if (i) os << ", ";
        os << coords[i];
    }
    os << ')';
    return os.str();
}

void ChainSpec::validate() const {
    if (length == 0) throw InvalidArgument("chain length must be positive");
    for (double c : h.coords)
        if (!std::isfinite(c)) throw InvalidHyperparameter("non-finite hyperparameter " + h.str());
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) noexcept {
    std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

double log_sum_exp(std::span<const double> x) noexcept {
    double mx = kNegInf;
    for (double v : x) mx = std::max(mx, v);
    if (mx == kNegInf) return kNegInf;
    double s = 0.0;
    for (double v : x) s += std::exp(v - mx);
    return mx + std::log(s);
}

namespace {
std::mutex g_warn_mutex;
WarningSink& sink() {
    static WarningSink s = [](const std::string& m) { std::cerr << "warning: " << m << '\n'; };
    return s;
}
}  // namespace

void set_warning_sink(WarningSink s) {
    std::lock_guard lock(g_warn_mutex);
    sink() = s ? std::move(s) : [](const std::string& m) { std::cerr << "warning: " << m << '\n'; };
}

void warn(const std::string& msg) {
    std::lock_guard lock(g_warn_mutex);
    sink()(msg);
}

}  // namespace hypersurf
