#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace hypersurf {

// Built-in replication studies on the conjugate toy model.
struct ValidationOptions {
    // 0 keeps each suite's default count; smaller counts widen tolerances by
    // sqrt(default / replications).
    std::size_t replications = 0;
    std::uint64_t seed = 20110601;
    // Negative control: stage-2 runs use d_hat scaled by this factor
    // (entries 2..k), which should break coverage.
    double corrupt_d = 1.0;
    bool verbose = false;
};

struct CheckResult {
    std::string id;
    std::string name;
    bool pass = false;
    std::string detail;
};

CheckResult validate_ratio_coverage(const ValidationOptions& opt);    // V1
CheckResult validate_variance_formulas(const ValidationOptions& opt);  // V2
CheckResult validate_exact_identities(const ValidationOptions& opt);   // V3
CheckResult validate_cv_reduction(const ValidationOptions& opt);       // V4

std::vector<CheckResult> run_validation(const ValidationOptions& opt);

}  // namespace hypersurf
