#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace radapter {

struct GradCheckEntry {
    std::string component;
    double rel_error = 0.0;
    double threshold = 0.0;

    bool ok() const { return rel_error <= threshold; }
};

// Runs every finite-difference oracle against the analytic gradients: local
// primitives (softmax, layer norm, GELU), both contrastive losses with
// respect to their embedding inputs and the temperature, and the full
// encoder path from the loss down to every backbone tensor and both adapter
// parametrizations. All probes use centered differences at h = 1e-6 and are
// deterministic in the seed.
std::vector<GradCheckEntry> run_gradient_suite(std::uint64_t seed);

}  // namespace radapter
