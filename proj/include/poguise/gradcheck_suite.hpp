#pragma once

#include <string>
#include <vector>

#include "poguise/gradcheck.hpp"

namespace poguise {

struct GradCheckCase {
    std::string name;
    GradCheckResult result;
    double tol = 1e-5;
    bool pass() const { return result.ok(tol); }
};

// Finite-difference verification of every differentiable op on a small random
// instance, then of the composed model (tokenizer -> two encoder blocks ->
// both heads -> total loss) at reduced width. All checks run in 64-bit.
std::vector<GradCheckCase> run_gradcheck_suite(bool include_model = true);

} // namespace poguise
