#pragma once

// Brute-force oracle suites shared by `ctrldiff verify` and the acceptance
// runner. Each check records whether its tolerance held and a short detail.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace ctrldiff::verify {

struct CheckLine {
    std::string name;
    bool pass = false;
    std::string detail;
};

struct Report {
    std::vector<CheckLine> lines;

    void add(std::string name, bool pass, std::string detail);
    bool ok() const;
    void print(std::ostream& out) const;
};

// Chapman-Kolmogorov, Bayes posteriors and posterior marginalization on
// every K <= 5 and alpha pair from a five-point grid, to 1e-12.
Report diffusion_algebra(uint64_t seed);
// Random forward and reverse trajectories: masks never revert forward and
// unmasked tokens never change in reverse.
Report absorbing_invariants(uint64_t seed, int trajectories);
// chi-square goodness of fit of gumbel_argmax against softmax on three logit
// vectors over four categories.
Report gumbel_fit(uint64_t seed, int draws);
// First-hitting and fine-grid ancestral block laws against the enumerated law.
Report sampler_equivalence(uint64_t seed, int samples);
// Exact guided law against hand enumeration, zero-strength reductions,
// single-position equivalence and the exact-vs-factorized TV grid.
Report guidance_oracle(uint64_t seed);
// Classifier input gradients against central differences and Taylor against
// factorized guidance on a smooth classifier.
Report taylor_checks(uint64_t seed);
// Denoiser training-loss parameter gradients against central differences.
Report denoiser_gradients(uint64_t seed);
// PPO objective and advantage identities.
Report ppo_identities(uint64_t seed);
// PPO on a bandit rigged so that length 8 dominates.
Report bandit_convergence(const std::vector<uint64_t>& seeds, int episodes);

// Suites by name for the command line: diffusion, sampler, guidance, ppo,
// denoiser. Throws ConfigurationError on an unknown name.
Report run_suite(const std::string& name, uint64_t seed);

}  // namespace ctrldiff::verify
