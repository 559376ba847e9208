#pragma once

// Semi-autoregressive generation: blocks are produced left to right, each by
// a within-block reverse diffusion conditioned on the finished prefix.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "ctrldiff/denoiser.hpp"
#include "ctrldiff/diffusion.hpp"
#include "ctrldiff/model_api.hpp"
#include "ctrldiff/rng.hpp"

namespace ctrldiff {

enum class SamplerMode { ancestral, first_hitting };

struct SamplerConfig {
    SamplerMode mode = SamplerMode::first_hitting;
    int steps_per_block = 16;  // ancestral mode only
    double nucleus_p = 0.9;
    uint64_t rng_seed = 0;

    void validate() const;
};

// argmax_i(logits_i + g_i) with g_i = -log(-log(u_i)), u_i a 53-bit uniform
// in the open interval (0, 1). Entries equal to -inf never win.
int gumbel_argmax(std::span<const double> logits, Rng& rng);

// Unmask-event times t_{n-1} = t_n * u^{1/n}, from n = n_masked down to 1.
std::vector<double> first_hitting_times(double t_start, int n_masked, Rng& rng);
// Same recursion with the uniforms supplied (u_1 is used for n = n_masked).
std::vector<double> first_hitting_times(double t_start, std::span<const double> uniforms);

// Sets logits outside the smallest top-probability set with mass >= p to -inf.
std::vector<double> nucleus_filter(std::span<const double> logits, double p);

// Reweights per-position K-way reverse distributions of a block. Only the
// listed positions are touched.
class BlockGuide {
public:
    virtual ~BlockGuide() = default;
    // An inactive guide is skipped, so the sampler consumes randomness
    // exactly as it does without one.
    virtual bool active() const { return true; }
    virtual void apply(std::vector<CategoricalDist>& dists, std::span<const int> positions,
                       std::span<const int> noised_block, std::span<const int> prefix) const = 0;
};

struct BlockTrace {
    std::vector<double> event_times;  // first-hitting unmask times, or grid times with at least one unmask
    int denoiser_calls = 0;
};

TokenSequence generate_block(const BlockDenoiser& model, std::span<const int> prefix, int block_len,
                             const NoiseSchedule& schedule, const SamplerConfig& cfg, Rng& rng,
                             const BlockGuide* guide = nullptr, BlockTrace* trace = nullptr);

struct GenerationState {
    std::span<const int> tokens;      // prompt plus finished blocks
    int prompt_length = 0;
    std::span<const int> block_starts;  // start offsets of finished blocks within tokens
    int remaining = 0;                  // tokens still to generate
};

// Chooses each block length online (the learned policy implements this).
class BlockLengthChooser {
public:
    virtual ~BlockLengthChooser() = default;
    virtual int next_block_length(const GenerationState& state, Rng& rng) = 0;
};

struct GenerationResult {
    TokenSequence tokens;  // prompt followed by generated text
    BlockLayout layout;    // generated blocks only
    std::vector<BlockTrace> traces;
};

// Each block is conditioned on as much of the preceding text as fits in the
// denoiser context together with the block.

// Generates layout.total() tokens after the prompt with a fixed layout.
GenerationResult generate_sequence(const BlockDenoiser& model, std::span<const int> prompt, const BlockLayout& layout,
                                   const NoiseSchedule& schedule, const SamplerConfig& cfg,
                                   const BlockGuide* guide = nullptr);
// Generates `length` tokens, asking the chooser before every block; a block
// longer than the remaining length is truncated.
GenerationResult generate_sequence(const BlockDenoiser& model, std::span<const int> prompt, int length,
                                   BlockLengthChooser& chooser, const NoiseSchedule& schedule,
                                   const SamplerConfig& cfg, const BlockGuide* guide = nullptr);

struct NllEstimate {
    double mean = 0.0;     // nats per sequence
    double stderr_ = 0.0;  // Monte-Carlo standard error of the mean
    int samples = 0;
};

// Monte-Carlo negative ELBO of x0 summed over the blocks of the layout.
NllEstimate sequence_nll_bound(const BlockDenoiser& model, std::span<const int> x0, const BlockLayout& layout,
                               const NoiseSchedule& schedule, int mc_samples, uint64_t seed,
                               LossEstimator estimator = LossEstimator::masked_count);

// Weighted masked cross-entropy of one noised example under the model, in
// nats per sequence.
double noised_example_loss(const BlockDenoiser& model, const NoisedExample& ex);

}  // namespace ctrldiff
