#pragma once

// Evaluation metrics: bits per character and perplexity from a total NLL,
// generative perplexity under an internal left-to-right scorer, Dist-n
// diversity, token entropy and classifier-measured control accuracy.

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctrldiff/blockgen.hpp"
#include "ctrldiff/diffusion.hpp"
#include "ctrldiff/model_api.hpp"

namespace ctrldiff {

double bpc(double nll_nats_total, long char_count);
double perplexity(double nll_nats_total, long token_count);

// Shannon entropy (nats) of the empirical token distribution; 0 when empty.
double token_entropy(std::span<const int> tokens);

// exp of the mean per-token NLL of the samples under the scorer. Samples
// longer than `window` tokens (default: the scorer's context) are covered by
// windows advanced by `stride` (default: half the window); each token is
// scored once, with as much left context as its window gives it.
double generative_perplexity(std::span<const TokenSequence> samples, const TokenScorer& scorer, const Vocab& vocab,
                             int window = 0, int stride = 0);

// Distinct n-grams over total n-grams, pooled over samples. Samples shorter
// than n are skipped and reported in `warnings` when given.
double dist_n(std::span<const TokenSequence> samples, int n, std::vector<std::string>* warnings = nullptr);

// Mean over samples of each sample's token entropy.
double mean_token_entropy(std::span<const TokenSequence> samples);

// Fraction of samples whose most probable class is `target`.
double control_accuracy(std::span<const TokenSequence> samples, const SequenceClassifier& classifier, int target);

using LayoutFn = std::function<BlockLayout(std::span<const int> chunk)>;

struct BoundEstimate {
    double nats = 0.0;     // summed over all evaluated tokens
    double stderr_ = 0.0;  // Monte-Carlo standard error of the sum
    long tokens = 0;

    double bpc() const { return ctrldiff::bpc(nats, tokens); }
    double ppl() const { return perplexity(nats, tokens); }
};

// NLL bound of a token stream cut into consecutive chunks of chunk_len tokens
// (at most max_chunks; 0 means all), each scored under the layout returned
// for it. Chunk i uses Monte-Carlo seed derive_seed(seed, i).
BoundEstimate chunked_nll_bound(const BlockDenoiser& model, std::span<const int> tokens, int chunk_len, int max_chunks,
                                const LayoutFn& layout, const NoiseSchedule& schedule, int mc_samples, uint64_t seed);

struct MetricReport {
    std::optional<double> bpc;
    std::optional<double> ppl;
    std::optional<double> gen_ppl;
    std::optional<double> dist1, dist2, dist3;
    std::optional<double> entropy;
    std::optional<double> control_accuracy;
    std::optional<double> tokens_per_second;

    nlohmann::json to_json() const;
};

}  // namespace ctrldiff
