#pragma once

// The trainable block denoiser p(x^b | x_t^b, x^{<b}) and its training loop.
//
// A training example packs two streams of length L into one attention
// segment: the noised sequence x_t followed by the clean sequence x_0, both
// with positions 0..L-1. Clean rows attend causally to clean rows. A noised
// row in block b attends to its own block and to clean rows before the start
// of block b, so every block is denoised given its clean prefix in a single
// pass.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include <json.hpp>

#include "ctrldiff/checkpoint.hpp"
#include "ctrldiff/corpus.hpp"
#include "ctrldiff/diffusion.hpp"
#include "ctrldiff/model_api.hpp"
#include "ctrldiff/nn.hpp"

namespace ctrldiff {

enum class LossEstimator {
    // t ~ U(0,1) per block, mask with probability 1 - alpha(t), weight each
    // masked cross-entropy by -alpha'(t) / (1 - alpha(t)).
    time_sampled,
    // k ~ U{1..L_b} per block, mask a uniform k-subset, weight L_b / k. The
    // same objective with the time integral taken analytically.
    masked_count,
};

struct DenoiserConfig {
    int layers = 4;
    int hidden_dim = 128;
    int heads = 4;
    int context_length = 256;
    double learn_rate = 3e-4;
    int warmup_steps = 2500;
    int batch_size = 8;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
    std::vector<int> train_block_sizes = {1, 4, 8, 16};
    LossEstimator estimator = LossEstimator::masked_count;

    void validate() const;
    nn::TransformerConfig transformer(const Vocab& vocab) const;
    nlohmann::json to_json() const;
    static DenoiserConfig from_json(const nlohmann::json& j);
};

struct DenoiserOutput {
    Eigen::MatrixXd logits;  // block_len x (K-1)
    Eigen::MatrixXd hidden;  // block_len x hidden_dim
};

class Denoiser : public BlockDenoiser, public TokenScorer {
public:
    Denoiser(const DenoiserConfig& cfg, const Vocab& vocab, uint64_t seed);
    Denoiser(const DenoiserConfig& cfg, const Vocab& vocab, nn::Transformer<float> net, long trained_steps);

    const DenoiserConfig& config() const { return cfg_; }
    const Vocab& vocab() const override { return vocab_; }
    int context_length() const override { return cfg_.context_length; }
    bool trained() const override { return trained_steps_ > 0; }
    long trained_steps() const { return trained_steps_; }
    void set_trained_steps(long steps) { trained_steps_ = steps; }

    // Unmasked block positions get a point mass at their observed token.
    DenoiserOutput denoise(std::span<const int> noised_block, std::span<const int> clean_prefix) const;
    Eigen::MatrixXd x0_logits(std::span<const int> noised_block, std::span<const int> clean_prefix) const override;
    Eigen::MatrixXd layout_logits(std::span<const int> x0, std::span<const int> xt,
                                  const BlockLayout& layout) const override;

    // Final-layer representations of the causal clean stream.
    Eigen::MatrixXd hidden_states(std::span<const int> tokens) const;
    // Left-to-right scoring through single-token blocks.
    std::vector<double> token_log_probs(std::span<const int> tokens) const override;

    nn::Transformer<float>& net() { return net_; }
    const nn::Transformer<float>& net() const { return net_; }

    Checkpoint to_checkpoint() const;
    static Denoiser from_checkpoint(const Checkpoint& ckpt);
    void save(const std::filesystem::path& dir) const;
    static Denoiser load(const std::filesystem::path& dir);

private:
    void check_tokens(std::span<const int> tokens, bool allow_mask) const;

    DenoiserConfig cfg_;
    Vocab vocab_;
    nn::Transformer<float> net_;
    long trained_steps_ = 0;
};

// Attention mask over the packed [x_t; x_0] rows for one layout.
nn::AttentionMask block_diffusion_mask(const BlockLayout& layout);

// Each block length drawn uniformly from sizes; the last block is truncated.
BlockLayout sample_layout(int total, std::span<const int> sizes, Rng& rng);

struct NoisedExample {
    TokenSequence x0;
    TokenSequence xt;
    BlockLayout layout;
    std::vector<double> weight;  // loss weight per position, 0 where unmasked
};

NoisedExample make_noised_example(std::span<const int> x0, const BlockLayout& layout, LossEstimator estimator,
                                  const NoiseSchedule& schedule, const Vocab& vocab, Rng& rng);

// Weighted masked cross-entropy per token, averaged over all positions of the
// examples; accumulates parameter gradients when grad is non-null.
template <class T>
double denoiser_loss(const nn::Transformer<T>& net, const Vocab& vocab, std::span<const NoisedExample> examples,
                     nn::Transformer<T>* grad);

class DenoiserTrainer {
public:
    DenoiserTrainer(Denoiser& model, const NoiseSchedule& schedule, uint64_t seed);

    // One optimizer step on a batch of clean sequences; returns the loss.
    double step(const TokenBatch& batch);
    long steps_taken() const { return optimizer_.steps_taken(); }

private:
    Denoiser& model_;
    NoiseSchedule schedule_;
    Rng rng_;
    nn::AdamW<float> optimizer_;
};

struct DenoiserTrainResult {
    Denoiser model;
    std::vector<double> loss_trace;
};

using StepCallback = std::function<void(int step, double loss)>;

// Throws TrainingError on a non-finite loss.
DenoiserTrainResult train_denoiser(const DenoiserConfig& cfg, const Vocab& vocab, BatchStream& stream,
                                   const NoiseSchedule& schedule, int steps, uint64_t seed,
                                   const StepCallback& on_step = {});

}  // namespace ctrldiff
