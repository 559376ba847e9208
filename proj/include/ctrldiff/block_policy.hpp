#pragma once

// Learned block-length selection. Before each block a policy reads a summary
// of the last few blocks (their mean hidden states under the denoiser and the
// entropy of their tokens) and picks a length from a small action set. It is
// trained with PPO on a reward that trades block length against block
// perplexity.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "ctrldiff/blockgen.hpp"
#include "ctrldiff/checkpoint.hpp"
#include "ctrldiff/denoiser.hpp"
#include "ctrldiff/eval_metrics.hpp"
#include "ctrldiff/rng.hpp"

namespace ctrldiff {

struct ActionSpace {
    std::vector<int> lengths = {4, 8, 16};

    int size() const { return static_cast<int>(lengths.size()); }
    int max_length() const { return lengths.back(); }
    int index_of(int length) const;
    // Throws unless every entry is >= 1 and the list is strictly increasing.
    void validate() const;
};

struct PolicyState {
    Eigen::MatrixXd window;  // M x D per-block mean hidden vectors, oldest first
    int blocks = 0;          // real blocks, stored in the last `blocks` rows
    Eigen::VectorXd pooled;  // weighted pool of the real blocks
    double entropy = 0.0;    // nats, of the token frequencies over the window
};

// block_means holds one row per block, oldest first; the last `window` are
// used. weights (one per used block, summing to 1) default to uniform.
PolicyState extract_state(const Eigen::MatrixXd& block_means, std::span<const int> window_tokens, int window,
                          std::span<const double> weights = {});

// State before the next block of `tokens`, whose blocks start at
// block_starts. Hidden states come from the denoiser's causal clean stream
// over the last context_length tokens.
PolicyState sequence_state(const Denoiser& model, std::span<const int> tokens, std::span<const int> block_starts,
                           int window);

struct PolicyConfig {
    ActionSpace actions;
    int window = 4;  // M, blocks summarized in the state
    int conv_channels = 16;
    int conv_kernel = 2;
    int mlp_hidden = 32;

    void validate() const;
    nlohmann::json to_json() const;
    static PolicyConfig from_json(const nlohmann::json& j);
};

struct PolicyParams {
    Eigen::MatrixXd conv_w, conv_b;    // temporal convolution over the window
    Eigen::MatrixXd w1, b1;            // feature MLP
    Eigen::MatrixXd w_pi, b_pi;        // action head
    Eigen::MatrixXd w_v, b_v;          // value head
    Eigen::MatrixXd init;              // stands in for blocks before the start

    PolicyParams zeros_like() const;
    void visit(const std::function<void(const std::string&, Eigen::MatrixXd&)>& fn);
    void visit(const std::function<void(const std::string&, const Eigen::MatrixXd&)>& fn) const;
    double squared_norm() const;
};

struct PolicyOutput {
    std::vector<double> logits;
    std::vector<double> probs;
    double value = 0.0;
};

// MaxPool(Conv1D(window)) and the pooled vector and entropy feed a tanh MLP
// with a softmax action head and a scalar value head.
class PolicyModel {
public:
    PolicyModel(const PolicyConfig& cfg, int state_dim, uint64_t seed);
    PolicyModel(const PolicyConfig& cfg, PolicyParams params);

    const PolicyConfig& config() const { return cfg_; }
    int state_dim() const { return static_cast<int>(params_.init.rows()); }
    PolicyParams& params() { return params_; }
    const PolicyParams& params() const { return params_; }

    PolicyOutput forward(const PolicyState& s) const;
    // Accumulates into grad the gradient of d_logits . logits + d_value * value.
    void backward(const PolicyState& s, std::span<const double> d_logits, double d_value, PolicyParams& grad) const;
    // Zeroes the action head so the policy starts uniform.
    void zero_action_head();

    int sample_action(const PolicyState& s, Rng& rng, double* log_prob = nullptr) const;
    int greedy_action(const PolicyState& s) const;

private:
    void check_state(const PolicyState& s) const;

    PolicyConfig cfg_;
    PolicyParams params_;
};

Checkpoint policy_checkpoint(const PolicyModel& p);
PolicyModel policy_from_checkpoint(const Checkpoint& ckpt);
void save_policy(const std::filesystem::path& dir, const PolicyModel& p);
PolicyModel load_policy(const std::filesystem::path& dir);

// lambda1 * L_b / L_max - exp(-mean log p): block efficiency minus block
// perplexity under the scorer.
double compute_reward(std::span<const double> block_log_probs, int max_length, double lambda1);

struct PPOConfig {
    double clip = 0.2;
    double discount = 0.99;
    double gae_lambda = 0.95;
    int epochs = 4;
    int minibatch = 64;
    double lambda1 = 0.5;
    double learn_rate = 3e-3;
    double value_coef = 0.5;
    double max_grad_norm = 0.5;
    int episodes_per_update = 16;

    void validate() const;
    nlohmann::json to_json() const;
};

struct Transition {
    PolicyState state;
    int action = 0;
    double reward = 0.0;
    double log_prob = 0.0;  // under the behaviour policy
    double value = 0.0;     // behaviour value estimate
    double advantage = 0.0;
    double ret = 0.0;       // value target
};

// Generalized advantage estimates for one episode that ends after the last
// reward (no bootstrap), before any normalization.
std::vector<double> gae_advantages(std::span<const double> rewards, std::span<const double> values, double discount,
                                   double gae_lambda);
// In place: zero mean, unit variance.
void normalize_advantages(std::span<double> advantages);
// Fills advantage and ret for a finished episode (ret = advantage + value).
void assign_advantages(std::span<Transition> episode, double discount, double gae_lambda);

// Mean of min(r A, clip(r, 1 - eps, 1 + eps) A) with r = exp(new - old).
// d_new_log_probs, when given, receives the derivative with respect to each
// new log-probability.
double clipped_objective(std::span<const double> new_log_probs, std::span<const double> old_log_probs,
                         std::span<const double> advantages, double clip, std::vector<double>* d_new_log_probs = nullptr);

struct PPODiagnostics {
    double objective = 0.0;
    double value_loss = 0.0;
    double mean_ratio = 0.0;
    double clip_fraction = 0.0;
};

// Gradient of value_coef * value_loss - objective over a batch whose
// advantages are already set, accumulated into grad.
PPODiagnostics ppo_gradient(const PolicyModel& policy, std::span<const Transition> batch, const PPOConfig& cfg,
                            PolicyParams& grad);

class PolicyOptimizer {
public:
    PolicyOptimizer(const PolicyModel& policy, double learn_rate, double max_grad_norm);
    void step(PolicyModel& policy, PolicyParams grad);

private:
    double learn_rate_;
    double max_grad_norm_;
    long step_ = 0;
    PolicyParams m_, v_;
};

// Epochs of shuffled minibatch steps on the clipped objective. Advantages are
// normalized over the batch first. Diagnostics are those of the first pass.
PPODiagnostics ppo_update(PolicyModel& policy, std::vector<Transition> batch, const PPOConfig& cfg,
                          PolicyOptimizer& opt, Rng& rng);

struct EnvStep {
    double reward = 0.0;
    bool done = false;
    int length = 0;  // block length actually used
};

class PolicyEnvironment {
public:
    virtual ~PolicyEnvironment() = default;
    virtual void reset(Rng& rng) = 0;
    virtual PolicyState state() const = 0;
    virtual EnvStep step(int block_length, Rng& rng) = 0;
};

// Single-step episodes with a fixed empty-window state; the reward is 1 for
// the rigged length and 0 otherwise.
class RiggedBandit : public PolicyEnvironment {
public:
    RiggedBandit(int state_dim, int window, int best_length);
    void reset(Rng&) override {}
    PolicyState state() const override;
    EnvStep step(int block_length, Rng& rng) override;

private:
    int state_dim_;
    int window_;
    int best_;
};

// Generates `length` tokens after a random prompt; each block is scored by
// the denoiser's own left-to-right log-probabilities.
class GenerationEnvironment : public PolicyEnvironment {
public:
    GenerationEnvironment(const Denoiser& model, std::vector<TokenSequence> prompts, int length, SamplerConfig sampler,
                          NoiseSchedule schedule, int window, int max_length, double lambda1);
    void reset(Rng& rng) override;
    PolicyState state() const override;
    EnvStep step(int block_length, Rng& rng) override;

private:
    const Denoiser& model_;
    std::vector<TokenSequence> prompts_;
    int length_;
    SamplerConfig sampler_;
    NoiseSchedule schedule_;
    int window_;
    int max_length_;
    double lambda1_;
    TokenSequence tokens_;
    std::vector<int> starts_;
    int remaining_ = 0;
};

struct EpisodeRecord {
    int episode = 0;
    double mean_reward = 0.0;
    std::map<int, int> length_histogram;
};

nlohmann::json episode_record_json(const EpisodeRecord& r);

struct PolicyTrainResult {
    PolicyModel policy;
    std::vector<EpisodeRecord> trace;
    std::vector<PPODiagnostics> updates;
};

// Rolls out episodes, updating with PPO every cfg.episodes_per_update
// episodes (and once more for a trailing partial batch).
PolicyTrainResult train_policy(PolicyModel policy, PolicyEnvironment& env, int episodes, const PPOConfig& cfg,
                               uint64_t seed, const std::function<void(const EpisodeRecord&)>& on_episode = {});

// Block-length chooser backed by a policy and the denoiser's hidden states.
// The prompt, when present, counts as the first block of the window.
class PolicyChooser : public BlockLengthChooser {
public:
    PolicyChooser(const PolicyModel& policy, const Denoiser& model, bool greedy = false);
    int next_block_length(const GenerationState& state, Rng& rng) override;

private:
    const PolicyModel& policy_;
    const Denoiser& model_;
    bool greedy_;
};

// Layout the policy picks for known text: blocks are chosen in order with the
// state read from the true preceding tokens, greedily, or sampled when rng is
// given. The first `prompt` tokens form a leading block that is not chosen by
// the policy.
BlockLayout policy_layout(const PolicyModel& policy, const Denoiser& model, std::span<const int> tokens,
                          int prompt = 0, Rng* rng = nullptr);

}  // namespace ctrldiff
