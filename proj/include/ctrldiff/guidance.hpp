#pragma once

// Classifier guidance for the within-block reverse process:
//   p_gamma(x_s | x_t) ∝ p(x_s | x_t) * p(y | x_s)^gamma
// computed exactly by enumeration, per position under intra-block
// independence, or per position from a first-order expansion of log p(y | .).

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

#include "ctrldiff/blockgen.hpp"
#include "ctrldiff/checkpoint.hpp"
#include "ctrldiff/corpus.hpp"
#include "ctrldiff/diffusion.hpp"
#include "ctrldiff/model_api.hpp"
#include "ctrldiff/nn.hpp"

namespace ctrldiff {

enum class GuidanceApprox { exact_oracle, factorized, taylor };

GuidanceApprox guidance_approx_from_name(const std::string& name);
const char* guidance_approx_name(GuidanceApprox a);

struct GuidanceConfig {
    double gamma = 1.0;
    GuidanceApprox approx = GuidanceApprox::factorized;
    int target_label = 0;

    void validate(int class_count) const;
};

// Largest block-outcome space the exact oracle will enumerate.
constexpr long kMaxEnumeratedOutcomes = 1000000;

// Outcomes are K-way blocks indexed with the first position most significant.
TokenSequence block_outcome(long index, int block_len, int size_total);
// Product law of independent per-position distributions.
std::vector<double> joint_from_marginals(std::span<const CategoricalDist> dists);
std::vector<CategoricalDist> marginals_of_joint(std::span<const double> joint, int block_len, int size_total);

// Exact guided law over all K^block_len outcomes.
std::vector<double> guided_posterior_exact(std::span<const double> joint, const SequenceClassifier& classifier,
                                           double gamma, int label, const Vocab& vocab, int block_len,
                                           std::span<const int> prefix = {});

// Per-position guided distributions. Position l, candidate v is weighted by
// p(v) * p(y | x_t with v at l)^gamma; a mask candidate leaves x_t as is.
// Positions outside `positions` (or unmasked in x_t) are returned unchanged.
std::vector<CategoricalDist> guided_posterior_factorized(std::span<const CategoricalDist> dists,
                                                         const SequenceClassifier& classifier, double gamma, int label,
                                                         std::span<const int> noised_block, std::span<const int> prefix,
                                                         std::span<const int> positions = {});

// As factorized, with log p(y | x_t with v at l) replaced by its first-order
// expansion around the one-hot encoding of x_t.
std::vector<CategoricalDist> guided_posterior_taylor(std::span<const CategoricalDist> dists,
                                                     const SequenceClassifier& classifier, double gamma, int label,
                                                     std::span<const int> noised_block, std::span<const int> prefix,
                                                     std::span<const int> positions = {});

// One-hot rows over K categories.
Eigen::MatrixXd one_hot_rows(std::span<const int> tokens, int size_total);

class ClassifierGuide : public BlockGuide {
public:
    ClassifierGuide(const SequenceClassifier& classifier, GuidanceConfig cfg);
    bool active() const override { return cfg_.gamma > 0.0; }
    // exact_oracle replaces the listed positions by the marginals of the
    // exact guided law over those positions. The classifier sees only the
    // end of the prefix that fits its context.
    void apply(std::vector<CategoricalDist>& dists, std::span<const int> positions, std::span<const int> noised_block,
               std::span<const int> prefix) const override;

private:
    const SequenceClassifier& classifier_;
    GuidanceConfig cfg_;
};

struct ClassifierConfig {
    int layers = 2;
    int heads = 4;
    int hidden_dim = 64;
    int context_length = 256;
    int class_count = 2;
    double learn_rate = 2e-3;
    int warmup_steps = 100;
    int batch_size = 32;
    double weight_decay = 0.01;
    double clip_norm = 1.0;
    int min_crop = 32;  // shortest training crop

    void validate() const;
    nn::TransformerConfig transformer(const Vocab& vocab) const;
    nlohmann::json to_json() const;
    static ClassifierConfig from_json(const nlohmann::json& j);
};

// Transformer encoder over [prefix; block] with full attention, mean pooling
// over positions and a linear class head.
template <class T>
class TransformerClassifier : public SequenceClassifier {
public:
    TransformerClassifier(const ClassifierConfig& cfg, const Vocab& vocab, uint64_t seed);
    TransformerClassifier(const ClassifierConfig& cfg, const Vocab& vocab, nn::Transformer<T> net, long trained_steps);

    template <class U>
    TransformerClassifier<U> cast() const {
        return TransformerClassifier<U>(cfg_, vocab_, net_.template cast<U>(), trained_steps_);
    }

    const ClassifierConfig& config() const { return cfg_; }
    int class_count() const override { return cfg_.class_count; }
    const Vocab& vocab() const override { return vocab_; }
    int context_length() const override { return cfg_.context_length; }
    long trained_steps() const { return trained_steps_; }
    void set_trained_steps(long s) { trained_steps_ = s; }

    std::vector<double> class_probs(std::span<const int> block, std::span<const int> prefix) const override;
    std::vector<std::vector<double>> class_probs_many(std::span<const TokenSequence> blocks,
                                                      std::span<const int> prefix) const override;
    bool differentiable() const override { return true; }
    double relaxed_log_prob(const Eigen::MatrixXd& relaxed_block, std::span<const int> prefix, int label,
                            Eigen::MatrixXd* grad) const override;

    // Mean cross-entropy over labeled sequences; accumulates gradients when
    // grad is non-null.
    double loss(std::span<const TokenSequence> sequences, std::span<const int> labels, nn::Transformer<T>* grad) const;

    nn::Transformer<T>& net() { return net_; }
    const nn::Transformer<T>& net() const { return net_; }

private:
    void check_fits(size_t rows) const;

    ClassifierConfig cfg_;
    Vocab vocab_;
    nn::Transformer<T> net_;
    long trained_steps_ = 0;
};

using NeuralClassifier = TransformerClassifier<float>;

Checkpoint classifier_checkpoint(const NeuralClassifier& c);
NeuralClassifier classifier_from_checkpoint(const Checkpoint& ckpt);
void save_classifier(const std::filesystem::path& dir, const NeuralClassifier& c);
NeuralClassifier load_classifier(const std::filesystem::path& dir);

struct ClassifierTrainResult {
    NeuralClassifier model;
    std::vector<double> loss_trace;
};

// Each training example is a random crop of a document, corrupted by
// forward_sample at t ~ U(0, 1). The learning rate warms up linearly and
// then decays to zero over `steps`. Throws TrainingError on a non-finite loss.
ClassifierTrainResult train_classifier(const ClassifierConfig& cfg, const Tokenizer& tok,
                                       const std::vector<LabeledExample>& corpus, const NoiseSchedule& schedule,
                                       int steps, uint64_t seed,
                                       const std::function<void(int, double)>& on_step = {});

// Accuracy of argmax class_probs on documents corrupted at time t (t = 0 is
// clean text); documents are truncated to the classifier context.
double classifier_accuracy(const SequenceClassifier& c, const Tokenizer& tok, const std::vector<LabeledExample>& docs,
                           const NoiseSchedule& schedule, double t, uint64_t seed);

}  // namespace ctrldiff
