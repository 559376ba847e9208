#pragma once

// Hand-built models with enumerable behaviour, shared by the unit tests and
// the acceptance suite.

#include <cmath>
#include <map>
#include <span>
#include <vector>

#include "ctrldiff/blockgen.hpp"
#include "ctrldiff/errors.hpp"
#include "ctrldiff/guidance.hpp"
#include "ctrldiff/model_api.hpp"
#include "ctrldiff/rng.hpp"

namespace oracle {

using ctrldiff::TokenSequence;
using ctrldiff::Vocab;

// Index of a mask-free block over K-1 tokens, first position most significant.
inline int outcome_index(std::span<const int> block, const Vocab& vocab) {
    int idx = 0;
    for (int t : block) {
        idx = idx * vocab.token_count() + vocab.to_output_index(t);
    }
    return idx;
}

inline TokenSequence outcome_tokens(int idx, int len, const Vocab& vocab) {
    TokenSequence out(static_cast<size_t>(len));
    for (int i = len - 1; i >= 0; --i) {
        out[static_cast<size_t>(i)] = vocab.from_output_index(idx % vocab.token_count());
        idx /= vocab.token_count();
    }
    return out;
}

inline int power(int base, int exp) {
    int r = 1;
    for (int i = 0; i < exp; ++i) {
        r *= base;
    }
    return r;
}

// Logits are a fixed pseudo-random function of (prefix, noised block,
// position). The conditionals need not come from any joint law, so the
// sampler's law depends on the unmasking order and is a real test of it.
class HashedDenoiser : public ctrldiff::BlockDenoiser {
public:
    HashedDenoiser(Vocab vocab, uint64_t seed, double scale = 2.0) : vocab_(vocab), seed_(seed), scale_(scale) {}

    const Vocab& vocab() const override { return vocab_; }
    int context_length() const override { return 1 << 20; }

    Eigen::MatrixXd x0_logits(std::span<const int> block, std::span<const int> prefix) const override {
        uint64_t h = seed_;
        for (int t : prefix) {
            h = ctrldiff::mix_seed(h ^ static_cast<uint64_t>(t + 1));
        }
        h = ctrldiff::mix_seed(h ^ 0xb10cULL);
        for (int t : block) {
            h = ctrldiff::mix_seed(h ^ static_cast<uint64_t>(t + 1));
        }
        Eigen::MatrixXd out(static_cast<Eigen::Index>(block.size()), vocab_.token_count());
        for (size_t i = 0; i < block.size(); ++i) {
            if (!vocab_.is_mask(block[i])) {
                out.row(static_cast<Eigen::Index>(i)).setConstant(-1e4);
                out(static_cast<Eigen::Index>(i), vocab_.to_output_index(block[i])) = 0.0;
                continue;
            }
            ctrldiff::Rng rng(ctrldiff::derive_seed(h, i));
            for (int v = 0; v < vocab_.token_count(); ++v) {
                out(static_cast<Eigen::Index>(i), v) = scale_ * (2.0 * rng.uniform() - 1.0);
            }
        }
        return out;
    }

private:
    Vocab vocab_;
    uint64_t seed_;
    double scale_;
};

// Exact conditionals of a known joint law over mask-free blocks (prefix
// ignored): a masked position gets the marginal of the joint restricted to
// the unmasked positions.
class JointDenoiser : public ctrldiff::BlockDenoiser {
public:
    JointDenoiser(Vocab vocab, int len, std::vector<double> joint) : vocab_(vocab), len_(len), joint_(std::move(joint)) {}

    const Vocab& vocab() const override { return vocab_; }
    int context_length() const override { return 1 << 20; }
    const std::vector<double>& joint() const { return joint_; }

    Eigen::MatrixXd x0_logits(std::span<const int> block, std::span<const int>) const override {
        const auto n = static_cast<Eigen::Index>(block.size());
        Eigen::MatrixXd out = Eigen::MatrixXd::Constant(n, vocab_.token_count(), 0.0);
        for (Eigen::Index i = 0; i < n; ++i) {
            if (!vocab_.is_mask(block[static_cast<size_t>(i)])) {
                out.row(i).setConstant(-1e4);
                out(i, vocab_.to_output_index(block[static_cast<size_t>(i)])) = 0.0;
                continue;
            }
            std::vector<double> mass(static_cast<size_t>(vocab_.token_count()), 0.0);
            for (int o = 0; o < static_cast<int>(joint_.size()); ++o) {
                const auto x = outcome_tokens(o, len_, vocab_);
                bool consistent = true;
                for (size_t j = 0; j < block.size(); ++j) {
                    if (!vocab_.is_mask(block[j]) && block[j] != x[j]) {
                        consistent = false;
                    }
                }
                if (consistent) {
                    mass[static_cast<size_t>(vocab_.to_output_index(x[static_cast<size_t>(i)]))] += joint_[static_cast<size_t>(o)];
                }
            }
            for (int v = 0; v < vocab_.token_count(); ++v) {
                out(i, v) = std::log(mass[static_cast<size_t>(v)]);
            }
        }
        return out;
    }

private:
    Vocab vocab_;
    int len_;
    std::vector<double> joint_;
};

// Exact law of the first-hitting sampler (nucleus_p = 1): a uniformly chosen
// masked position is unmasked from the model's conditional, recursively.
inline void first_hitting_law_rec(const ctrldiff::BlockDenoiser& model, TokenSequence& block, double weight,
                                  std::vector<double>& law) {
    const Vocab& vocab = model.vocab();
    std::vector<int> masked;
    for (size_t i = 0; i < block.size(); ++i) {
        if (vocab.is_mask(block[i])) {
            masked.push_back(static_cast<int>(i));
        }
    }
    if (masked.empty()) {
        law[static_cast<size_t>(outcome_index(block, vocab))] += weight;
        return;
    }
    const Eigen::MatrixXd logp = ctrldiff::log_softmax_rows(model.x0_logits(block, {}));
    for (int pos : masked) {
        for (int v = 0; v < vocab.token_count(); ++v) {
            const double p = std::exp(logp(pos, v));
            if (p == 0.0) {
                continue;
            }
            block[static_cast<size_t>(pos)] = vocab.from_output_index(v);
            first_hitting_law_rec(model, block, weight * p / static_cast<double>(masked.size()), law);
            block[static_cast<size_t>(pos)] = vocab.mask_id;
        }
    }
}

inline std::vector<double> first_hitting_law(const ctrldiff::BlockDenoiser& model, int len) {
    std::vector<double> law(static_cast<size_t>(power(model.vocab().token_count(), len)), 0.0);
    TokenSequence block(static_cast<size_t>(len), model.vocab().mask_id);
    first_hitting_law_rec(model, block, 1.0, law);
    return law;
}

// Empirical law of generate_block over n draws.
inline std::vector<double> empirical_block_law(const ctrldiff::BlockDenoiser& model, int len,
                                               const ctrldiff::SamplerConfig& cfg, int n, uint64_t seed,
                                               const ctrldiff::BlockGuide* guide = nullptr) {
    std::vector<double> law(static_cast<size_t>(power(model.vocab().token_count(), len)), 0.0);
    ctrldiff::Rng rng(seed);
    const auto schedule = ctrldiff::NoiseSchedule::log_linear();
    for (int i = 0; i < n; ++i) {
        const auto block = ctrldiff::generate_block(model, {}, len, schedule, cfg, rng, guide);
        law[static_cast<size_t>(outcome_index(block, model.vocab()))] += 1.0 / n;
    }
    return law;
}

// Linear-softmax classifier over block positions:
//   logit_c = bias_c + sum_l W_c[l][x_l] (+ prefix_weight * prefix tokens)
// Its relaxed form replaces the one-hot lookup by a dot product with the
// simplex row, so input gradients are available in closed form.
class LinearClassifier : public ctrldiff::SequenceClassifier {
public:
    LinearClassifier(Vocab vocab, int classes, int len, uint64_t seed, double scale)
        : vocab_(vocab), classes_(classes), len_(len) {
        ctrldiff::Rng rng(seed);
        for (int c = 0; c < classes; ++c) {
            bias_.push_back(scale * (2.0 * rng.uniform() - 1.0));
            weights_.emplace_back(len, vocab.size_total);
            for (int l = 0; l < len; ++l) {
                for (int v = 0; v < vocab.size_total; ++v) {
                    weights_.back()(l, v) = scale * (2.0 * rng.uniform() - 1.0);
                }
            }
        }
    }

    int class_count() const override { return classes_; }
    const Vocab& vocab() const override { return vocab_; }
    bool differentiable() const override { return true; }

    std::vector<double> class_probs(std::span<const int> block, std::span<const int> prefix) const override {
        return ctrldiff::softmax(logits(ctrldiff::one_hot_rows(block, vocab_.size_total), prefix));
    }

    double relaxed_log_prob(const Eigen::MatrixXd& x, std::span<const int> prefix, int label,
                            Eigen::MatrixXd* grad) const override {
        const auto p = ctrldiff::softmax(logits(x, prefix));
        if (grad) {
            *grad = weights_[static_cast<size_t>(label)];
            for (int c = 0; c < classes_; ++c) {
                *grad -= p[static_cast<size_t>(c)] * weights_[static_cast<size_t>(c)];
            }
            grad->conservativeResize(x.rows(), Eigen::NoChange);
        }
        return std::log(p[static_cast<size_t>(label)]);
    }

private:
    std::vector<double> logits(const Eigen::MatrixXd& x, std::span<const int> prefix) const {
        if (x.rows() > len_) {
            throw ctrldiff::CapacityError("block longer than the classifier's table");
        }
        std::vector<double> out(static_cast<size_t>(classes_));
        for (int c = 0; c < classes_; ++c) {
            const auto& w = weights_[static_cast<size_t>(c)];
            out[static_cast<size_t>(c)] = bias_[static_cast<size_t>(c)] + (w.topRows(x.rows()).array() * x.array()).sum();
            for (int t : prefix) {
                out[static_cast<size_t>(c)] += 0.1 * w(0, t);
            }
        }
        return out;
    }

    Vocab vocab_;
    int classes_;
    int len_;
    std::vector<double> bias_;
    std::vector<Eigen::MatrixXd> weights_;
};

// Class probabilities read from a table indexed by the K-way block outcome.
class TableClassifier : public ctrldiff::SequenceClassifier {
public:
    TableClassifier(Vocab vocab, std::vector<std::vector<double>> table) : vocab_(vocab), table_(std::move(table)) {}

    int class_count() const override { return static_cast<int>(table_.front().size()); }
    const Vocab& vocab() const override { return vocab_; }
    std::vector<double> class_probs(std::span<const int> block, std::span<const int>) const override {
        long idx = 0;
        for (int t : block) {
            idx = idx * vocab_.size_total + t;
        }
        return table_.at(static_cast<size_t>(idx));
    }

private:
    Vocab vocab_;
    std::vector<std::vector<double>> table_;
};

// First-order Markov chain over the K-1 non-mask tokens, usable both as a
// left-to-right scorer and as a sampler of its own law.
class MarkovScorer : public ctrldiff::TokenScorer {
public:
    MarkovScorer(Vocab vocab, uint64_t seed, int context = 1 << 20) : vocab_(vocab), context_(context) {
        const int n = vocab.token_count();
        ctrldiff::Rng rng(seed);
        start_.assign(static_cast<size_t>(n), 1.0 / n);
        trans_.assign(static_cast<size_t>(n), std::vector<double>(static_cast<size_t>(n)));
        for (auto& row : trans_) {
            double total = 0.0;
            for (auto& p : row) {
                p = std::exp(2.0 * rng.normal());
                total += p;
            }
            for (auto& p : row) {
                p /= total;
            }
        }
    }

    bool trained() const override { return true; }
    int context_length() const override { return context_; }
    std::vector<double> token_log_probs(std::span<const int> tokens) const override {
        std::vector<double> out(tokens.size());
        for (size_t i = 0; i < tokens.size(); ++i) {
            const auto v = static_cast<size_t>(vocab_.to_output_index(tokens[i]));
            out[i] = std::log(i == 0 ? start_[v] : trans_[static_cast<size_t>(vocab_.to_output_index(tokens[i - 1]))][v]);
        }
        return out;
    }

    TokenSequence sample(int len, ctrldiff::Rng& rng) const {
        TokenSequence out;
        for (int i = 0; i < len; ++i) {
            const auto& row = i == 0 ? start_ : trans_[static_cast<size_t>(vocab_.to_output_index(out.back()))];
            double u = rng.uniform();
            size_t v = 0;
            while (v + 1 < row.size() && u >= row[v]) {
                u -= row[v];
                ++v;
            }
            out.push_back(vocab_.from_output_index(static_cast<int>(v)));
        }
        return out;
    }

private:
    Vocab vocab_;
    int context_;
    std::vector<double> start_;
    std::vector<std::vector<double>> trans_;
};

// Survival function of the chi-square distribution with 3 degrees of freedom.
inline double chi_square3_sf(double x) {
    return std::erfc(std::sqrt(x / 2.0)) + std::sqrt(2.0 * x / M_PI) * std::exp(-x / 2.0);
}

}  // namespace oracle
