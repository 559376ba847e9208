#pragma once

// Interfaces shared by the neural models and the hand-built oracles used in
// verification: block layouts, block denoisers, token scorers and sequence
// classifiers.

#include <span>
#include <vector>

#include <Eigen/Dense>

#include "ctrldiff/diffusion.hpp"

namespace ctrldiff {

struct BlockLayout {
    std::vector<int> lengths;

    // Blocks of `block` tokens; the last one is truncated when `block` does
    // not divide `total`.
    static BlockLayout fixed(int total, int block);

    int total() const;
    int block_count() const { return static_cast<int>(lengths.size()); }
    std::vector<int> starts() const;
    // Throws unless every length is >= 1 and the lengths sum to target_total.
    void validate(int target_total) const;
};

class BlockDenoiser {
public:
    virtual ~BlockDenoiser() = default;

    virtual const Vocab& vocab() const = 0;
    virtual int context_length() const = 0;

    // Clean-token logits over the K-1 non-mask tokens, one row per block
    // position, for a noised block that follows a clean prefix.
    virtual Eigen::MatrixXd x0_logits(std::span<const int> noised_block, std::span<const int> clean_prefix) const = 0;

    // Logits for every position of xt where block b is conditioned on the
    // clean tokens x0 before it. The default issues one x0_logits call per
    // block; models override it with a single batched pass.
    virtual Eigen::MatrixXd layout_logits(std::span<const int> x0, std::span<const int> xt,
                                          const BlockLayout& layout) const;
};

class TokenScorer {
public:
    virtual ~TokenScorer() = default;

    virtual bool trained() const = 0;
    virtual int context_length() const = 0;
    // log p(x_i | x_<i) for every i; entry 0 is conditioned on nothing.
    virtual std::vector<double> token_log_probs(std::span<const int> tokens) const = 0;
};

class SequenceClassifier {
public:
    virtual ~SequenceClassifier() = default;

    virtual int class_count() const = 0;
    virtual const Vocab& vocab() const = 0;
    // Longest prefix plus block the classifier accepts.
    virtual int context_length() const { return 1 << 30; }
    virtual std::vector<double> class_probs(std::span<const int> block, std::span<const int> prefix) const = 0;
    // class_probs for several blocks sharing one prefix; models may batch.
    virtual std::vector<std::vector<double>> class_probs_many(std::span<const TokenSequence> blocks,
                                                              std::span<const int> prefix) const;

    virtual bool differentiable() const { return false; }
    // log p(label | block, prefix) for a relaxed block (rows are points on
    // the K-simplex) and, when grad is non-null, its gradient with respect to
    // the block rows.
    virtual double relaxed_log_prob(const Eigen::MatrixXd& relaxed_block, std::span<const int> prefix, int label,
                                    Eigen::MatrixXd* grad) const;
};

Eigen::MatrixXd log_softmax_rows(const Eigen::MatrixXd& logits);
std::vector<double> softmax(std::span<const double> logits);

}  // namespace ctrldiff
