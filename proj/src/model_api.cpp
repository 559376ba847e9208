#include "ctrldiff/model_api.hpp"

#include <cmath>
#include <numeric>

#include "ctrldiff/errors.hpp"

namespace ctrldiff {

BlockLayout BlockLayout::fixed(int total, int block) {
    if (total < 1 || block < 1) {
        throw InvalidInput("layout total and block length must be positive");
    }
    BlockLayout layout;
    for (int done = 0; done < total; done += block) {
        layout.lengths.push_back(std::min(block, total - done));
    }
    return layout;
}

int BlockLayout::total() const { return std::accumulate(lengths.begin(), lengths.end(), 0); }

std::vector<int> BlockLayout::starts() const {
    std::vector<int> s(lengths.size());
    int at = 0;
    for (size_t i = 0; i < lengths.size(); ++i) {
        s[i] = at;
        at += lengths[i];
    }
    return s;
}

void BlockLayout::validate(int target_total) const {
    for (int l : lengths) {
        if (l < 1) {
            throw InvalidInput("block lengths must be at least 1");
        }
    }
    if (total() != target_total) {
        throw InvalidInput("block lengths sum to " + std::to_string(total()) + ", expected " +
                           std::to_string(target_total));
    }
}

Eigen::MatrixXd BlockDenoiser::layout_logits(std::span<const int> x0, std::span<const int> xt,
                                             const BlockLayout& layout) const {
    layout.validate(static_cast<int>(x0.size()));
    if (xt.size() != x0.size()) {
        throw InvalidInput("clean and noised sequences differ in length");
    }
    Eigen::MatrixXd out(static_cast<Eigen::Index>(x0.size()), vocab().token_count());
    const auto starts = layout.starts();
    for (size_t b = 0; b < starts.size(); ++b) {
        const auto s = static_cast<size_t>(starts[b]);
        const auto len = static_cast<size_t>(layout.lengths[b]);
        out.middleRows(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(len)) =
            x0_logits(xt.subspan(s, len), x0.subspan(0, s));
    }
    return out;
}

std::vector<std::vector<double>> SequenceClassifier::class_probs_many(std::span<const TokenSequence> blocks,
                                                                    std::span<const int> prefix) const {
    std::vector<std::vector<double>> out;
    out.reserve(blocks.size());
    for (const auto& b : blocks) {
        out.push_back(class_probs(b, prefix));
    }
    return out;
}

double SequenceClassifier::relaxed_log_prob(const Eigen::MatrixXd&, std::span<const int>, int,
                                            Eigen::MatrixXd*) const {
    throw ConfigurationError("classifier does not provide input gradients");
}

Eigen::MatrixXd log_softmax_rows(const Eigen::MatrixXd& logits) {
    Eigen::MatrixXd out(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double top = logits.row(i).maxCoeff();
        const double lse = top + std::log((logits.row(i).array() - top).exp().sum());
        out.row(i) = logits.row(i).array() - lse;
    }
    return out;
}

std::vector<double> softmax(std::span<const double> logits) {
    double top = -std::numeric_limits<double>::infinity();
    for (double v : logits) {
        top = std::max(top, v);
    }
    std::vector<double> p(logits.size());
    double total = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp(logits[i] - top);
        total += p[i];
    }
    for (double& v : p) {
        v /= total;
    }
    return p;
}

}  // namespace ctrldiff
