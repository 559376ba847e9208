#include "ctrldiff/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "ctrldiff/errors.hpp"
#include "ctrldiff/rng.hpp"

namespace ctrldiff {

namespace {

constexpr double kMassTol = 1e-9;

void require_unit_interval(double v, const char* what) {
    if (!(v >= 0.0 && v <= 1.0)) {
        throw DomainError(std::string(what) + " must lie in [0, 1], got " + std::to_string(v));
    }
}

}  // namespace

Vocab::Vocab(int size_total_, int mask_id_) : size_total(size_total_), mask_id(mask_id_) {
    if (size_total < 2) {
        throw InvalidInput("vocabulary needs at least 2 categories");
    }
    if (mask_id < 0 || mask_id >= size_total) {
        throw InvalidInput("mask id outside vocabulary");
    }
}

CategoricalDist::CategoricalDist(std::vector<double> probs) : probs_(std::move(probs)) {
    if (probs_.empty()) {
        throw InvalidInput("empty categorical distribution");
    }
    double total = 0.0;
    for (double p : probs_) {
        if (!(p >= 0.0) || !std::isfinite(p)) {
            throw InvalidInput("categorical probabilities must be finite and nonnegative");
        }
        total += p;
    }
    if (std::abs(total - 1.0) > kMassTol) {
        throw InvalidInput("categorical probabilities sum to " + std::to_string(total));
    }
}

CategoricalDist CategoricalDist::one_hot(int size, int index) {
    std::vector<double> p(static_cast<size_t>(size), 0.0);
    p.at(static_cast<size_t>(index)) = 1.0;
    return CategoricalDist(std::move(p));
}

CategoricalDist CategoricalDist::uniform(int size) {
    return CategoricalDist(std::vector<double>(static_cast<size_t>(size), 1.0 / size));
}

CategoricalDist CategoricalDist::from_log_weights(std::span<const double> log_weights) {
    double top = -std::numeric_limits<double>::infinity();
    for (double w : log_weights) {
        if (std::isnan(w) || w == std::numeric_limits<double>::infinity()) {
            throw InvalidInput("log weights must be finite or -inf");
        }
        top = std::max(top, w);
    }
    if (!std::isfinite(top)) {
        throw DegenerateInput("all log weights are -inf");
    }
    std::vector<double> p(log_weights.size());
    double total = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp(log_weights[i] - top);
        total += p[i];
    }
    for (double& v : p) {
        v /= total;
    }
    return CategoricalDist(std::move(p));
}

CategoricalDist CategoricalDist::from_weights(std::span<const double> weights) {
    double total = 0.0;
    for (double w : weights) {
        if (!(w >= 0.0) || !std::isfinite(w)) {
            throw InvalidInput("weights must be finite and nonnegative");
        }
        total += w;
    }
    if (!(total > 0.0)) {
        throw DegenerateInput("weights have zero total mass");
    }
    std::vector<double> p(weights.begin(), weights.end());
    // Tiny totals lose relative precision in direct division; go through logs.
    if (total < 1e-300) {
        std::vector<double> logw(p.size());
        for (size_t i = 0; i < p.size(); ++i) {
            logw[i] = p[i] > 0.0 ? std::log(p[i]) : -std::numeric_limits<double>::infinity();
        }
        return from_log_weights(logw);
    }
    for (double& v : p) {
        v /= total;
    }
    return CategoricalDist(std::move(p));
}

double total_variation(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw InvalidInput("total variation between distributions of different sizes");
    }
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        s += std::abs(a[i] - b[i]);
    }
    return 0.5 * s;
}

double total_variation(const CategoricalDist& a, const CategoricalDist& b) {
    return total_variation(std::span<const double>(a.probs()), std::span<const double>(b.probs()));
}

NoiseSchedule NoiseSchedule::log_linear() { return NoiseSchedule(); }

NoiseSchedule NoiseSchedule::from_table(std::vector<std::pair<double, double>> table) {
    if (table.size() < 2) {
        throw InvalidInput("schedule table needs at least two knots");
    }
    for (size_t i = 1; i < table.size(); ++i) {
        if (!(table[i].first > table[i - 1].first)) {
            throw InvalidInput("schedule knots must have strictly increasing t");
        }
    }
    if (std::abs(table.front().first) > 1e-12 || std::abs(table.back().first - 1.0) > 1e-12) {
        throw InvalidInput("schedule table must span t = 0 .. 1");
    }
    if (std::abs(table.front().second - 1.0) > 1e-9 || std::abs(table.back().second) > 1e-9) {
        throw InvalidInput("schedule must satisfy alpha(0) = 1 and alpha(1) = 0");
    }
    NoiseSchedule s;
    s.kind_ = Kind::custom_table;
    s.table_ = std::move(table);
    // Monotonicity checked on a dense grid, as the knots alone would allow it anyway.
    double prev = s.alpha(0.0);
    for (int i = 1; i <= 1000; ++i) {
        const double a = s.alpha(i / 1000.0);
        if (a > prev + 1e-12) {
            throw InvalidInput("schedule alpha must be nonincreasing in t");
        }
        prev = a;
    }
    return s;
}

double NoiseSchedule::alpha(double t) const {
    require_unit_interval(t, "t");
    if (kind_ == Kind::log_linear) {
        return 1.0 - t;
    }
    auto it = std::upper_bound(table_.begin(), table_.end(), t,
                               [](double v, const std::pair<double, double>& knot) { return v < knot.first; });
    if (it == table_.end()) {
        return table_.back().second;
    }
    if (it == table_.begin()) {
        return table_.front().second;
    }
    const auto& hi = *it;
    const auto& lo = *(it - 1);
    const double w = (t - lo.first) / (hi.first - lo.first);
    return lo.second + w * (hi.second - lo.second);
}

double NoiseSchedule::nelbo_weight(double t) const {
    require_unit_interval(t, "t");
    if (kind_ == Kind::log_linear) {
        return 1.0 / t;
    }
    auto it = std::upper_bound(table_.begin(), table_.end(), t,
                               [](double v, const std::pair<double, double>& knot) { return v < knot.first; });
    if (it == table_.end()) {
        --it;
    }
    if (it == table_.begin()) {
        ++it;
    }
    const auto& hi = *it;
    const auto& lo = *(it - 1);
    const double slope = (hi.second - lo.second) / (hi.first - lo.first);
    return -slope / (1.0 - alpha(t));
}

TransitionMatrix TransitionMatrix::absorbing(double alpha_ratio, const Vocab& vocab) {
    require_unit_interval(alpha_ratio, "alpha ratio");
    const int k = vocab.size_total;
    TransitionMatrix q;
    q.entries = Eigen::MatrixXd::Zero(k, k);
    for (int i = 0; i < k; ++i) {
        if (i == vocab.mask_id) {
            q.entries(i, i) = 1.0;
        } else {
            q.entries(i, i) += alpha_ratio;
            q.entries(i, vocab.mask_id) += 1.0 - alpha_ratio;
        }
    }
    return q;
}

TransitionMatrix TransitionMatrix::then(const TransitionMatrix& next) const {
    return TransitionMatrix{entries * next.entries};
}

CategoricalDist TransitionMatrix::row(int from) const {
    std::vector<double> p(static_cast<size_t>(entries.cols()));
    for (Eigen::Index j = 0; j < entries.cols(); ++j) {
        p[static_cast<size_t>(j)] = entries(from, j);
    }
    return CategoricalDist(std::move(p));
}

bool TransitionMatrix::is_row_stochastic(double tol) const {
    for (Eigen::Index i = 0; i < entries.rows(); ++i) {
        if (std::abs(entries.row(i).sum() - 1.0) > tol || entries.row(i).minCoeff() < 0.0) {
            return false;
        }
    }
    return true;
}

void validate_tokens(std::span<const int> ids, const Vocab& vocab) {
    for (int id : ids) {
        if (id < 0 || id >= vocab.size_total) {
            throw InvalidInput("token id " + std::to_string(id) + " outside vocabulary of size " +
                               std::to_string(vocab.size_total));
        }
    }
}

double alpha_at(const NoiseSchedule& schedule, double t) { return schedule.alpha(t); }

CategoricalDist forward_marginal(int x0_id, double alpha_t, const Vocab& vocab) {
    require_unit_interval(alpha_t, "alpha_t");
    if (x0_id < 0 || x0_id >= vocab.size_total) {
        throw InvalidInput("token id outside vocabulary");
    }
    if (vocab.is_mask(x0_id)) {
        throw InvalidInput("clean data cannot contain the mask token");
    }
    std::vector<double> p(static_cast<size_t>(vocab.size_total), 0.0);
    p[static_cast<size_t>(x0_id)] = alpha_t;
    p[static_cast<size_t>(vocab.mask_id)] = 1.0 - alpha_t;
    return CategoricalDist(std::move(p));
}

TokenSequence forward_sample(std::span<const int> x0, double t, const NoiseSchedule& schedule,
                             const Vocab& vocab, uint64_t rng_seed) {
    validate_tokens(x0, vocab);
    const double alpha_t = schedule.alpha(t);
    Rng rng(rng_seed);
    TokenSequence xt(x0.begin(), x0.end());
    for (int& id : xt) {
        if (vocab.is_mask(id)) {
            throw InvalidInput("clean data cannot contain the mask token");
        }
        // uniform() < alpha keeps the token; alpha = 1 keeps all, alpha = 0 masks all.
        if (!(rng.uniform() < alpha_t)) {
            id = vocab.mask_id;
        }
    }
    return xt;
}

double step_weight(double alpha_s, double alpha_t) {
    if (alpha_t > alpha_s) {
        throw OrderingError("alpha_t must not exceed alpha_s (t is later than s)");
    }
    if (alpha_t >= 1.0) {
        throw DegenerateInput("step weight undefined at alpha_t = 1");
    }
    return (alpha_s - alpha_t) / (1.0 - alpha_t);
}

CategoricalDist reverse_posterior(int xt_id, int x0_id, double alpha_s, double alpha_t, const Vocab& vocab) {
    require_unit_interval(alpha_s, "alpha_s");
    require_unit_interval(alpha_t, "alpha_t");
    if (alpha_t > alpha_s) {
        throw OrderingError("alpha_t must not exceed alpha_s (t is later than s)");
    }
    if (vocab.is_mask(x0_id)) {
        throw InvalidInput("clean token cannot be the mask");
    }
    if (xt_id < 0 || xt_id >= vocab.size_total || x0_id < 0 || x0_id >= vocab.size_total) {
        throw InvalidInput("token id outside vocabulary");
    }
    if (!vocab.is_mask(xt_id)) {
        return CategoricalDist::one_hot(vocab.size_total, xt_id);
    }
    if (alpha_t >= 1.0) {
        throw DegenerateInput("a masked token is impossible at alpha_t = 1");
    }
    std::vector<double> p(static_cast<size_t>(vocab.size_total), 0.0);
    p[static_cast<size_t>(x0_id)] = (alpha_s - alpha_t) / (1.0 - alpha_t);
    p[static_cast<size_t>(vocab.mask_id)] = (1.0 - alpha_s) / (1.0 - alpha_t);
    return CategoricalDist(std::move(p));
}

CategoricalDist posterior_marginalized(int xt_id, const CategoricalDist& x0_dist, double alpha_s,
                                       double alpha_t, const Vocab& vocab) {
    require_unit_interval(alpha_s, "alpha_s");
    require_unit_interval(alpha_t, "alpha_t");
    if (x0_dist.size() != vocab.size_total) {
        throw InvalidInput("x0 distribution size does not match vocabulary");
    }
    if (x0_dist[vocab.mask_id] != 0.0) {
        throw InvalidInput("x0 distribution places mass on the mask");
    }
    if (alpha_t > alpha_s) {
        throw OrderingError("alpha_t must not exceed alpha_s (t is later than s)");
    }
    if (xt_id < 0 || xt_id >= vocab.size_total) {
        throw InvalidInput("token id outside vocabulary");
    }
    if (!vocab.is_mask(xt_id)) {
        return CategoricalDist::one_hot(vocab.size_total, xt_id);
    }
    if (alpha_t >= 1.0) {
        throw DegenerateInput("a masked token is impossible at alpha_t = 1");
    }
    const double unmask = (alpha_s - alpha_t) / (1.0 - alpha_t);
    std::vector<double> p(static_cast<size_t>(vocab.size_total));
    for (int v = 0; v < vocab.size_total; ++v) {
        p[static_cast<size_t>(v)] = unmask * x0_dist[v];
    }
    p[static_cast<size_t>(vocab.mask_id)] = (1.0 - alpha_s) / (1.0 - alpha_t);
    return CategoricalDist(std::move(p));
}

double diffusion_loss(std::span<const CategoricalDist> x0_pred, std::span<const int> x0,
                      std::span<const int> xt, double alpha_t, double alpha_s, const Vocab& vocab) {
    if (x0.size() != xt.size() || x0_pred.size() != x0.size()) {
        throw InvalidInput("diffusion_loss inputs have mismatched lengths");
    }
    validate_tokens(x0, vocab);
    validate_tokens(xt, vocab);
    bool any_masked = false;
    for (size_t i = 0; i < x0.size(); ++i) {
        if (vocab.is_mask(x0[i])) {
            throw InvalidInput("clean sequence contains the mask token");
        }
        if (xt[i] != x0[i] && !vocab.is_mask(xt[i])) {
            throw InvalidInput("noised token differs from clean token without being masked");
        }
        any_masked = any_masked || vocab.is_mask(xt[i]);
    }
    if (!any_masked) {
        return 0.0;
    }
    const double w = step_weight(alpha_s, alpha_t);
    double loss = 0.0;
    for (size_t i = 0; i < x0.size(); ++i) {
        if (!vocab.is_mask(xt[i])) {
            continue;
        }
        if (x0_pred[i].size() != vocab.size_total) {
            throw InvalidInput("prediction size does not match vocabulary");
        }
        const double p = x0_pred[i][x0[i]];
        loss += p > 0.0 ? -w * std::log(p) : (w > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
    }
    return loss;
}

CategoricalDist with_mask_slot(std::span<const double> token_probs, const Vocab& vocab) {
    if (static_cast<int>(token_probs.size()) != vocab.token_count()) {
        throw InvalidInput("token distribution must have K-1 entries");
    }
    std::vector<double> p(static_cast<size_t>(vocab.size_total), 0.0);
    for (int i = 0; i < vocab.token_count(); ++i) {
        p[static_cast<size_t>(vocab.from_output_index(i))] = token_probs[static_cast<size_t>(i)];
    }
    return CategoricalDist(std::move(p));
}

}  // namespace ctrldiff
