#pragma once

// Absorbing-state (masked) categorical diffusion: forward marginals, reverse
// posteriors, transition matrices and the weighted masked cross-entropy.
//
// Time runs over [0, 1]. alpha(t) is the survival probability of a clean
// token: alpha(0) = 1 (clean data), alpha(1) = 0 (everything masked).

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace ctrldiff {

using TokenSequence = std::vector<int>;

struct Vocab {
    int size_total = 2;  // K, including the mask category
    int mask_id = 1;

    Vocab() = default;
    Vocab(int size_total, int mask_id);

    // K categories with the mask as the last one.
    static Vocab mask_last(int size_total) { return Vocab(size_total, size_total - 1); }

    int token_count() const { return size_total - 1; }
    bool is_mask(int id) const { return id == mask_id; }

    // Maps a non-mask token id to its index in the (K-1)-way output space
    // of a denoiser, and back.
    int to_output_index(int id) const { return id < mask_id ? id : id - 1; }
    int from_output_index(int idx) const { return idx < mask_id ? idx : idx + 1; }

    bool operator==(const Vocab&) const = default;
};

class CategoricalDist {
public:
    CategoricalDist() = default;
    // Validates nonnegativity and unit mass (tolerance 1e-9).
    explicit CategoricalDist(std::vector<double> probs);

    static CategoricalDist one_hot(int size, int index);
    static CategoricalDist uniform(int size);
    // Normalizes exp(log_weights) with a log-sum-exp shift; entries equal to
    // -inf get exactly zero mass.
    static CategoricalDist from_log_weights(std::span<const double> log_weights);
    static CategoricalDist from_weights(std::span<const double> weights);

    int size() const { return static_cast<int>(probs_.size()); }
    double operator[](int i) const { return probs_[static_cast<size_t>(i)]; }
    const std::vector<double>& probs() const { return probs_; }

private:
    std::vector<double> probs_;
};

double total_variation(const CategoricalDist& a, const CategoricalDist& b);
double total_variation(std::span<const double> a, std::span<const double> b);

class NoiseSchedule {
public:
    enum class Kind { log_linear, custom_table };

    static NoiseSchedule log_linear();
    // Piecewise-linear alpha through the given (t, alpha) knots. Requires
    // knots at t = 0 (alpha 1) and t = 1 (alpha 0), sorted, nonincreasing.
    static NoiseSchedule from_table(std::vector<std::pair<double, double>> table);

    Kind kind() const { return kind_; }
    const std::vector<std::pair<double, double>>& table() const { return table_; }

    double alpha(double t) const;
    // -alpha'(t) / (1 - alpha(t)): the continuous-time NELBO weight.
    double nelbo_weight(double t) const;

private:
    Kind kind_ = Kind::log_linear;
    std::vector<std::pair<double, double>> table_;
};

// [Q]_{ij} = q(x_t = j | x_s = i); rows sum to one.
struct TransitionMatrix {
    Eigen::MatrixXd entries;

    // Absorbing transition for relative survival alpha_{t|s} = alpha_t / alpha_s.
    static TransitionMatrix absorbing(double alpha_ratio, const Vocab& vocab);
    TransitionMatrix then(const TransitionMatrix& next) const;
    // Distribution of x_t given the one-hot x_s = from.
    CategoricalDist row(int from) const;
    bool is_row_stochastic(double tol = 1e-9) const;
};

void validate_tokens(std::span<const int> ids, const Vocab& vocab);

double alpha_at(const NoiseSchedule& schedule, double t);

CategoricalDist forward_marginal(int x0_id, double alpha_t, const Vocab& vocab);

TokenSequence forward_sample(std::span<const int> x0, double t, const NoiseSchedule& schedule,
                             const Vocab& vocab, uint64_t rng_seed);

// q(x_s | x_t, x_0) for s < t (alpha_s >= alpha_t).
CategoricalDist reverse_posterior(int xt_id, int x0_id, double alpha_s, double alpha_t, const Vocab& vocab);

// sum_{x0} q(x_s | x_t, x0) p(x0), closed form. x0_dist has K entries and no
// mass on the mask.
CategoricalDist posterior_marginalized(int xt_id, const CategoricalDist& x0_dist, double alpha_s,
                                       double alpha_t, const Vocab& vocab);

// Per-step weight (alpha_s - alpha_t) / (1 - alpha_t).
double step_weight(double alpha_s, double alpha_t);

// Weighted cross-entropy of the clean tokens at masked positions.
// x0_pred[i] is a K-way distribution for position i.
double diffusion_loss(std::span<const CategoricalDist> x0_pred, std::span<const int> x0,
                      std::span<const int> xt, double alpha_t, double alpha_s, const Vocab& vocab);

// Lifts a (K-1)-way distribution over non-mask tokens into K-way space with a
// zero at the mask slot.
CategoricalDist with_mask_slot(std::span<const double> token_probs, const Vocab& vocab);

}  // namespace ctrldiff
