#include <doctest.h>

#include <cmath>
#include <vector>

#include "ctrldiff/diffusion.hpp"
#include "ctrldiff/errors.hpp"
#include "ctrldiff/rng.hpp"

using namespace ctrldiff;

namespace {

// Independent oracle: the reverse posterior by Bayes' rule over explicit
// transition matrices, q(x_s | x_t, x_0) ∝ q(x_t | x_s) q(x_s | x_0).
std::vector<double> bayes_posterior(int xt, int x0, double alpha_s, double alpha_t, const Vocab& vocab) {
    const auto q_s0 = TransitionMatrix::absorbing(alpha_s, vocab);
    const auto q_ts = TransitionMatrix::absorbing(alpha_s > 0.0 ? alpha_t / alpha_s : 0.0, vocab);
    std::vector<double> w(static_cast<size_t>(vocab.size_total));
    double total = 0.0;
    for (int xs = 0; xs < vocab.size_total; ++xs) {
        w[static_cast<size_t>(xs)] = q_ts.entries(xs, xt) * q_s0.entries(x0, xs);
        total += w[static_cast<size_t>(xs)];
    }
    for (double& v : w) {
        v /= total;
    }
    return w;
}

}  // namespace

TEST_CASE("alpha_at on the log-linear schedule") {
    const auto s = NoiseSchedule::log_linear();
    CHECK(alpha_at(s, 0.0) == 1.0);
    CHECK(alpha_at(s, 1.0) == 0.0);
    CHECK(alpha_at(s, 0.3) == doctest::Approx(0.7).epsilon(1e-15));
    CHECK_THROWS_AS(alpha_at(s, -0.1), DomainError);
    CHECK_THROWS_AS(alpha_at(s, 1.5), DomainError);
}

TEST_CASE("custom tabulated schedule interpolates and validates") {
    const auto s = NoiseSchedule::from_table({{0.0, 1.0}, {0.5, 0.2}, {1.0, 0.0}});
    CHECK(s.alpha(0.25) == doctest::Approx(0.6));
    CHECK(s.alpha(0.75) == doctest::Approx(0.1));
    CHECK(s.nelbo_weight(0.25) == doctest::Approx(1.6 / 0.4));
    CHECK_THROWS_AS(NoiseSchedule::from_table({{0.0, 1.0}, {0.5, 0.1}, {0.7, 0.4}, {1.0, 0.0}}), InvalidInput);
    CHECK_THROWS_AS(NoiseSchedule::from_table({{0.0, 0.9}, {1.0, 0.0}}), InvalidInput);
}

TEST_CASE("forward_marginal examples") {
    const auto v = Vocab::mask_last(4);
    CHECK(forward_marginal(1, 1.0, v).probs() == std::vector<double>{0, 1, 0, 0});
    CHECK(forward_marginal(1, 0.0, v).probs() == std::vector<double>{0, 0, 0, 1});
    const auto d = forward_marginal(2, 0.7, v);
    CHECK(d[2] == doctest::Approx(0.7));
    CHECK(d[3] == doctest::Approx(0.3));
    CHECK(d[0] == 0.0);
    CHECK_THROWS_AS(forward_marginal(3, 0.5, v), InvalidInput);
}

TEST_CASE("forward_sample boundaries and masking rate") {
    const auto v = Vocab::mask_last(28);
    const auto s = NoiseSchedule::log_linear();
    TokenSequence x0(100000);
    for (size_t i = 0; i < x0.size(); ++i) {
        x0[i] = static_cast<int>(i % 27);
    }
    CHECK(forward_sample(x0, 0.0, s, v, 1) == x0);
    const auto all = forward_sample(x0, 1.0, s, v, 2);
    CHECK(std::all_of(all.begin(), all.end(), [&](int id) { return id == v.mask_id; }));

    const auto xt = forward_sample(x0, 0.25, s, v, 3);
    const double frac =
        static_cast<double>(std::count(xt.begin(), xt.end(), v.mask_id)) / static_cast<double>(xt.size());
    CHECK(std::abs(frac - 0.25) < 0.01);
    CHECK(forward_sample(x0, 0.25, s, v, 3) == xt);

    TokenSequence with_mask = {0, v.mask_id};
    CHECK_THROWS_AS(forward_sample(with_mask, 0.5, s, v, 1), InvalidInput);
}

TEST_CASE("reverse_posterior examples and errors") {
    const auto v = Vocab::mask_last(4);
    CHECK(reverse_posterior(1, 2, 0.3, 0.1, v).probs() == std::vector<double>{0, 1, 0, 0});
    const auto d = reverse_posterior(3, 0, 0.5, 0.25, v);
    CHECK(d[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
    CHECK(d[3] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
    CHECK(reverse_posterior(3, 1, 1.0, 0.0, v).probs() == std::vector<double>{0, 1, 0, 0});
    CHECK_THROWS_AS(reverse_posterior(3, 1, 0.2, 0.5, v), OrderingError);
    CHECK_THROWS_AS(reverse_posterior(3, 1, 1.0, 1.0, v), DegenerateInput);
    CHECK_THROWS_AS(reverse_posterior(0, 3, 0.5, 0.2, v), InvalidInput);
}

TEST_CASE("reverse_posterior agrees with Bayes over transition matrices") {
    for (int k = 2; k <= 5; ++k) {
        const auto v = Vocab::mask_last(k);
        for (double as : {0.9, 0.6, 0.3}) {
            for (double at : {0.5, 0.2, 0.0}) {
                if (at > as) {
                    continue;
                }
                for (int x0 = 0; x0 < k - 1; ++x0) {
                    for (int xt : {x0, v.mask_id}) {
                        if (xt == x0 && at == 0.0) {
                            continue;  // impossible observation
                        }
                        const auto closed = reverse_posterior(xt, x0, as, at, v);
                        const auto oracle = bayes_posterior(xt, x0, as, at, v);
                        for (int i = 0; i < k; ++i) {
                            CHECK(std::abs(closed[i] - oracle[static_cast<size_t>(i)]) < 1e-12);
                        }
                    }
                }
            }
        }
    }
}

TEST_CASE("posterior_marginalized matches explicit enumeration") {
    const auto v = Vocab::mask_last(4);
    CHECK(posterior_marginalized(2, CategoricalDist::one_hot(4, 0), 0.4, 0.1, v).probs() ==
          std::vector<double>{0, 0, 1, 0});

    const auto delta = posterior_marginalized(3, CategoricalDist::one_hot(4, 1), 0.6, 0.3, v);
    CHECK(total_variation(delta, reverse_posterior(3, 1, 0.6, 0.3, v)) < 1e-15);

    const CategoricalDist x0_dist({1.0 / 3, 1.0 / 3, 1.0 / 3, 0.0});
    const auto closed = posterior_marginalized(3, x0_dist, 0.8, 0.2, v);
    std::vector<double> brute(4, 0.0);
    for (int x0 = 0; x0 < 3; ++x0) {
        const auto r = reverse_posterior(3, x0, 0.8, 0.2, v);
        for (int i = 0; i < 4; ++i) {
            brute[static_cast<size_t>(i)] += r[i] * x0_dist[x0];
        }
    }
    for (int i = 0; i < 4; ++i) {
        CHECK(std::abs(closed[i] - brute[static_cast<size_t>(i)]) < 1e-15);
    }
    CHECK(closed[3] == doctest::Approx(0.2 / 0.8));

    CHECK_THROWS_AS(posterior_marginalized(3, CategoricalDist({0.5, 0.0, 0.0, 0.5}), 0.8, 0.2, v),
                    InvalidInput);
}

TEST_CASE("Chapman-Kolmogorov and posterior consistency on tiny vocabularies") {
    const std::vector<double> grid = {1.0, 0.75, 0.5, 0.25, 0.0};
    for (int k = 2; k <= 5; ++k) {
        const auto v = Vocab::mask_last(k);
        for (size_t a = 0; a < grid.size(); ++a) {
            for (size_t b = a; b < grid.size(); ++b) {
                const double au = grid[a];
                const double at = grid[b];
                const auto q_u0 = TransitionMatrix::absorbing(au, v);
                const auto q_tu = TransitionMatrix::absorbing(au > 0 ? at / au : 0.0, v);
                const auto composed = q_u0.then(q_tu);
                CHECK(composed.is_row_stochastic());
                for (int x0 = 0; x0 < k - 1; ++x0) {
                    const auto direct = forward_marginal(x0, at, v);
                    for (int j = 0; j < k; ++j) {
                        CHECK(std::abs(composed.entries(x0, j) - direct[j]) < 1e-12);
                    }
                    // sum_{x_t} q(x_s | x_t, x_0) q(x_t | x_0) = q(x_s | x_0)
                    if (at < 1.0) {
                        std::vector<double> marg(static_cast<size_t>(k), 0.0);
                        for (int xt = 0; xt < k; ++xt) {
                            const double w = direct[xt];
                            if (w == 0.0) {
                                continue;
                            }
                            const auto post = reverse_posterior(xt, x0, au, at, v);
                            for (int s = 0; s < k; ++s) {
                                marg[static_cast<size_t>(s)] += w * post[s];
                            }
                        }
                        const auto expected = forward_marginal(x0, au, v);
                        for (int s = 0; s < k; ++s) {
                            CHECK(std::abs(marg[static_cast<size_t>(s)] - expected[s]) < 1e-12);
                        }
                    }
                }
            }
        }
    }
}

TEST_CASE("absorbing invariants under random trajectories") {
    const auto v = Vocab::mask_last(6);
    Rng rng(11);
    for (int trial = 0; trial < 2000; ++trial) {
        int x = static_cast<int>(rng.below(5));
        double alpha = 1.0;
        bool masked = false;
        for (int step = 0; step < 6; ++step) {
            const double ratio = rng.uniform();
            const auto q = TransitionMatrix::absorbing(ratio, v);
            const auto row = q.row(x);
            const double u = rng.uniform();
            double c = 0.0;
            for (int j = 0; j < 6; ++j) {
                c += row[j];
                if (u < c) {
                    x = j;
                    break;
                }
            }
            if (masked) {
                REQUIRE(x == v.mask_id);
            }
            masked = x == v.mask_id;
            alpha *= ratio;
        }
        (void)alpha;
    }
}

TEST_CASE("diffusion_loss examples") {
    const auto v = Vocab::mask_last(4);
    const TokenSequence x0 = {0, 1, 2};
    std::vector<CategoricalDist> perfect = {CategoricalDist::one_hot(4, 0), CategoricalDist::one_hot(4, 1),
                                            CategoricalDist::one_hot(4, 2)};
    CHECK(diffusion_loss(perfect, x0, x0, 0.4, 0.6, v) == 0.0);
    const TokenSequence xt = {3, 1, 3};
    CHECK(diffusion_loss(perfect, x0, xt, 0.4, 0.6, v) == 0.0);

    const CategoricalDist uni({1.0 / 3, 1.0 / 3, 1.0 / 3, 0.0});
    std::vector<CategoricalDist> uniform_pred(3, uni);
    const TokenSequence one_masked = {0, 3, 2};
    const double w = (0.6 - 0.4) / (1.0 - 0.4);
    CHECK(diffusion_loss(uniform_pred, x0, one_masked, 0.4, 0.6, v) == doctest::Approx(w * std::log(3.0)));

    // Logits at unmasked positions do not matter.
    std::vector<CategoricalDist> scrambled = uniform_pred;
    scrambled[0] = CategoricalDist({0.1, 0.2, 0.7, 0.0});
    scrambled[2] = CategoricalDist({0.5, 0.5, 0.0, 0.0});
    CHECK(diffusion_loss(scrambled, x0, one_masked, 0.4, 0.6, v) ==
          diffusion_loss(uniform_pred, x0, one_masked, 0.4, 0.6, v));

    const TokenSequence inconsistent = {1, 1, 2};
    CHECK_THROWS_AS(diffusion_loss(uniform_pred, x0, inconsistent, 0.4, 0.6, v), InvalidInput);
}
