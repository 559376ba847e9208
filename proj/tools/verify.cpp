#include "verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>

#include "ctrldiff/block_policy.hpp"
#include "ctrldiff/blockgen.hpp"
#include "ctrldiff/denoiser.hpp"
#include "ctrldiff/diffusion.hpp"
#include "ctrldiff/errors.hpp"
#include "ctrldiff/guidance.hpp"
#include "oracles.hpp"

namespace ctrldiff::verify {

void Report::add(std::string name, bool pass, std::string detail) {
    lines.push_back({std::move(name), pass, std::move(detail)});
}

bool Report::ok() const {
    return std::all_of(lines.begin(), lines.end(), [](const CheckLine& l) { return l.pass; });
}

void Report::print(std::ostream& out) const {
    for (const auto& l : lines) {
        out << (l.pass ? "PASS " : "FAIL ") << l.name << ": " << l.detail << "\n";
    }
}

namespace {

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, a);
    return buf;
}

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// q(x_t = j | x_0 = i) written out by hand for the absorbing process.
double hand_forward(int x0, int xt, double alpha, const Vocab& v) {
    if (v.is_mask(xt)) {
        return 1.0 - alpha;
    }
    return xt == x0 ? alpha : 0.0;
}

// q(x_s | x_t, x_0) by Bayes' rule over the hand-written one-step kernel.
std::vector<double> hand_posterior(int xt, int x0, double as, double at, const Vocab& v) {
    std::vector<double> w(static_cast<size_t>(v.size_total));
    double total = 0.0;
    for (int xs = 0; xs < v.size_total; ++xs) {
        double step;
        if (v.is_mask(xs)) {
            step = v.is_mask(xt) ? 1.0 : 0.0;
        } else {
            const double keep = at / as;
            step = xt == xs ? keep : (v.is_mask(xt) ? 1.0 - keep : 0.0);
        }
        w[static_cast<size_t>(xs)] = step * hand_forward(x0, xs, as, v);
        total += w[static_cast<size_t>(xs)];
    }
    for (double& x : w) {
        x /= total;
    }
    return w;
}

CategoricalDist random_dist(int size, Rng& rng, int zero_at = -1) {
    std::vector<double> w(static_cast<size_t>(size));
    for (int i = 0; i < size; ++i) {
        w[static_cast<size_t>(i)] = i == zero_at ? 0.0 : 0.1 + rng.uniform();
    }
    return CategoricalDist::from_weights(w);
}

int draw(const CategoricalDist& d, Rng& rng) {
    double u = rng.uniform();
    for (int i = 0; i + 1 < d.size(); ++i) {
        if (u < d[i]) {
            return i;
        }
        u -= d[i];
    }
    return d.size() - 1;
}

// Records every noised block the sampler hands to a guide and leaves the
// distributions untouched.
class SpyGuide : public BlockGuide {
public:
    void apply(std::vector<CategoricalDist>&, std::span<const int>, std::span<const int> noised_block,
               std::span<const int>) const override {
        seen.emplace_back(noised_block.begin(), noised_block.end());
    }
    mutable std::vector<TokenSequence> seen;
};

double max_abs(std::span<const double> a, std::span<const double> b) {
    double worst = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        worst = std::max(worst, std::abs(a[i] - b[i]));
    }
    return worst;
}

double simplex_fd_error(const SequenceClassifier& clf, int rows, int cols, std::span<const int> prefix, Rng& rng) {
    Eigen::MatrixXd x(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
        for (Eigen::Index v = 0; v < cols; ++v) {
            x(i, v) = 0.1 + rng.uniform();
        }
        x.row(i) /= x.row(i).sum();
    }
    Eigen::MatrixXd g;
    clf.relaxed_log_prob(x, prefix, 1, &g);
    double worst = 0.0;
    for (int c = 0; c < 30; ++c) {
        const auto i = static_cast<Eigen::Index>(rng.below(static_cast<size_t>(rows)));
        const auto v = static_cast<Eigen::Index>(rng.below(static_cast<size_t>(cols)));
        const double h = 1e-5;
        Eigen::MatrixXd up = x, down = x;
        up(i, v) += h;
        down(i, v) -= h;
        const double fd =
            (clf.relaxed_log_prob(up, prefix, 1, nullptr) - clf.relaxed_log_prob(down, prefix, 1, nullptr)) / (2 * h);
        worst = std::max(worst, std::abs(fd - g(i, v)) / std::max(1e-8, std::abs(fd) + std::abs(g(i, v))));
    }
    return worst;
}

}  // namespace

Report diffusion_algebra(uint64_t seed) {
    Report rep;
    Stopwatch sw;
    const std::vector<double> grid = {1.0, 0.75, 0.5, 0.25, 0.0};
    Rng rng(seed);
    double ck = 0.0, post = 0.0, marg = 0.0, closed = 0.0;
    long cases = 0;
    for (int k = 2; k <= 5; ++k) {
        const auto v = Vocab::mask_last(k);
        for (size_t a = 0; a < grid.size(); ++a) {
            for (size_t b = a; b < grid.size(); ++b) {
                const double as = grid[a];
                const double at = grid[b];
                const auto composed =
                    TransitionMatrix::absorbing(as, v).then(TransitionMatrix::absorbing(as > 0 ? at / as : 0.0, v));
                for (int x0 = 0; x0 < k - 1; ++x0) {
                    ++cases;
                    const auto direct = forward_marginal(x0, at, v);
                    for (int j = 0; j < k; ++j) {
                        ck = std::max(ck, std::abs(composed.entries(x0, j) - hand_forward(x0, j, at, v)));
                        ck = std::max(ck, std::abs(direct[j] - hand_forward(x0, j, at, v)));
                    }
                    if (b == a || as == 0.0) {
                        continue;
                    }
                    // Posteriors against Bayes and their marginalization over x_t.
                    std::vector<double> sum(static_cast<size_t>(k), 0.0);
                    for (int xt = 0; xt < k; ++xt) {
                        const double w = hand_forward(x0, xt, at, v);
                        if (w == 0.0) {
                            continue;
                        }
                        const auto p = reverse_posterior(xt, x0, as, at, v);
                        post = std::max(post, max_abs(p.probs(), hand_posterior(xt, x0, as, at, v)));
                        for (int s = 0; s < k; ++s) {
                            sum[static_cast<size_t>(s)] += w * p[s];
                        }
                    }
                    for (int s = 0; s < k; ++s) {
                        marg = std::max(marg, std::abs(sum[static_cast<size_t>(s)] - hand_forward(x0, s, as, v)));
                    }
                }
                if (b == a || as == 0.0) {
                    continue;
                }
                // Closed-form marginalization over a random clean-token law.
                const auto x0_dist = random_dist(k, rng, v.mask_id);
                const auto c = posterior_marginalized(v.mask_id, x0_dist, as, at, v);
                std::vector<double> brute(static_cast<size_t>(k), 0.0);
                for (int x0 = 0; x0 < k - 1; ++x0) {
                    const auto h = hand_posterior(v.mask_id, x0, as, at, v);
                    for (int s = 0; s < k; ++s) {
                        brute[static_cast<size_t>(s)] += x0_dist[x0] * h[static_cast<size_t>(s)];
                    }
                }
                closed = std::max(closed, max_abs(c.probs(), brute));
            }
        }
    }
    const double secs = sw.seconds();
    rep.add("chapman-kolmogorov", ck < 1e-12, fmt("max error %.2e", ck) + " over " + std::to_string(cases) + " cases");
    rep.add("posterior vs bayes", post < 1e-12, fmt("max error %.2e", post));
    rep.add("posterior marginalization", marg < 1e-12 && closed < 1e-12,
            fmt("sum over x_t %.2e", marg) + fmt(", mixture closed form %.2e", closed));
    rep.add("diffusion algebra runtime", secs < 5.0, fmt("%.3f s", secs));
    return rep;
}

Report absorbing_invariants(uint64_t seed, int trajectories) {
    Report rep;
    const auto v = Vocab::mask_last(6);
    const auto schedule = NoiseSchedule::log_linear();
    Rng rng(seed);

    long revivals = 0, forward_steps = 0;
    for (int n = 0; n < trajectories; ++n) {
        // Markov chain through absorbing kernels with random survival ratios.
        TokenSequence x0(16);
        for (auto& t : x0) {
            t = static_cast<int>(rng.below(5));
        }
        TokenSequence x = x0;
        for (int step = 0; step < 6; ++step) {
            const auto q = TransitionMatrix::absorbing(rng.uniform(), v);
            for (size_t i = 0; i < x.size(); ++i) {
                const int next = draw(q.row(x[i]), rng);
                revivals += (v.is_mask(x[i]) && !v.is_mask(next)) || (!v.is_mask(next) && next != x0[i]);
                x[i] = next;
                ++forward_steps;
            }
        }
        // forward_sample on one seed over increasing times.
        const uint64_t s = rng.next_u64();
        TokenSequence prev = x0;
        double t = 0.0;
        for (int step = 0; step < 6; ++step) {
            t += (1.0 - t) * rng.uniform();
            const auto xt = forward_sample(x0, t, schedule, v, s);
            for (size_t i = 0; i < xt.size(); ++i) {
                revivals += (v.is_mask(prev[i]) && !v.is_mask(xt[i])) || (!v.is_mask(xt[i]) && xt[i] != x0[i]);
                ++forward_steps;
            }
            prev = xt;
        }
    }
    rep.add("forward mask revivals", revivals == 0,
            std::to_string(revivals) + " over " + std::to_string(forward_steps) + " position steps in " +
                std::to_string(trajectories) + " trajectories");

    const oracle::HashedDenoiser model(v, derive_seed(seed, 1));
    long mutations = 0, reverse_steps = 0;
    for (int n = 0; n < trajectories; ++n) {
        SamplerConfig cfg;
        cfg.nucleus_p = 1.0;
        if (n % 2 == 1) {
            cfg.mode = SamplerMode::ancestral;
            cfg.steps_per_block = 8;
        }
        SpyGuide spy;
        TokenSequence prefix(static_cast<size_t>(n % 3), 0);
        const auto block = generate_block(model, prefix, 8, schedule, cfg, rng, &spy);
        spy.seen.push_back(block);
        for (size_t k = 1; k < spy.seen.size(); ++k) {
            for (size_t i = 0; i < block.size(); ++i) {
                const int before = spy.seen[k - 1][i];
                mutations += !v.is_mask(before) && spy.seen[k][i] != before;
                ++reverse_steps;
            }
        }
        mutations += std::count(block.begin(), block.end(), v.mask_id);
    }
    rep.add("reverse unmasked mutations", mutations == 0,
            std::to_string(mutations) + " over " + std::to_string(reverse_steps) + " position steps in " +
                std::to_string(trajectories) + " trajectories");
    return rep;
}

Report gumbel_fit(uint64_t seed, int draws) {
    Report rep;
    const std::vector<std::vector<double>> cases = {
        {0.5, -1.0, 2.0, 0.0}, {0.0, 0.0, 0.0, 0.0}, {3.0, -2.0, 1.0, -0.5}};
    for (size_t c = 0; c < cases.size(); ++c) {
        Rng rng(derive_seed(seed, c));
        std::vector<double> count(4, 0.0);
        for (int i = 0; i < draws; ++i) {
            count[static_cast<size_t>(gumbel_argmax(cases[c], rng))] += 1.0;
        }
        const auto p = softmax(cases[c]);
        double chi2 = 0.0;
        for (size_t i = 0; i < p.size(); ++i) {
            const double expected = p[i] * draws;
            chi2 += std::pow(count[i] - expected, 2) / expected;
        }
        const double pv = oracle::chi_square3_sf(chi2);
        rep.add("gumbel chi-square logits " + std::to_string(c + 1), pv > 0.001,
                fmt("chi2 %.3f", chi2) + fmt(", p %.4f", pv) + " at " + std::to_string(draws) + " draws");
    }
    return rep;
}

Report sampler_equivalence(uint64_t seed, int samples) {
    Report rep;
    Stopwatch sw;
    const auto v = Vocab::mask_last(4);
    const oracle::HashedDenoiser model(v, derive_seed(seed, 1));
    const auto exact = oracle::first_hitting_law(model, 2);
    SamplerConfig fh;
    fh.nucleus_p = 1.0;
    SamplerConfig anc = fh;
    anc.mode = SamplerMode::ancestral;
    anc.steps_per_block = 1000;
    const double tv_fh = total_variation(oracle::empirical_block_law(model, 2, fh, samples, derive_seed(seed, 2)), exact);
    const double tv_anc =
        total_variation(oracle::empirical_block_law(model, 2, anc, samples, derive_seed(seed, 3)), exact);
    const double secs = sw.seconds();
    rep.add("first-hitting vs exact law", tv_fh < 0.01, fmt("TV %.4f", tv_fh) + " at " + std::to_string(samples));
    rep.add("ancestral (1000 steps) vs exact law", tv_anc < 0.01,
            fmt("TV %.4f", tv_anc) + " at " + std::to_string(samples));
    rep.add("sampler equivalence runtime", secs < 60.0, fmt("%.2f s", secs));
    return rep;
}

Report guidance_oracle(uint64_t seed) {
    Report rep;
    Stopwatch sw;
    Rng rng(seed);
    double exact_err = 0.0, single_err = 0.0, uniform_err = 0.0;
    bool zero_exact = true;
    std::vector<std::string> table;
    for (int k = 2; k <= 4; ++k) {
        const auto v = Vocab::mask_last(k);
        for (int len = 1; len <= 3; ++len) {
            const long outcomes = oracle::power(k, len);
            std::vector<std::vector<double>> probs;
            for (long o = 0; o < outcomes; ++o) {
                probs.push_back(random_dist(2, rng).probs());
            }
            const oracle::TableClassifier clf(v, probs);
            const oracle::TableClassifier flat(v, std::vector<std::vector<double>>(static_cast<size_t>(outcomes), {0.5, 0.5}));
            const oracle::LinearClassifier smooth(v, 2, len, rng.next_u64(), 1.0);
            const auto joint = random_dist(static_cast<int>(outcomes), rng).probs();
            std::vector<CategoricalDist> dists;
            for (int i = 0; i < len; ++i) {
                dists.push_back(random_dist(k, rng));
            }
            const auto product = joint_from_marginals(dists);
            const TokenSequence xt(static_cast<size_t>(len), v.mask_id);
            for (double gamma : {0.0, 0.5, 1.0, 2.0}) {
                for (int label = 0; label < 2; ++label) {
                    const auto got = guided_posterior_exact(joint, clf, gamma, label, v, len);
                    std::vector<double> hand(joint.size());
                    double z = 0.0;
                    for (size_t o = 0; o < joint.size(); ++o) {
                        hand[o] = joint[o] * std::pow(probs[o][static_cast<size_t>(label)], gamma);
                        z += hand[o];
                    }
                    for (double& h : hand) {
                        h /= z;
                    }
                    exact_err = std::max(exact_err, max_abs(got, hand));
                    uniform_err = std::max(uniform_err, max_abs(guided_posterior_exact(joint, flat, gamma, label, v, len), joint));

                    const auto fact = guided_posterior_factorized(dists, clf, gamma, label, xt, {});
                    const auto ex = marginals_of_joint(guided_posterior_exact(product, clf, gamma, label, v, len), len, k);
                    double tv = 0.0;
                    for (int i = 0; i < len; ++i) {
                        tv = std::max(tv, total_variation(fact[static_cast<size_t>(i)], ex[static_cast<size_t>(i)]));
                        if (len == 1) {
                            single_err = std::max(single_err, max_abs(fact[0].probs(), ex[0].probs()));
                        }
                    }
                    if (gamma == 0.0) {
                        zero_exact = zero_exact && got == joint;
                        const auto tay = guided_posterior_taylor(dists, smooth, gamma, label, xt, {});
                        for (int i = 0; i < len; ++i) {
                            zero_exact = zero_exact && fact[static_cast<size_t>(i)].probs() == dists[static_cast<size_t>(i)].probs() &&
                                         tay[static_cast<size_t>(i)].probs() == dists[static_cast<size_t>(i)].probs();
                        }
                    }
                    if (label == 0) {
                        std::ostringstream row;
                        row << "K=" << k << " L'=" << len << " gamma=" << gamma;
                        table.push_back(row.str() + fmt(": TV(exact, factorized) %.4f", tv));
                    }
                }
            }
        }
    }
    const double secs = sw.seconds();
    rep.add("exact guided law vs enumeration", exact_err < 1e-12 && uniform_err < 1e-12,
            fmt("max error %.2e", exact_err) + fmt(", uniform classifier %.2e", uniform_err));
    rep.add("factorized equals exact at one position", single_err < 1e-12, fmt("max error %.2e", single_err));
    rep.add("zero strength is exact in all modes", zero_exact, zero_exact ? "bitwise identical" : "outputs differ");
    for (const auto& row : table) {
        rep.add("guidance gap", true, row);
    }
    rep.add("guidance oracle runtime", secs < 120.0, fmt("%.2f s", secs));
    return rep;
}

Report taylor_checks(uint64_t seed) {
    Report rep;
    Rng rng(seed);
    const auto v4 = Vocab::mask_last(4);
    const oracle::LinearClassifier linear(v4, 3, 4, rng.next_u64(), 1.0);
    const double lin = simplex_fd_error(linear, 4, 4, {}, rng);
    rep.add("linear classifier input gradients", lin < 1e-4, fmt("max relative error %.2e at 30 coordinates", lin));

    ClassifierConfig cfg;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.hidden_dim = 16;
    cfg.context_length = 32;
    const TransformerClassifier<double> neural(cfg, v4, rng.next_u64());
    const TokenSequence prefix = {0, 2, 1};
    const double net = simplex_fd_error(neural, 5, 4, prefix, rng);
    rep.add("neural classifier input gradients", net < 1e-4, fmt("max relative error %.2e at 30 coordinates", net));

    const auto v3 = Vocab::mask_last(3);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const oracle::LinearClassifier clf(v3, 2, 2, rng.next_u64(), 0.3);
        const TokenSequence xt = {v3.mask_id, v3.mask_id};
        std::vector<CategoricalDist> dists = {random_dist(3, rng, v3.mask_id), random_dist(3, rng, v3.mask_id)};
        const auto fact = guided_posterior_factorized(dists, clf, 1.0, trial % 2, xt, {});
        const auto tay = guided_posterior_taylor(dists, clf, 1.0, trial % 2, xt, {});
        for (size_t i = 0; i < 2; ++i) {
            worst = std::max(worst, total_variation(fact[i], tay[i]));
        }
    }
    rep.add("taylor vs factorized on a smooth classifier", worst < 0.05,
            fmt("max per-position TV %.4f over 20 instances", worst));
    return rep;
}

Report denoiser_gradients(uint64_t seed) {
    Report rep;
    const auto v = Vocab::mask_last(6);
    DenoiserConfig c;
    c.layers = 2;
    c.hidden_dim = 16;
    c.heads = 2;
    c.context_length = 12;
    auto net = nn::Transformer<double>::initialized(c.transformer(v), derive_seed(seed, 1));
    Rng rng(derive_seed(seed, 2));
    for (auto* p : net.parameters()) {
        for (Eigen::Index i = 0; i < p->size(); ++i) {
            p->data()[i] += 0.3 * rng.normal();
        }
    }
    std::vector<NoisedExample> examples;
    for (int e = 0; e < 2; ++e) {
        TokenSequence x0(8);
        for (auto& t : x0) {
            t = static_cast<int>(rng.below(5));
        }
        examples.push_back(make_noised_example(x0, BlockLayout{{3, 1, 4}}, LossEstimator::masked_count,
                                               NoiseSchedule::log_linear(), v, rng));
    }
    auto grad = net.zeros_like();
    denoiser_loss<double>(net, v, examples, &grad);
    auto params = net.parameters();
    auto grads = grad.parameters();
    double worst = 0.0;
    int checked = 0;
    while (checked < 30) {
        const size_t pi = rng.below(params.size());
        const auto idx = static_cast<Eigen::Index>(rng.below(static_cast<size_t>(params[pi]->size())));
        double& x = params[pi]->data()[idx];
        const double saved = x;
        const double h = 1e-5;
        x = saved + h;
        const double up = denoiser_loss<double>(net, v, examples, nullptr);
        x = saved - h;
        const double down = denoiser_loss<double>(net, v, examples, nullptr);
        x = saved;
        const double fd = (up - down) / (2 * h);
        const double an = grads[pi]->data()[idx];
        if (std::abs(fd) + std::abs(an) < 1e-9) {
            continue;  // unused embedding rows
        }
        worst = std::max(worst, std::abs(fd - an) / (std::abs(fd) + std::abs(an)));
        ++checked;
    }
    rep.add("denoiser parameter gradients", worst < 1e-4, fmt("max relative error %.2e at 30 coordinates", worst));
    return rep;
}

Report ppo_identities(uint64_t seed) {
    Report rep;
    Rng rng(seed);
    PolicyConfig pc;
    pc.window = 3;
    pc.conv_channels = 4;
    pc.mlp_hidden = 6;
    const int dim = 5;
    const PolicyModel policy(pc, dim, rng.next_u64());
    std::vector<Transition> batch;
    for (int i = 0; i < 16; ++i) {
        Eigen::MatrixXd means(i % 4, dim);
        for (Eigen::Index j = 0; j < means.size(); ++j) {
            means.data()[j] = rng.normal();
        }
        const TokenSequence toks = {1, 2, 2, 3, 1, 1};
        Transition t;
        t.state = extract_state(means, toks, pc.window);
        t.action = policy.sample_action(t.state, rng, &t.log_prob);
        t.value = policy.forward(t.state).value;
        t.advantage = 0.0;
        t.ret = t.value;
        batch.push_back(t);
    }
    auto grad = policy.params().zeros_like();
    const auto diag = ppo_gradient(policy, batch, PPOConfig{}, grad);
    const double norm = grad.squared_norm();
    rep.add("zero advantages give zero gradient", norm == 0.0 && diag.objective == 0.0,
            fmt("squared gradient norm %.3g", norm) + fmt(", objective %.3g", diag.objective));

    std::vector<double> lp(64), adv(64);
    double mean = 0.0;
    for (size_t i = 0; i < lp.size(); ++i) {
        lp[i] = -3.0 * rng.uniform();
        adv[i] = rng.normal();
        mean += adv[i] / static_cast<double>(adv.size());
    }
    const double ratio_one = clipped_objective(lp, lp, adv, 0.2);
    rep.add("ratio-one objective equals mean advantage", std::abs(ratio_one - mean) < 1e-12,
            fmt("objective %.12f", ratio_one) + fmt(", mean advantage %.12f", mean));

    const double one_five[] = {std::log(1.5)};
    const double zero[] = {0.0};
    const double a1[] = {1.0};
    const double hand = clipped_objective(one_five, zero, a1, 0.2);
    rep.add("clipped hand case (ratio 1.5, clip 0.2, advantage 1)", std::abs(hand - 1.2) < 1e-12,
            fmt("objective %.12f, expected 1.2", hand));

    bool gae_ok = true;
    const std::vector<double> values(3, 0.0);
    for (int code = 0; code < 27; ++code) {
        const std::vector<double> r = {double(code % 3), double(code / 3 % 3), double(code / 9)};
        const auto a = gae_advantages(r, values, 1.0, 1.0);
        gae_ok = gae_ok && a[0] == r[0] + r[1] + r[2] && a[1] == r[1] + r[2] && a[2] == r[2];
    }
    rep.add("advantages equal reward-to-go (lambda 1, discount 1, V 0)", gae_ok,
            gae_ok ? "27 enumerated 3-step episodes" : "mismatch on an enumerated episode");
    return rep;
}

Report bandit_convergence(const std::vector<uint64_t>& seeds, int episodes) {
    Report rep;
    const PolicyConfig pc;
    const int best = 8;
    const int best_index = pc.actions.index_of(best);
    for (uint64_t seed : seeds) {
        RiggedBandit env(8, pc.window, best);
        const auto r = train_policy(PolicyModel(pc, 8, seed), env, episodes, PPOConfig{}, seed);
        const double p = r.policy.forward(env.state()).probs[static_cast<size_t>(best_index)];
        int chosen = 0;
        const size_t tail = std::min<size_t>(200, r.trace.size());
        for (size_t i = r.trace.size() - tail; i < r.trace.size(); ++i) {
            chosen += r.trace[i].length_histogram.count(best) ? 1 : 0;
        }
        rep.add("bandit seed " + std::to_string(seed), p >= 0.9,
                fmt("p(best) %.4f", p) + " after " + std::to_string(episodes) + " episodes, chosen in " +
                    std::to_string(chosen) + " of the last " + std::to_string(tail));
    }
    return rep;
}

Report run_suite(const std::string& name, uint64_t seed) {
    Report rep;
    auto append = [&](const Report& r) { rep.lines.insert(rep.lines.end(), r.lines.begin(), r.lines.end()); };
    if (name == "diffusion") {
        append(diffusion_algebra(seed));
        append(absorbing_invariants(seed, 10000));
    } else if (name == "sampler") {
        append(gumbel_fit(seed, 1000000));
        append(sampler_equivalence(seed, 100000));
    } else if (name == "guidance") {
        append(guidance_oracle(seed));
        append(taylor_checks(seed));
    } else if (name == "ppo") {
        append(ppo_identities(seed));
        append(bandit_convergence({1, 2, 3}, 2000));
    } else if (name == "denoiser") {
        append(denoiser_gradients(seed));
    } else {
        throw ConfigurationError("unknown verify suite '" + name + "'");
    }
    return rep;
}

}  // namespace ctrldiff::verify
