#include "ctrldiff/blockgen.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "ctrldiff/errors.hpp"

namespace ctrldiff {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::vector<double> row_vector(const Eigen::MatrixXd& m, Eigen::Index row) {
    std::vector<double> v(static_cast<size_t>(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
        v[static_cast<size_t>(j)] = m(row, j);
    }
    return v;
}

// K-way clean-token distribution (zero at the mask) from filtered logits.
CategoricalDist x0_distribution(std::span<const double> filtered, const Vocab& vocab) {
    return with_mask_slot(softmax(filtered), vocab);
}

std::vector<double> log_probs(const CategoricalDist& d) {
    std::vector<double> out(static_cast<size_t>(d.size()));
    for (int i = 0; i < d.size(); ++i) {
        out[static_cast<size_t>(i)] = d[i] > 0.0 ? std::log(d[i]) : kNegInf;
    }
    return out;
}

void check_prompt(std::span<const int> prompt, const Vocab& vocab) {
    validate_tokens(prompt, vocab);
    for (int t : prompt) {
        if (vocab.is_mask(t)) {
            throw InvalidInput("prompt contains a mask token");
        }
    }
}

}  // namespace

void SamplerConfig::validate() const {
    if (!(nucleus_p > 0.0 && nucleus_p <= 1.0)) {
        throw ConfigurationError("nucleus_p must lie in (0, 1]");
    }
    if (mode == SamplerMode::ancestral && steps_per_block < 1) {
        throw ConfigurationError("steps_per_block must be positive");
    }
}

int gumbel_argmax(std::span<const double> logits, Rng& rng) {
    if (logits.empty()) {
        throw InvalidInput("gumbel_argmax needs at least one category");
    }
    int best = -1;
    double best_val = kNegInf;
    for (size_t i = 0; i < logits.size(); ++i) {
        const double u = rng.uniform_open();
        const double l = logits[i];
        if (std::isnan(l)) {
            throw InvalidInput("gumbel_argmax received a NaN logit");
        }
        if (l == kNegInf) {
            continue;
        }
        const double v = l - std::log(-std::log(u));
        if (best < 0 || v > best_val) {
            best = static_cast<int>(i);
            best_val = v;
        }
    }
    if (best < 0) {
        throw InvalidInput("gumbel_argmax received only -inf logits");
    }
    return best;
}

std::vector<double> first_hitting_times(double t_start, std::span<const double> uniforms) {
    if (!(t_start > 0.0 && t_start <= 1.0)) {
        throw DomainError("first-hitting start time must lie in (0, 1]");
    }
    std::vector<double> times;
    times.reserve(uniforms.size());
    double t = t_start;
    const auto n = static_cast<int>(uniforms.size());
    for (int k = 0; k < n; ++k) {
        const double u = uniforms[static_cast<size_t>(k)];
        if (!(u > 0.0 && u <= 1.0)) {
            throw DomainError("first-hitting uniforms must lie in (0, 1]");
        }
        t *= std::pow(u, 1.0 / (n - k));
        times.push_back(t);
    }
    return times;
}

std::vector<double> first_hitting_times(double t_start, int n_masked, Rng& rng) {
    if (n_masked < 1) {
        throw InvalidInput("first_hitting_times needs at least one masked position");
    }
    std::vector<double> u(static_cast<size_t>(n_masked));
    for (auto& x : u) {
        x = rng.uniform_open();
    }
    return first_hitting_times(t_start, u);
}

std::vector<double> nucleus_filter(std::span<const double> logits, double p) {
    if (!(p > 0.0 && p <= 1.0)) {
        throw DomainError("nucleus threshold must lie in (0, 1]");
    }
    std::vector<double> out(logits.begin(), logits.end());
    if (p >= 1.0 || out.empty()) {
        return out;
    }
    const auto probs = softmax(logits);
    std::vector<size_t> order(probs.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return probs[a] > probs[b]; });
    double mass = 0.0;
    size_t keep = 0;
    while (keep < order.size() && mass < p) {
        mass += probs[order[keep]];
        ++keep;
    }
    for (size_t i = keep; i < order.size(); ++i) {
        out[order[i]] = kNegInf;
    }
    return out;
}

TokenSequence generate_block(const BlockDenoiser& model, std::span<const int> prefix, int block_len,
                             const NoiseSchedule& schedule, const SamplerConfig& cfg, Rng& rng,
                             const BlockGuide* guide, BlockTrace* trace) {
    cfg.validate();
    if (block_len < 0) {
        throw InvalidInput("block length must be nonnegative");
    }
    if (guide && !guide->active()) {
        guide = nullptr;
    }
    const Vocab& vocab = model.vocab();
    TokenSequence block(static_cast<size_t>(block_len), vocab.mask_id);
    if (block_len == 0) {
        return block;
    }
    auto call = [&]() {
        if (trace) {
            ++trace->denoiser_calls;
        }
        return model.x0_logits(block, prefix);
    };
    // Distributions for positions a guide is not asked to change.
    auto frozen_dists = [&]() {
        std::vector<CategoricalDist> d;
        d.reserve(block.size());
        for (int tok : block) {
            d.push_back(CategoricalDist::one_hot(vocab.size_total, tok));
        }
        return d;
    };

    if (cfg.mode == SamplerMode::first_hitting) {
        const auto times = first_hitting_times(1.0, block_len, rng);
        std::vector<int> masked(static_cast<size_t>(block_len));
        std::iota(masked.begin(), masked.end(), 0);
        for (double t : times) {
            const size_t pick = rng.below(masked.size());
            const int pos = masked[pick];
            masked.erase(masked.begin() + static_cast<long>(pick));
            const auto logits = call();
            const auto filtered = nucleus_filter(row_vector(logits, pos), cfg.nucleus_p);
            if (guide) {
                auto dists = frozen_dists();
                dists[static_cast<size_t>(pos)] = x0_distribution(filtered, vocab);
                const int positions[] = {pos};
                guide->apply(dists, positions, block, prefix);
                block[static_cast<size_t>(pos)] = gumbel_argmax(log_probs(dists[static_cast<size_t>(pos)]), rng);
            } else {
                block[static_cast<size_t>(pos)] = vocab.from_output_index(gumbel_argmax(filtered, rng));
            }
            if (trace) {
                trace->event_times.push_back(t);
            }
        }
        return block;
    }

    const int steps = cfg.steps_per_block;
    Eigen::MatrixXd logits;
    std::vector<std::vector<double>> filtered(static_cast<size_t>(block_len));
    bool stale = true;
    std::vector<int> masked;
    for (int i = steps; i >= 1; --i) {
        const double t = static_cast<double>(i) / steps;
        const double s = static_cast<double>(i - 1) / steps;
        const double alpha_t = schedule.alpha(t);
        const double alpha_s = schedule.alpha(s);
        masked.clear();
        for (int p = 0; p < block_len; ++p) {
            if (vocab.is_mask(block[static_cast<size_t>(p)])) {
                masked.push_back(p);
            }
        }
        if (masked.empty()) {
            break;
        }
        if (alpha_t >= 1.0) {
            throw DegenerateInput("masked tokens remain where the schedule keeps every token");
        }
        if (stale) {
            logits = call();
            for (int p : masked) {
                filtered[static_cast<size_t>(p)] = nucleus_filter(row_vector(logits, p), cfg.nucleus_p);
            }
            stale = false;
        }
        bool changed = false;
        if (guide) {
            auto dists = frozen_dists();
            for (int p : masked) {
                dists[static_cast<size_t>(p)] = posterior_marginalized(
                    vocab.mask_id, x0_distribution(filtered[static_cast<size_t>(p)], vocab), alpha_s, alpha_t, vocab);
            }
            guide->apply(dists, masked, block, prefix);
            for (int p : masked) {
                const int tok = gumbel_argmax(log_probs(dists[static_cast<size_t>(p)]), rng);
                block[static_cast<size_t>(p)] = tok;
                changed = changed || !vocab.is_mask(tok);
            }
        } else {
            // Unmask with probability (alpha_s - alpha_t) / (1 - alpha_t), then draw
            // the token from the x0 distribution: the same law as sampling the
            // marginalized posterior in one draw.
            const double w = step_weight(alpha_s, alpha_t);
            for (int p : masked) {
                if (rng.uniform() < w) {
                    block[static_cast<size_t>(p)] =
                        vocab.from_output_index(gumbel_argmax(filtered[static_cast<size_t>(p)], rng));
                    changed = true;
                }
            }
        }
        if (changed) {
            stale = true;
            if (trace) {
                trace->event_times.push_back(s);
            }
        }
    }
    return block;
}

namespace {

std::span<const int> conditioning_prefix(const TokenSequence& tokens, int context, int block_len) {
    const auto keep = static_cast<size_t>(std::max(0, context - block_len));
    std::span<const int> all(tokens);
    return all.size() > keep ? all.last(keep) : all;
}

}  // namespace

GenerationResult generate_sequence(const BlockDenoiser& model, std::span<const int> prompt, const BlockLayout& layout,
                                   const NoiseSchedule& schedule, const SamplerConfig& cfg, const BlockGuide* guide) {
    check_prompt(prompt, model.vocab());
    layout.validate(layout.total());
    GenerationResult out;
    out.tokens.assign(prompt.begin(), prompt.end());
    Rng rng(cfg.rng_seed);
    for (int len : layout.lengths) {
        BlockTrace trace;
        const auto block = generate_block(model, conditioning_prefix(out.tokens, model.context_length(), len), len,
                                          schedule, cfg, rng, guide, &trace);
        out.tokens.insert(out.tokens.end(), block.begin(), block.end());
        out.layout.lengths.push_back(len);
        out.traces.push_back(std::move(trace));
    }
    return out;
}

GenerationResult generate_sequence(const BlockDenoiser& model, std::span<const int> prompt, int length,
                                   BlockLengthChooser& chooser, const NoiseSchedule& schedule,
                                   const SamplerConfig& cfg, const BlockGuide* guide) {
    check_prompt(prompt, model.vocab());
    if (length < 0) {
        throw InvalidInput("generation length must be nonnegative");
    }
    GenerationResult out;
    out.tokens.assign(prompt.begin(), prompt.end());
    Rng rng(cfg.rng_seed);
    Rng chooser_rng(derive_seed(cfg.rng_seed, 0x63686f6f7365ULL));
    std::vector<int> starts;
    int remaining = length;
    while (remaining > 0) {
        const GenerationState state{out.tokens, static_cast<int>(prompt.size()), starts, remaining};
        const int chosen = chooser.next_block_length(state, chooser_rng);
        if (chosen < 1) {
            throw InvalidInput("block length chooser returned " + std::to_string(chosen));
        }
        const int len = std::min(chosen, remaining);
        BlockTrace trace;
        const auto block = generate_block(model, conditioning_prefix(out.tokens, model.context_length(), len), len,
                                          schedule, cfg, rng, guide, &trace);
        starts.push_back(static_cast<int>(out.tokens.size()));
        out.tokens.insert(out.tokens.end(), block.begin(), block.end());
        out.layout.lengths.push_back(len);
        out.traces.push_back(std::move(trace));
        remaining -= len;
    }
    return out;
}

double noised_example_loss(const BlockDenoiser& model, const NoisedExample& ex) {
    const Eigen::MatrixXd logp = log_softmax_rows(model.layout_logits(ex.x0, ex.xt, ex.layout));
    const Vocab& vocab = model.vocab();
    double loss = 0.0;
    for (size_t i = 0; i < ex.x0.size(); ++i) {
        if (ex.weight[i] != 0.0) {
            loss -= ex.weight[i] * logp(static_cast<Eigen::Index>(i), vocab.to_output_index(ex.x0[i]));
        }
    }
    return loss;
}

NllEstimate sequence_nll_bound(const BlockDenoiser& model, std::span<const int> x0, const BlockLayout& layout,
                               const NoiseSchedule& schedule, int mc_samples, uint64_t seed,
                               LossEstimator estimator) {
    if (mc_samples < 1) {
        throw InvalidInput("mc_samples must be positive");
    }
    check_prompt(x0, model.vocab());
    layout.validate(static_cast<int>(x0.size()));
    Rng rng(seed);
    double mean = 0.0;
    double m2 = 0.0;
    for (int n = 1; n <= mc_samples; ++n) {
        const auto ex = make_noised_example(x0, layout, estimator, schedule, model.vocab(), rng);
        const double v = noised_example_loss(model, ex);
        const double delta = v - mean;
        mean += delta / n;
        m2 += delta * (v - mean);
    }
    NllEstimate est;
    est.mean = mean;
    est.samples = mc_samples;
    est.stderr_ = mc_samples > 1 ? std::sqrt(m2 / (mc_samples - 1) / mc_samples) : 0.0;
    return est;
}

}  // namespace ctrldiff
