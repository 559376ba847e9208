#include <doctest.h>

#include <cmath>

#include "ctrldiff/blockgen.hpp"
#include "ctrldiff/errors.hpp"
#include "oracles.hpp"

using namespace ctrldiff;

namespace {

const Vocab kVocab = Vocab::mask_last(4);  // three tokens plus the mask

std::vector<double> draw_frequencies(std::vector<double> logits, int n, uint64_t seed) {
    Rng rng(seed);
    std::vector<double> freq(logits.size(), 0.0);
    for (int i = 0; i < n; ++i) {
        freq[static_cast<size_t>(gumbel_argmax(logits, rng))] += 1.0 / n;
    }
    return freq;
}

class CountingDenoiser : public BlockDenoiser {
public:
    explicit CountingDenoiser(const BlockDenoiser& inner) : inner_(inner) {}
    const Vocab& vocab() const override { return inner_.vocab(); }
    int context_length() const override { return inner_.context_length(); }
    Eigen::MatrixXd x0_logits(std::span<const int> block, std::span<const int> prefix) const override {
        ++calls;
        prefixes.emplace_back(prefix.begin(), prefix.end());
        return inner_.x0_logits(block, prefix);
    }
    mutable int calls = 0;
    mutable std::vector<TokenSequence> prefixes;

private:
    const BlockDenoiser& inner_;
};

class CyclingChooser : public BlockLengthChooser {
public:
    explicit CyclingChooser(std::vector<int> lengths) : lengths_(std::move(lengths)) {}
    int next_block_length(const GenerationState& state, Rng&) override {
        seen_starts.push_back(static_cast<int>(state.block_starts.size()));
        return lengths_[static_cast<size_t>(next_++) % lengths_.size()];
    }
    std::vector<int> seen_starts;

private:
    std::vector<int> lengths_;
    int next_ = 0;
};

}  // namespace

TEST_CASE("gumbel_argmax examples") {
    Rng rng(1);
    const std::vector<double> single = {0.3};
    CHECK(gumbel_argmax(single, rng) == 0);
    const std::vector<double> excluded = {-INFINITY, 0.0, -INFINITY};
    for (int i = 0; i < 100; ++i) {
        CHECK(gumbel_argmax(excluded, rng) == 1);
    }

    const auto even = draw_frequencies({0.0, 0.0}, 1000000, 2);
    CHECK(std::abs(even[0] - 0.5) < 0.002);
    const auto skew = draw_frequencies({std::log(1.0), std::log(3.0)}, 1000000, 3);
    CHECK(std::abs(skew[0] - 0.25) < 0.002);
    CHECK(std::abs(skew[1] - 0.75) < 0.002);

    const std::vector<double> bad = {0.0, NAN};
    CHECK_THROWS_AS(gumbel_argmax(bad, rng), InvalidInput);
}

TEST_CASE("gumbel_argmax passes a chi-square test on four categories") {
    const std::vector<double> logits = {0.5, -1.0, 2.0, 0.0};
    const int n = 200000;
    const auto freq = draw_frequencies(logits, n, 4);
    const auto p = softmax(logits);
    double chi2 = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        const double expected = p[i] * n;
        chi2 += std::pow(freq[i] * n - expected, 2) / expected;
    }
    CHECK(oracle::chi_square3_sf(chi2) > 0.001);
}

TEST_CASE("chi-square survival function matches tabulated values") {
    CHECK(oracle::chi_square3_sf(7.814727903) == doctest::Approx(0.05).epsilon(1e-6));
    CHECK(oracle::chi_square3_sf(16.26623619) == doctest::Approx(0.001).epsilon(1e-5));
}

TEST_CASE("first_hitting_times examples") {
    const std::vector<double> keep = {1.0};
    CHECK(first_hitting_times(1.0, keep) == std::vector<double>{1.0});
    const std::vector<double> half = {0.5};
    CHECK(first_hitting_times(1.0, half)[0] == doctest::Approx(0.5));
    const std::vector<double> two = {0.25, 0.5};
    const auto t = first_hitting_times(0.8, two);
    REQUIRE(t.size() == 2);
    CHECK(t[0] == doctest::Approx(0.4));
    CHECK(t[1] == doctest::Approx(0.2));
    CHECK_THROWS_AS(first_hitting_times(0.0, half), DomainError);
}

TEST_CASE("first_hitting_times are strictly decreasing within (0, t_start]") {
    Rng rng(5);
    for (int trial = 0; trial < 1000; ++trial) {
        const double start = 0.1 + 0.9 * rng.uniform();
        const int n = 1 + static_cast<int>(rng.below(16));
        const auto t = first_hitting_times(start, n, rng);
        REQUIRE(static_cast<int>(t.size()) == n);
        CHECK(t[0] <= start);
        CHECK(t.back() > 0.0);
        for (size_t i = 1; i < t.size(); ++i) {
            CHECK(t[i] < t[i - 1]);
        }
    }
}

TEST_CASE("first-hitting event times follow the order statistics of uniforms") {
    // With t_start = 1 the k-th event time is the k-th largest of n uniforms,
    // whose mean is (n + 1 - k) / (n + 1).
    Rng rng(6);
    const int n = 4;
    const int reps = 40000;
    std::vector<double> mean(n, 0.0);
    for (int r = 0; r < reps; ++r) {
        const auto t = first_hitting_times(1.0, n, rng);
        for (int k = 0; k < n; ++k) {
            mean[static_cast<size_t>(k)] += t[static_cast<size_t>(k)] / reps;
        }
    }
    for (int k = 0; k < n; ++k) {
        CHECK(mean[static_cast<size_t>(k)] == doctest::Approx(static_cast<double>(n - k) / (n + 1)).epsilon(0.01));
    }
}

TEST_CASE("nucleus filter keeps the smallest covering set") {
    const std::vector<double> logits = {std::log(0.5), std::log(0.3), std::log(0.15), std::log(0.05)};
    const auto f = nucleus_filter(logits, 0.79);
    CHECK(f[0] == logits[0]);
    CHECK(f[1] == logits[1]);
    CHECK(std::isinf(f[2]));
    CHECK(std::isinf(f[3]));
    const auto g = nucleus_filter(logits, 0.81);
    CHECK(g[2] == logits[2]);
    CHECK(nucleus_filter(logits, 1.0) == logits);
    const auto top = nucleus_filter(logits, 0.01);
    CHECK(top[0] == logits[0]);
    CHECK(std::isinf(top[1]));
}

TEST_CASE("single-token block makes one denoiser call and samples its softmax") {
    const oracle::HashedDenoiser inner(kVocab, 9);
    CountingDenoiser model(inner);
    SamplerConfig cfg;
    cfg.nucleus_p = 1.0;
    Rng rng(7);
    BlockTrace trace;
    const auto block = generate_block(model, {}, 1, NoiseSchedule::log_linear(), cfg, rng, nullptr, &trace);
    CHECK(model.calls == 1);
    CHECK(trace.denoiser_calls == 1);
    CHECK(block.size() == 1);
    CHECK_FALSE(kVocab.is_mask(block[0]));

    const auto law = oracle::empirical_block_law(inner, 1, cfg, 50000, 8);
    const TokenSequence one{kVocab.mask_id};
    const auto logits = inner.x0_logits(one, {});
    const std::vector<double> row = {logits(0, 0), logits(0, 1), logits(0, 2)};
    CHECK(total_variation(law, softmax(row)) < 0.01);
}

TEST_CASE("first-hitting and ancestral samplers match the enumerated law") {
    const oracle::HashedDenoiser model(kVocab, 10);
    const auto exact = oracle::first_hitting_law(model, 2);
    double total = 0.0;
    for (double p : exact) {
        total += p;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));

    SamplerConfig fh;
    fh.nucleus_p = 1.0;
    SamplerConfig anc = fh;
    anc.mode = SamplerMode::ancestral;
    anc.steps_per_block = 500;
    const int n = 30000;
    CHECK(total_variation(oracle::empirical_block_law(model, 2, fh, n, 11), exact) < 0.02);
    CHECK(total_variation(oracle::empirical_block_law(model, 2, anc, n, 12), exact) < 0.02);
}

TEST_CASE("coarse ancestral grids unmask several positions per step") {
    const oracle::HashedDenoiser inner(kVocab, 13);
    CountingDenoiser model(inner);
    SamplerConfig cfg;
    cfg.mode = SamplerMode::ancestral;
    cfg.steps_per_block = 1;
    Rng rng(1);
    const auto block = generate_block(model, {}, 8, NoiseSchedule::log_linear(), cfg, rng);
    CHECK(model.calls == 1);
    for (int t : block) {
        CHECK_FALSE(kVocab.is_mask(t));
    }
}

TEST_CASE("generate_sequence with a fixed layout") {
    const oracle::HashedDenoiser inner(kVocab, 14);
    CountingDenoiser model(inner);
    SamplerConfig cfg;
    cfg.rng_seed = 3;
    const TokenSequence prompt = {0, 1, 2};
    const auto out = generate_sequence(model, prompt, BlockLayout::fixed(8, 4), NoiseSchedule::log_linear(), cfg);
    CHECK(out.layout.lengths == std::vector<int>{4, 4});
    CHECK(out.tokens.size() == 11);
    CHECK(std::equal(prompt.begin(), prompt.end(), out.tokens.begin()));
    for (int t : out.tokens) {
        CHECK_FALSE(kVocab.is_mask(t));
    }
    // Blocks are conditioned on the full prefix, and earlier blocks are never rewritten.
    for (const auto& p : model.prefixes) {
        CHECK(std::equal(p.begin(), p.end(), out.tokens.begin()));
    }
    const auto again = generate_sequence(inner, prompt, BlockLayout::fixed(8, 4), NoiseSchedule::log_linear(), cfg);
    CHECK(again.tokens == out.tokens);
    cfg.rng_seed = 4;
    const auto other = generate_sequence(inner, prompt, BlockLayout::fixed(8, 4), NoiseSchedule::log_linear(), cfg);
    CHECK(other.tokens != out.tokens);

    const TokenSequence masked_prompt = {0, kVocab.mask_id};
    CHECK_THROWS_AS(generate_sequence(inner, masked_prompt, BlockLayout::fixed(4, 4), NoiseSchedule::log_linear(), cfg),
                    InvalidInput);
}

TEST_CASE("generate_sequence with a chooser truncates the last block") {
    const oracle::HashedDenoiser model(kVocab, 15);
    CyclingChooser chooser({4, 8});
    SamplerConfig cfg;
    const auto out = generate_sequence(model, TokenSequence{1}, 15, chooser, NoiseSchedule::log_linear(), cfg);
    CHECK(out.layout.lengths == std::vector<int>{4, 8, 3});
    CHECK(out.tokens.size() == 16);
    CHECK(chooser.seen_starts == std::vector<int>{0, 1, 2});
}

TEST_CASE("capacity errors propagate from the denoiser") {
    DenoiserConfig dc;
    dc.layers = 1;
    dc.hidden_dim = 8;
    dc.heads = 2;
    dc.context_length = 6;
    const Denoiser model(dc, kVocab, 1);
    SamplerConfig cfg;
    CHECK_THROWS_AS(generate_sequence(model, TokenSequence{0, 1, 2}, BlockLayout::fixed(8, 8),
                                      NoiseSchedule::log_linear(), cfg),
                    CapacityError);
    Rng rng(1);
    const TokenSequence prefix = {0, 1, 2};
    CHECK_THROWS_AS(generate_block(model, prefix, 4, NoiseSchedule::log_linear(), cfg, rng), CapacityError);
}

TEST_CASE("NLL bound is tight in expectation for an exact denoiser") {
    // Two-token joint over three tokens.
    const std::vector<double> joint = {0.20, 0.05, 0.05, 0.10, 0.25, 0.05, 0.02, 0.08, 0.20};
    const oracle::JointDenoiser model(kVocab, 2, joint);
    const auto schedule = NoiseSchedule::log_linear();
    const BlockLayout single{{2}};
    for (int o = 0; o < 9; ++o) {
        const auto x = oracle::outcome_tokens(o, 2, kVocab);
        const double nll = -std::log(joint[static_cast<size_t>(o)]);
        // Enumerated expectation of the masked-count estimator: subset S of
        // the block has probability 1 / (2 * C(2, |S|)) and weight 2 / |S|.
        double expected = 0.0;
        for (int subset = 1; subset < 4; ++subset) {
            NoisedExample ex{x, x, single, {0.0, 0.0}};
            const int k = (subset & 1) + ((subset >> 1) & 1);
            for (int i = 0; i < 2; ++i) {
                if ((subset >> i) & 1) {
                    ex.xt[static_cast<size_t>(i)] = kVocab.mask_id;
                    ex.weight[static_cast<size_t>(i)] = 2.0 / k;
                }
            }
            expected += noised_example_loss(model, ex) / (2.0 * (k == 1 ? 2.0 : 1.0));
        }
        CHECK(expected == doctest::Approx(nll).epsilon(1e-12));

        const auto est = sequence_nll_bound(model, x, single, schedule, 10000, 17);
        CHECK(std::abs(est.mean - nll) < 0.05);
        CHECK(est.mean >= nll - 4 * est.stderr_);
    }
}

TEST_CASE("NLL bound is reproducible and its standard error scales with samples") {
    const oracle::HashedDenoiser model(kVocab, 18);
    const TokenSequence x = {0, 2, 1, 1, 0, 2, 2, 0};
    const BlockLayout layout = BlockLayout::fixed(8, 4);
    const auto schedule = NoiseSchedule::log_linear();
    const auto a = sequence_nll_bound(model, x, layout, schedule, 4000, 19);
    const auto b = sequence_nll_bound(model, x, layout, schedule, 4000, 19);
    CHECK(a.mean == b.mean);
    CHECK(a.stderr_ == b.stderr_);
    const auto c = sequence_nll_bound(model, x, layout, schedule, 8000, 20);
    const double ratio = c.stderr_ / a.stderr_;
    CHECK(ratio > 0.6);
    CHECK(ratio < 0.82);
}

TEST_CASE("generation past the context conditions on the most recent tokens") {
    class ShortContext : public BlockDenoiser {
    public:
        explicit ShortContext(const BlockDenoiser& inner) : inner_(inner) {}
        const Vocab& vocab() const override { return inner_.vocab(); }
        int context_length() const override { return 10; }
        Eigen::MatrixXd x0_logits(std::span<const int> block, std::span<const int> prefix) const override {
            if (block.size() + prefix.size() > 10) {
                throw CapacityError("over context");
            }
            last_prefix.assign(prefix.begin(), prefix.end());
            return inner_.x0_logits(block, prefix);
        }
        mutable TokenSequence last_prefix;

    private:
        const BlockDenoiser& inner_;
    };
    const oracle::HashedDenoiser inner(kVocab, 17);
    const ShortContext model(inner);
    const TokenSequence prompt = {0, 1, 2};
    const auto r = generate_sequence(model, prompt, BlockLayout::fixed(30, 4), NoiseSchedule::log_linear(), SamplerConfig{});
    REQUIRE(r.tokens.size() == 33);
    // The last block (2 tokens) saw the 8 tokens before it.
    CHECK(model.last_prefix == TokenSequence(r.tokens.end() - 10, r.tokens.end() - 2));
}
