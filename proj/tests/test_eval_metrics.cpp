#include <doctest.h>

#include <cmath>

#include "ctrldiff/errors.hpp"
#include "ctrldiff/eval_metrics.hpp"
#include "oracles.hpp"

using namespace ctrldiff;

namespace {

// Scores every token with the same log-probability, whatever the context.
class ConstantScorer : public TokenScorer {
public:
    ConstantScorer(double lp, int context, bool trained = true) : lp_(lp), context_(context), trained_(trained) {}
    bool trained() const override { return trained_; }
    int context_length() const override { return context_; }
    std::vector<double> token_log_probs(std::span<const int> tokens) const override {
        ++calls;
        widths.push_back(static_cast<int>(tokens.size()));
        return std::vector<double>(tokens.size(), lp_);
    }
    mutable int calls = 0;
    mutable std::vector<int> widths;

private:
    double lp_;
    int context_;
    bool trained_;
};

}  // namespace

TEST_CASE("bits per character and perplexity") {
    CHECK(std::abs(bpc(1000 * std::log(27.0), 1000) - std::log2(27.0)) < 1e-12);
    CHECK(std::abs(bpc(1000 * std::log(27.0), 1000) - 4.7549) < 1e-4);
    CHECK(bpc(0.0, 10) == 0.0);
    CHECK(std::abs(perplexity(50 * std::log(40.0), 50) - 40.0) < 1e-9);
    CHECK(perplexity(0.0, 5) == 1.0);
    CHECK(std::abs(perplexity(7 * std::log(20.0), 7) - 20.0) < 1e-9);
    CHECK_THROWS_AS(bpc(1.0, 0), InvalidInput);
    CHECK_THROWS_AS(perplexity(1.0, 0), InvalidInput);
    const double nll = 123.4;
    CHECK(std::abs(std::exp(bpc(nll, 99) * std::log(2.0)) - perplexity(nll, 99)) < 1e-9);
}

TEST_CASE("dist-n") {
    const std::vector<TokenSequence> aaa = {{0, 0, 0}};
    CHECK(std::abs(dist_n(aaa, 1) - 1.0 / 3) < 1e-12);
    const std::vector<TokenSequence> distinct = {{0, 1, 2, 3}};
    CHECK(dist_n(distinct, 1) == 1.0);
    const std::vector<TokenSequence> abab = {{0, 1, 0, 1}};
    CHECK(std::abs(dist_n(abab, 2) - 2.0 / 3) < 1e-12);

    std::vector<std::string> warnings;
    const std::vector<TokenSequence> mixed = {{0, 1, 2}, {4}, {2, 1, 0}};
    CHECK(std::abs(dist_n(mixed, 3, &warnings) - 1.0) < 1e-12);
    CHECK(warnings.size() == 1);
    const std::vector<TokenSequence> swapped = {mixed[2], mixed[1], mixed[0]};
    CHECK(dist_n(swapped, 2) == dist_n(mixed, 2));
    CHECK_THROWS_AS(dist_n(std::vector<TokenSequence>{{1}}, 2), InvalidInput);
}

TEST_CASE("token entropy") {
    CHECK(mean_token_entropy(std::vector<TokenSequence>{{1, 1, 1}, {0, 1}}) == doctest::Approx(0.5 * std::log(2.0)));
    CHECK_THROWS_AS(mean_token_entropy({}), InvalidInput);
}

TEST_CASE("generative perplexity windows") {
    const Vocab vocab = Vocab::mask_last(5);
    const ConstantScorer scorer(-std::log(3.0), 8);
    const std::vector<TokenSequence> samples = {TokenSequence(20, 1), TokenSequence(5, 2)};
    CHECK(std::abs(generative_perplexity(samples, scorer, vocab) - 3.0) < 1e-12);
    // 20 tokens, window 8, stride 4: windows start at 0, 4, 8, 12.
    CHECK(scorer.widths == std::vector<int>{8, 8, 8, 8, 5});

    CHECK_THROWS_AS(generative_perplexity({}, scorer, vocab), ConfigurationError);
    const ConstantScorer untrained(-1.0, 8, false);
    CHECK_THROWS_AS(generative_perplexity(samples, untrained, vocab), ConfigurationError);
    const std::vector<TokenSequence> masked = {{1, 4, 1}};
    CHECK_THROWS_AS(generative_perplexity(masked, scorer, vocab), InvalidInput);
}

TEST_CASE("generative perplexity of a scorer's own samples matches its perplexity") {
    const Vocab vocab = Vocab::mask_last(9);
    const oracle::MarkovScorer scorer(vocab, 3, 64);
    Rng rng(4);
    std::vector<TokenSequence> samples, held;
    for (int i = 0; i < 40; ++i) {
        samples.push_back(scorer.sample(200, rng));
        held.push_back(scorer.sample(200, rng));
    }
    double nll = 0.0;
    long count = 0;
    for (const auto& h : held) {
        for (double lp : scorer.token_log_probs(h)) {
            nll -= lp;
            ++count;
        }
    }
    const double valid = perplexity(nll, count);
    const double gen = generative_perplexity(samples, scorer, vocab);
    MESSAGE("validation perplexity " << valid << ", generative perplexity " << gen);
    CHECK(std::abs(gen / valid - 1.0) < 0.1);
}

TEST_CASE("control accuracy and reports") {
    const Vocab vocab = Vocab::mask_last(3);
    std::vector<std::vector<double>> table(9, {0.2, 0.8});
    table[0] = {0.9, 0.1};
    const oracle::TableClassifier clf(vocab, table);
    const std::vector<TokenSequence> samples = {{0, 0}, {0, 1}, {1, 1}, {1, 0}};
    CHECK(control_accuracy(samples, clf, 1) == 0.75);
    CHECK(control_accuracy(samples, clf, 0) == 0.25);
    CHECK_THROWS_AS(control_accuracy({}, clf, 0), ConfigurationError);

    MetricReport r;
    r.dist1 = 0.5;
    const auto j = r.to_json();
    CHECK(j.at("dist1") == 0.5);
    CHECK(j.at("bpc").is_null());
}

TEST_CASE("chunked bound of a uniform denoiser is log V per token") {
    const auto v = Vocab::mask_last(4);
    const oracle::HashedDenoiser uniform(v, 1, 0.0);
    TokenSequence text(100);
    for (size_t i = 0; i < text.size(); ++i) {
        text[i] = static_cast<int>(i % 3);
    }
    const auto fixed4 = [](std::span<const int> c) { return BlockLayout::fixed(static_cast<int>(c.size()), 4); };
    const auto all = chunked_nll_bound(uniform, text, 16, 0, fixed4, NoiseSchedule::log_linear(), 2, 5);
    CHECK(all.tokens == 96);
    CHECK(all.nats == doctest::Approx(96 * std::log(3.0)).epsilon(1e-12));
    CHECK(all.stderr_ == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(all.ppl() == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(chunked_nll_bound(uniform, text, 16, 2, fixed4, NoiseSchedule::log_linear(), 1, 5).tokens == 32);
    CHECK_THROWS_AS(chunked_nll_bound(uniform, text, 200, 0, fixed4, NoiseSchedule::log_linear(), 1, 5),
                    ConfigurationError);
}
