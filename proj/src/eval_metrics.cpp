#include "ctrldiff/eval_metrics.hpp"

#include <cmath>
#include <map>
#include <set>

#include "ctrldiff/errors.hpp"

namespace ctrldiff {

double bpc(double nll_nats_total, long char_count) {
    if (char_count <= 0) {
        throw InvalidInput("bits per character needs a positive character count");
    }
    return nll_nats_total / static_cast<double>(char_count) / std::log(2.0);
}

double perplexity(double nll_nats_total, long token_count) {
    if (token_count <= 0) {
        throw InvalidInput("perplexity needs a positive token count");
    }
    return std::exp(nll_nats_total / static_cast<double>(token_count));
}

double token_entropy(std::span<const int> tokens) {
    if (tokens.empty()) {
        return 0.0;
    }
    std::map<int, int> counts;
    for (int t : tokens) {
        ++counts[t];
    }
    const double n = static_cast<double>(tokens.size());
    double h = 0.0;
    for (auto [tok, c] : counts) {
        const double p = c / n;
        h -= p * std::log(p);
    }
    return std::max(0.0, h);
}

double generative_perplexity(std::span<const TokenSequence> samples, const TokenScorer& scorer, const Vocab& vocab,
                             int window, int stride) {
    if (samples.empty()) {
        throw ConfigurationError("generative perplexity needs at least one sample");
    }
    if (!scorer.trained()) {
        throw ConfigurationError("generative perplexity needs a trained scorer");
    }
    if (window <= 0) {
        window = scorer.context_length();
    }
    if (stride <= 0) {
        stride = std::max(1, window / 2);
    }
    if (stride > window) {
        throw ConfigurationError("stride must not exceed the window");
    }
    double nll = 0.0;
    long count = 0;
    for (const auto& s : samples) {
        validate_tokens(s, vocab);
        for (int t : s) {
            if (vocab.is_mask(t)) {
                throw InvalidInput("samples must not contain mask tokens");
            }
        }
        const int n = static_cast<int>(s.size());
        int scored = 0;  // tokens [0, scored) are done
        for (int start = 0; scored < n; start += stride) {
            const int end = std::min(n, start + window);
            if (end <= scored) {
                continue;
            }
            const auto lp = scorer.token_log_probs(std::span<const int>(s).subspan(static_cast<size_t>(start),
                                                                                   static_cast<size_t>(end - start)));
            for (int i = scored; i < end; ++i) {
                nll -= lp[static_cast<size_t>(i - start)];
            }
            count += end - scored;
            scored = end;
        }
    }
    if (count == 0) {
        throw InvalidInput("samples are empty");
    }
    return std::exp(nll / static_cast<double>(count));
}

double dist_n(std::span<const TokenSequence> samples, int n, std::vector<std::string>* warnings) {
    if (n < 1) {
        throw InvalidInput("n-gram order must be positive");
    }
    std::set<std::vector<int>> distinct;
    long total = 0;
    for (size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        if (static_cast<int>(s.size()) < n) {
            if (warnings) {
                warnings->push_back("sample " + std::to_string(i) + " is shorter than " + std::to_string(n) +
                                    " tokens; skipped");
            }
            continue;
        }
        for (size_t j = 0; j + static_cast<size_t>(n) <= s.size(); ++j) {
            distinct.emplace(s.begin() + static_cast<long>(j), s.begin() + static_cast<long>(j) + n);
            ++total;
        }
    }
    if (total == 0) {
        throw InvalidInput("no sample has " + std::to_string(n) + " tokens");
    }
    return static_cast<double>(distinct.size()) / static_cast<double>(total);
}

double mean_token_entropy(std::span<const TokenSequence> samples) {
    if (samples.empty()) {
        throw InvalidInput("entropy needs at least one sample");
    }
    double total = 0.0;
    for (const auto& s : samples) {
        total += token_entropy(s);
    }
    return total / static_cast<double>(samples.size());
}

double control_accuracy(std::span<const TokenSequence> samples, const SequenceClassifier& classifier, int target) {
    if (samples.empty()) {
        throw ConfigurationError("control accuracy needs at least one sample");
    }
    if (target < 0 || target >= classifier.class_count()) {
        throw InvalidInput("target label outside the classifier's classes");
    }
    int hits = 0;
    for (const auto& s : samples) {
        const auto p = classifier.class_probs(s, {});
        hits += static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()) == target;
    }
    return static_cast<double>(hits) / static_cast<double>(samples.size());
}

nlohmann::json MetricReport::to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"bpc", opt(bpc)},
            {"ppl", opt(ppl)},
            {"gen_ppl", opt(gen_ppl)},
            {"dist1", opt(dist1)},
            {"dist2", opt(dist2)},
            {"dist3", opt(dist3)},
            {"entropy", opt(entropy)},
            {"control_accuracy", opt(control_accuracy)},
            {"tokens_per_second", opt(tokens_per_second)}};
}

BoundEstimate chunked_nll_bound(const BlockDenoiser& model, std::span<const int> tokens, int chunk_len, int max_chunks,
                                const LayoutFn& layout, const NoiseSchedule& schedule, int mc_samples, uint64_t seed) {
    if (chunk_len < 1 || max_chunks < 0) {
        throw ConfigurationError("chunk length must be positive and the chunk limit nonnegative");
    }
    const auto ranges = chunk_ranges(tokens.size(), chunk_len);
    if (ranges.empty()) {
        throw ConfigurationError("text is shorter than one evaluation chunk");
    }
    const size_t n = max_chunks == 0 ? ranges.size() : std::min(ranges.size(), static_cast<size_t>(max_chunks));
    BoundEstimate out;
    double var = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const auto chunk = tokens.subspan(ranges[i].first, ranges[i].second - ranges[i].first);
        const auto est = sequence_nll_bound(model, chunk, layout(chunk), schedule, mc_samples, derive_seed(seed, i));
        out.nats += est.mean;
        var += est.stderr_ * est.stderr_;
        out.tokens += static_cast<long>(chunk.size());
    }
    out.stderr_ = std::sqrt(var);
    return out;
}

}  // namespace ctrldiff
