#include "ctrldiff/guidance.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "ctrldiff/errors.hpp"

namespace ctrldiff {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double safe_log(double p) { return p > 0.0 ? std::log(p) : kNegInf; }

long outcome_count(int size_total, int block_len) {
    long n = 1;
    for (int i = 0; i < block_len; ++i) {
        n *= size_total;
        if (n > kMaxEnumeratedOutcomes) {
            throw CapacityError("guided enumeration over " + std::to_string(size_total) + "^" +
                                std::to_string(block_len) + " outcomes exceeds the limit of " +
                                std::to_string(kMaxEnumeratedOutcomes));
        }
    }
    return n;
}

std::vector<int> guided_positions(std::span<const int> positions, std::span<const int> noised_block,
                                  const Vocab& vocab) {
    std::vector<int> out;
    if (positions.empty()) {
        for (size_t i = 0; i < noised_block.size(); ++i) {
            if (vocab.is_mask(noised_block[i])) {
                out.push_back(static_cast<int>(i));
            }
        }
        return out;
    }
    for (int p : positions) {
        if (p < 0 || p >= static_cast<int>(noised_block.size())) {
            throw InvalidInput("guided position outside the block");
        }
        if (vocab.is_mask(noised_block[static_cast<size_t>(p)])) {
            out.push_back(p);
        }
    }
    return out;
}

void check_dists(std::span<const CategoricalDist> dists, std::span<const int> noised_block, const Vocab& vocab) {
    if (dists.size() != noised_block.size()) {
        throw InvalidInput("one distribution per block position is required");
    }
    for (const auto& d : dists) {
        if (d.size() != vocab.size_total) {
            throw InvalidInput("per-position distributions must cover all K categories");
        }
    }
}

void check_label(const SequenceClassifier& classifier, int label) {
    if (label < 0 || label >= classifier.class_count()) {
        throw InvalidInput("target label " + std::to_string(label) + " outside the classifier's classes");
    }
}

}  // namespace

GuidanceApprox guidance_approx_from_name(const std::string& name) {
    if (name == "exact_oracle" || name == "exact") {
        return GuidanceApprox::exact_oracle;
    }
    if (name == "factorized") {
        return GuidanceApprox::factorized;
    }
    if (name == "taylor") {
        return GuidanceApprox::taylor;
    }
    throw ConfigurationError("unknown guidance approximation '" + name + "'");
}

const char* guidance_approx_name(GuidanceApprox a) {
    switch (a) {
        case GuidanceApprox::exact_oracle:
            return "exact_oracle";
        case GuidanceApprox::factorized:
            return "factorized";
        case GuidanceApprox::taylor:
            return "taylor";
    }
    return "factorized";
}

void GuidanceConfig::validate(int class_count) const {
    if (!(gamma >= 0.0) || !std::isfinite(gamma)) {
        throw ConfigurationError("guidance strength must be a nonnegative real");
    }
    if (target_label < 0 || target_label >= class_count) {
        throw ConfigurationError("target label outside the classifier's classes");
    }
}

TokenSequence block_outcome(long index, int block_len, int size_total) {
    TokenSequence out(static_cast<size_t>(block_len));
    for (int i = block_len - 1; i >= 0; --i) {
        out[static_cast<size_t>(i)] = static_cast<int>(index % size_total);
        index /= size_total;
    }
    return out;
}

std::vector<double> joint_from_marginals(std::span<const CategoricalDist> dists) {
    if (dists.empty()) {
        return {1.0};
    }
    const int k = dists[0].size();
    const long n = outcome_count(k, static_cast<int>(dists.size()));
    std::vector<double> joint(static_cast<size_t>(n));
    for (long o = 0; o < n; ++o) {
        const auto x = block_outcome(o, static_cast<int>(dists.size()), k);
        double p = 1.0;
        for (size_t i = 0; i < dists.size(); ++i) {
            p *= dists[i][x[i]];
        }
        joint[static_cast<size_t>(o)] = p;
    }
    return joint;
}

std::vector<CategoricalDist> marginals_of_joint(std::span<const double> joint, int block_len, int size_total) {
    std::vector<std::vector<double>> m(static_cast<size_t>(block_len), std::vector<double>(static_cast<size_t>(size_total), 0.0));
    for (size_t o = 0; o < joint.size(); ++o) {
        const auto x = block_outcome(static_cast<long>(o), block_len, size_total);
        for (int i = 0; i < block_len; ++i) {
            m[static_cast<size_t>(i)][static_cast<size_t>(x[static_cast<size_t>(i)])] += joint[o];
        }
    }
    std::vector<CategoricalDist> out;
    for (auto& row : m) {
        out.push_back(CategoricalDist::from_weights(row));
    }
    return out;
}

std::vector<double> guided_posterior_exact(std::span<const double> joint, const SequenceClassifier& classifier,
                                           double gamma, int label, const Vocab& vocab, int block_len,
                                           std::span<const int> prefix) {
    const long n = outcome_count(vocab.size_total, block_len);
    if (static_cast<long>(joint.size()) != n) {
        throw InvalidInput("joint law has " + std::to_string(joint.size()) + " entries, expected " + std::to_string(n));
    }
    check_label(classifier, label);
    if (!(gamma >= 0.0)) {
        throw DomainError("guidance strength must be nonnegative");
    }
    if (gamma == 0.0) {
        return std::vector<double>(joint.begin(), joint.end());
    }
    std::vector<double> logw(static_cast<size_t>(n), kNegInf);
    for (long o = 0; o < n; ++o) {
        if (joint[static_cast<size_t>(o)] <= 0.0) {
            continue;
        }
        const auto x = block_outcome(o, block_len, vocab.size_total);
        const double py = classifier.class_probs(x, prefix)[static_cast<size_t>(label)];
        logw[static_cast<size_t>(o)] = std::log(joint[static_cast<size_t>(o)]) + gamma * safe_log(py);
    }
    return CategoricalDist::from_log_weights(logw).probs();
}

std::vector<CategoricalDist> guided_posterior_factorized(std::span<const CategoricalDist> dists,
                                                         const SequenceClassifier& classifier, double gamma, int label,
                                                         std::span<const int> noised_block, std::span<const int> prefix,
                                                         std::span<const int> positions) {
    const Vocab& vocab = classifier.vocab();
    check_dists(dists, noised_block, vocab);
    check_label(classifier, label);
    std::vector<CategoricalDist> out(dists.begin(), dists.end());
    if (gamma == 0.0) {
        return out;
    }
    std::vector<TokenSequence> candidates;
    std::vector<int> values;
    for (int pos : guided_positions(positions, noised_block, vocab)) {
        const auto& d = dists[static_cast<size_t>(pos)];
        candidates.clear();
        values.clear();
        for (int v = 0; v < vocab.size_total; ++v) {
            if (d[v] > 0.0) {
                TokenSequence x(noised_block.begin(), noised_block.end());
                x[static_cast<size_t>(pos)] = v;
                candidates.push_back(std::move(x));
                values.push_back(v);
            }
        }
        const auto probs = classifier.class_probs_many(candidates, prefix);
        std::vector<double> logw(static_cast<size_t>(vocab.size_total), kNegInf);
        for (size_t c = 0; c < values.size(); ++c) {
            const int v = values[c];
            logw[static_cast<size_t>(v)] = std::log(d[v]) + gamma * safe_log(probs[c][static_cast<size_t>(label)]);
        }
        out[static_cast<size_t>(pos)] = CategoricalDist::from_log_weights(logw);
    }
    return out;
}

Eigen::MatrixXd one_hot_rows(std::span<const int> tokens, int size_total) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(tokens.size()), size_total);
    for (size_t i = 0; i < tokens.size(); ++i) {
        m(static_cast<Eigen::Index>(i), tokens[i]) = 1.0;
    }
    return m;
}

std::vector<CategoricalDist> guided_posterior_taylor(std::span<const CategoricalDist> dists,
                                                     const SequenceClassifier& classifier, double gamma, int label,
                                                     std::span<const int> noised_block, std::span<const int> prefix,
                                                     std::span<const int> positions) {
    const Vocab& vocab = classifier.vocab();
    check_dists(dists, noised_block, vocab);
    check_label(classifier, label);
    std::vector<CategoricalDist> out(dists.begin(), dists.end());
    if (gamma == 0.0) {
        return out;
    }
    if (!classifier.differentiable()) {
        throw ConfigurationError("taylor guidance needs a classifier with input gradients");
    }
    Eigen::MatrixXd grad;
    classifier.relaxed_log_prob(one_hot_rows(noised_block, vocab.size_total), prefix, label, &grad);
    for (int pos : guided_positions(positions, noised_block, vocab)) {
        const auto& d = dists[static_cast<size_t>(pos)];
        const double base = grad(pos, noised_block[static_cast<size_t>(pos)]);
        std::vector<double> logw(static_cast<size_t>(vocab.size_total), kNegInf);
        for (int v = 0; v < vocab.size_total; ++v) {
            if (d[v] > 0.0) {
                logw[static_cast<size_t>(v)] = std::log(d[v]) + gamma * (grad(pos, v) - base);
            }
        }
        out[static_cast<size_t>(pos)] = CategoricalDist::from_log_weights(logw);
    }
    return out;
}

ClassifierGuide::ClassifierGuide(const SequenceClassifier& classifier, GuidanceConfig cfg)
    : classifier_(classifier), cfg_(cfg) {
    cfg_.validate(classifier.class_count());
}

void ClassifierGuide::apply(std::vector<CategoricalDist>& dists, std::span<const int> positions,
                            std::span<const int> noised_block, std::span<const int> prefix) const {
    if (cfg_.gamma == 0.0 || positions.empty()) {
        return;
    }
    const auto keep = static_cast<size_t>(std::max(0, classifier_.context_length() - static_cast<int>(noised_block.size())));
    if (prefix.size() > keep) {
        prefix = prefix.last(keep);
    }
    switch (cfg_.approx) {
        case GuidanceApprox::factorized:
            dists = guided_posterior_factorized(dists, classifier_, cfg_.gamma, cfg_.target_label, noised_block, prefix,
                                                positions);
            return;
        case GuidanceApprox::taylor:
            dists = guided_posterior_taylor(dists, classifier_, cfg_.gamma, cfg_.target_label, noised_block, prefix,
                                            positions);
            return;
        case GuidanceApprox::exact_oracle:
            break;
    }
    const int k = classifier_.vocab().size_total;
    const int m = static_cast<int>(positions.size());
    const long n = outcome_count(k, m);
    std::vector<double> logw(static_cast<size_t>(n), kNegInf);
    TokenSequence x(noised_block.begin(), noised_block.end());
    for (long o = 0; o < n; ++o) {
        const auto sub = block_outcome(o, m, k);
        double lp = 0.0;
        for (int i = 0; i < m; ++i) {
            const int pos = positions[static_cast<size_t>(i)];
            lp += safe_log(dists[static_cast<size_t>(pos)][sub[static_cast<size_t>(i)]]);
            x[static_cast<size_t>(pos)] = sub[static_cast<size_t>(i)];
        }
        if (lp == kNegInf) {
            continue;
        }
        logw[static_cast<size_t>(o)] =
            lp + cfg_.gamma * safe_log(classifier_.class_probs(x, prefix)[static_cast<size_t>(cfg_.target_label)]);
    }
    const auto marg = marginals_of_joint(CategoricalDist::from_log_weights(logw).probs(), m, k);
    for (int i = 0; i < m; ++i) {
        dists[static_cast<size_t>(positions[static_cast<size_t>(i)])] = marg[static_cast<size_t>(i)];
    }
}

// ---------------------------------------------------------------------------
// Neural classifier

void ClassifierConfig::validate() const {
    if (layers < 1 || heads < 1 || hidden_dim < 1 || context_length < 1 || batch_size < 1) {
        throw ConfigurationError("classifier dimensions must be positive");
    }
    if (hidden_dim % heads != 0) {
        throw ConfigurationError("hidden_dim must be divisible by heads");
    }
    if (class_count < 2) {
        throw ConfigurationError("a classifier needs at least two classes");
    }
    if (!(learn_rate > 0.0) || warmup_steps < 0 || min_crop < 1) {
        throw ConfigurationError("invalid classifier optimizer settings");
    }
}

nn::TransformerConfig ClassifierConfig::transformer(const Vocab& vocab) const {
    nn::TransformerConfig t;
    t.layers = layers;
    t.hidden = hidden_dim;
    t.heads = heads;
    t.vocab_in = vocab.size_total;
    t.out_dim = class_count;
    t.validate();
    return t;
}

nlohmann::json ClassifierConfig::to_json() const {
    return {{"layers", layers},           {"heads", heads},
            {"hidden_dim", hidden_dim},   {"context_length", context_length},
            {"class_count", class_count}, {"learn_rate", learn_rate},
            {"warmup_steps", warmup_steps}, {"batch_size", batch_size},
            {"weight_decay", weight_decay}, {"clip_norm", clip_norm},
            {"min_crop", min_crop}};
}

ClassifierConfig ClassifierConfig::from_json(const nlohmann::json& j) {
    ClassifierConfig c;
    c.layers = j.at("layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.context_length = j.at("context_length").get<int>();
    c.class_count = j.at("class_count").get<int>();
    c.learn_rate = j.at("learn_rate").get<double>();
    c.warmup_steps = j.at("warmup_steps").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.clip_norm = j.at("clip_norm").get<double>();
    c.min_crop = j.at("min_crop").get<int>();
    c.validate();
    return c;
}

template <class T>
TransformerClassifier<T>::TransformerClassifier(const ClassifierConfig& cfg, const Vocab& vocab, uint64_t seed)
    : TransformerClassifier(cfg, vocab, nn::Transformer<T>::initialized(cfg.transformer(vocab), seed), 0) {}

template <class T>
TransformerClassifier<T>::TransformerClassifier(const ClassifierConfig& cfg, const Vocab& vocab, nn::Transformer<T> net,
                                                long trained_steps)
    : cfg_(cfg), vocab_(vocab), net_(std::move(net)), trained_steps_(trained_steps) {
    cfg_.validate();
}

template <class T>
void TransformerClassifier<T>::check_fits(size_t rows) const {
    if (rows == 0) {
        throw InvalidInput("classifier input is empty");
    }
    if (rows > static_cast<size_t>(cfg_.context_length)) {
        throw CapacityError("classifier input of " + std::to_string(rows) + " tokens exceeds context length " +
                            std::to_string(cfg_.context_length));
    }
}

namespace {

// Packs each sequence as its own fully connected segment.
template <class T>
nn::PackedInput<T> pack_full(std::span<const TokenSequence> seqs) {
    nn::PackedInput<T> in;
    for (const auto& s : seqs) {
        const int offset = in.rows();
        const int n = static_cast<int>(s.size());
        in.tokens.insert(in.tokens.end(), s.begin(), s.end());
        for (int i = 0; i < n; ++i) {
            in.positions.push_back(i);
        }
        in.segments.push_back(nn::Segment{offset, n, nn::AttentionMask::full(n)});
    }
    return in;
}

template <class T>
nn::Mat<T> mean_pool(const nn::Mat<T>& hidden, const std::vector<nn::Segment>& segments) {
    nn::Mat<T> pooled(static_cast<Eigen::Index>(segments.size()), hidden.cols());
    for (size_t s = 0; s < segments.size(); ++s) {
        pooled.row(static_cast<Eigen::Index>(s)) =
            hidden.middleRows(segments[s].offset, segments[s].length).colwise().mean();
    }
    return pooled;
}

template <class T>
nn::Mat<T> unpool(const nn::Mat<T>& d_pooled, const std::vector<nn::Segment>& segments, Eigen::Index rows) {
    nn::Mat<T> d_hidden(rows, d_pooled.cols());
    for (size_t s = 0; s < segments.size(); ++s) {
        const T scale = T(1) / static_cast<T>(segments[s].length);
        for (int i = 0; i < segments[s].length; ++i) {
            d_hidden.row(segments[s].offset + i) = d_pooled.row(static_cast<Eigen::Index>(s)) * scale;
        }
    }
    return d_hidden;
}

std::vector<double> softmax_row(const Eigen::RowVectorXd& logits) {
    std::vector<double> l(logits.data(), logits.data() + logits.size());
    return softmax(l);
}

}  // namespace

template <class T>
std::vector<double> TransformerClassifier<T>::class_probs(std::span<const int> block, std::span<const int> prefix) const {
    TokenSequence seq(prefix.begin(), prefix.end());
    seq.insert(seq.end(), block.begin(), block.end());
    return class_probs_many(std::span(&seq, 1), {})[0];
}

template <class T>
std::vector<std::vector<double>> TransformerClassifier<T>::class_probs_many(std::span<const TokenSequence> blocks,
                                                                            std::span<const int> prefix) const {
    std::vector<TokenSequence> seqs;
    seqs.reserve(blocks.size());
    for (const auto& b : blocks) {
        TokenSequence s(prefix.begin(), prefix.end());
        s.insert(s.end(), b.begin(), b.end());
        check_fits(s.size());
        validate_tokens(s, vocab_);
        seqs.push_back(std::move(s));
    }
    if (seqs.empty()) {
        return {};
    }
    const auto in = pack_full<T>(seqs);
    const nn::Mat<T> logits = net_.head(mean_pool(net_.forward(in, nullptr), in.segments));
    std::vector<std::vector<double>> out;
    out.reserve(seqs.size());
    for (Eigen::Index s = 0; s < logits.rows(); ++s) {
        out.push_back(softmax_row(logits.row(s).template cast<double>()));
    }
    return out;
}

template <class T>
double TransformerClassifier<T>::relaxed_log_prob(const Eigen::MatrixXd& relaxed_block, std::span<const int> prefix,
                                                  int label, Eigen::MatrixXd* grad) const {
    const auto p = static_cast<Eigen::Index>(prefix.size());
    const Eigen::Index b = relaxed_block.rows();
    check_fits(static_cast<size_t>(p + b));
    if (relaxed_block.cols() != vocab_.size_total) {
        throw InvalidInput("relaxed block rows must have K entries");
    }
    if (label < 0 || label >= cfg_.class_count) {
        throw InvalidInput("label outside the classifier's classes");
    }
    validate_tokens(prefix, vocab_);
    nn::PackedInput<T> in;
    in.soft = nn::Mat<T>::Zero(p + b, vocab_.size_total);
    for (Eigen::Index i = 0; i < p; ++i) {
        in.soft(i, prefix[static_cast<size_t>(i)]) = T(1);
    }
    in.soft.bottomRows(b) = relaxed_block.cast<T>();
    in.positions.resize(static_cast<size_t>(p + b));
    std::iota(in.positions.begin(), in.positions.end(), 0);
    in.segments = {nn::Segment{0, static_cast<int>(p + b), nn::AttentionMask::full(static_cast<int>(p + b))}};

    nn::ForwardCache<T> cache;
    const nn::Mat<T> hidden = net_.forward(in, grad ? &cache : nullptr);
    const nn::Mat<T> pooled = mean_pool(hidden, in.segments);
    const Eigen::RowVectorXd logits = net_.head(pooled).row(0).template cast<double>();
    const auto probs = softmax_row(logits);
    const double lp = std::log(probs[static_cast<size_t>(label)]);
    if (grad) {
        nn::Mat<T> d_logits(1, cfg_.class_count);
        for (int c = 0; c < cfg_.class_count; ++c) {
            d_logits(0, c) = static_cast<T>((c == label ? 1.0 : 0.0) - probs[static_cast<size_t>(c)]);
        }
        auto scratch = net_.zeros_like();
        const nn::Mat<T> d_pooled = net_.head_backward(pooled, d_logits, scratch);
        nn::Mat<T> d_soft;
        net_.backward(in, cache, unpool(d_pooled, in.segments, hidden.rows()), scratch, &d_soft);
        *grad = d_soft.bottomRows(b).template cast<double>();
    }
    return lp;
}

template <class T>
double TransformerClassifier<T>::loss(std::span<const TokenSequence> sequences, std::span<const int> labels,
                                      nn::Transformer<T>* grad) const {
    if (sequences.size() != labels.size() || sequences.empty()) {
        throw InvalidInput("classifier loss needs one label per sequence");
    }
    for (const auto& s : sequences) {
        check_fits(s.size());
    }
    const auto in = pack_full<T>(sequences);
    nn::ForwardCache<T> cache;
    const nn::Mat<T> hidden = net_.forward(in, grad ? &cache : nullptr);
    const nn::Mat<T> pooled = mean_pool(hidden, in.segments);
    const nn::Mat<T> logits = net_.head(pooled);
    const double norm = 1.0 / static_cast<double>(sequences.size());
    double total = 0.0;
    nn::Mat<T> d_logits(logits.rows(), logits.cols());
    for (Eigen::Index s = 0; s < logits.rows(); ++s) {
        const auto probs = softmax_row(logits.row(s).template cast<double>());
        const int y = labels[static_cast<size_t>(s)];
        if (y < 0 || y >= cfg_.class_count) {
            throw InvalidInput("label outside the classifier's classes");
        }
        total -= std::log(probs[static_cast<size_t>(y)]);
        for (int c = 0; c < cfg_.class_count; ++c) {
            d_logits(s, c) = static_cast<T>((probs[static_cast<size_t>(c)] - (c == y ? 1.0 : 0.0)) * norm);
        }
    }
    if (grad) {
        const nn::Mat<T> d_pooled = net_.head_backward(pooled, d_logits, *grad);
        net_.backward(in, cache, unpool(d_pooled, in.segments, hidden.rows()), *grad, nullptr);
    }
    return total * norm;
}

template class TransformerClassifier<float>;
template class TransformerClassifier<double>;

Checkpoint classifier_checkpoint(const NeuralClassifier& c) {
    Checkpoint ckpt;
    ckpt.kind = "classifier";
    ckpt.config = {{"classifier", c.config().to_json()},
                   {"vocab_size", c.vocab().size_total},
                   {"mask_id", c.vocab().mask_id},
                   {"trained_steps", c.trained_steps()}};
    store_transformer(ckpt, "", c.net());
    return ckpt;
}

NeuralClassifier classifier_from_checkpoint(const Checkpoint& ckpt) {
    try {
        const auto cfg = ClassifierConfig::from_json(ckpt.config.at("classifier"));
        const Vocab vocab(ckpt.config.at("vocab_size").get<int>(), ckpt.config.at("mask_id").get<int>());
        nn::Transformer<float> net(cfg.transformer(vocab));
        restore_transformer(ckpt, "", net);
        return NeuralClassifier(cfg, vocab, std::move(net), ckpt.config.at("trained_steps").get<long>());
    } catch (const nlohmann::json::exception& e) {
        throw IngestionError("malformed classifier checkpoint config: " + std::string(e.what()));
    }
}

void save_classifier(const std::filesystem::path& dir, const NeuralClassifier& c) {
    save_checkpoint(dir, classifier_checkpoint(c));
}

NeuralClassifier load_classifier(const std::filesystem::path& dir) {
    return classifier_from_checkpoint(load_checkpoint(dir, "classifier"));
}

ClassifierTrainResult train_classifier(const ClassifierConfig& cfg, const Tokenizer& tok,
                                       const std::vector<LabeledExample>& corpus, const NoiseSchedule& schedule,
                                       int steps, uint64_t seed, const std::function<void(int, double)>& on_step) {
    cfg.validate();
    if (steps < 0) {
        throw ConfigurationError("steps must be nonnegative");
    }
    if (corpus.empty() && steps > 0) {
        throw IngestionError("labeled corpus is empty");
    }
    const Vocab vocab = tok.vocab();
    std::vector<TokenSequence> docs;
    std::vector<int> labels;
    for (const auto& ex : corpus) {
        if (ex.label < 0 || ex.label >= cfg.class_count) {
            throw InvalidInput("label " + std::to_string(ex.label) + " outside the configured classes");
        }
        docs.push_back(tok.encode(ex.text));
        labels.push_back(ex.label);
    }
    ClassifierTrainResult result{NeuralClassifier(cfg, vocab, derive_seed(seed, 1)), {}};
    nn::AdamW<float>::Options opt;
    opt.learn_rate = cfg.learn_rate;
    opt.warmup_steps = cfg.warmup_steps;
    opt.weight_decay = cfg.weight_decay;
    opt.clip_norm = cfg.clip_norm;
    opt.decay_steps = steps;
    nn::AdamW<float> adam(result.model.net(), opt);
    Rng rng(derive_seed(seed, 2));
    std::vector<TokenSequence> batch;
    std::vector<int> batch_labels;
    for (int step = 1; step <= steps; ++step) {
        batch.clear();
        batch_labels.clear();
        for (int i = 0; i < cfg.batch_size; ++i) {
            const size_t d = rng.below(docs.size());
            const auto& doc = docs[d];
            const int avail = std::min<int>(static_cast<int>(doc.size()), cfg.context_length);
            const int lo = std::min(cfg.min_crop, avail);
            const int len = lo + static_cast<int>(rng.below(static_cast<size_t>(avail - lo + 1)));
            const size_t start = rng.below(doc.size() - static_cast<size_t>(len) + 1);
            const std::span<const int> crop(doc.data() + start, static_cast<size_t>(len));
            const double t = rng.uniform();
            batch.push_back(forward_sample(crop, t, schedule, vocab, rng.next_u64()));
            batch_labels.push_back(labels[d]);
        }
        auto grad = result.model.net().zeros_like();
        const double loss = result.model.loss(batch, batch_labels, &grad);
        if (!std::isfinite(loss)) {
            throw TrainingError("non-finite classifier loss at step " + std::to_string(step));
        }
        adam.step(result.model.net(), grad);
        result.model.set_trained_steps(step);
        result.loss_trace.push_back(loss);
        if (on_step) {
            on_step(step, loss);
        }
    }
    return result;
}

double classifier_accuracy(const SequenceClassifier& c, const Tokenizer& tok, const std::vector<LabeledExample>& docs,
                           const NoiseSchedule& schedule, double t, uint64_t seed) {
    if (docs.empty()) {
        throw InvalidInput("no documents to score");
    }
    const auto* neural = dynamic_cast<const NeuralClassifier*>(&c);
    const size_t limit = neural ? static_cast<size_t>(neural->config().context_length) : SIZE_MAX;
    int correct = 0;
    for (size_t i = 0; i < docs.size(); ++i) {
        auto x = tok.encode(docs[i].text);
        if (x.size() > limit) {
            x.resize(limit);
        }
        if (t > 0.0) {
            x = forward_sample(x, t, schedule, tok.vocab(), derive_seed(seed, i));
        }
        const auto p = c.class_probs(x, {});
        const auto best = std::max_element(p.begin(), p.end()) - p.begin();
        correct += static_cast<int>(best) == docs[i].label;
    }
    return static_cast<double>(correct) / static_cast<double>(docs.size());
}

}  // namespace ctrldiff
