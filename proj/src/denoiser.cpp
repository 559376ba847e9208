#include "ctrldiff/denoiser.hpp"

#include <cmath>
#include <numeric>

#include "ctrldiff/errors.hpp"

namespace ctrldiff {

namespace {

// Logit assigned to every category except the observed one at an unmasked
// block position; exp() of it underflows to exactly zero in double.
constexpr double kExcludedLogit = -1e4;

const char* estimator_name(LossEstimator e) {
    return e == LossEstimator::time_sampled ? "time_sampled" : "masked_count";
}

LossEstimator estimator_from_name(const std::string& s) {
    if (s == "time_sampled") {
        return LossEstimator::time_sampled;
    }
    if (s == "masked_count") {
        return LossEstimator::masked_count;
    }
    throw ConfigurationError("unknown loss estimator '" + s + "'");
}

Eigen::MatrixXd to_double(const nn::Mat<float>& m) { return m.cast<double>(); }

}  // namespace

void DenoiserConfig::validate() const {
    if (layers < 1 || hidden_dim < 1 || heads < 1 || context_length < 1 || batch_size < 1) {
        throw ConfigurationError("denoiser dimensions must be positive");
    }
    if (hidden_dim % heads != 0) {
        throw ConfigurationError("hidden_dim must be divisible by heads");
    }
    if (!(learn_rate > 0.0) || warmup_steps < 0) {
        throw ConfigurationError("learn_rate must be positive and warmup_steps nonnegative");
    }
    if (train_block_sizes.empty()) {
        throw ConfigurationError("train_block_sizes must not be empty");
    }
    for (int s : train_block_sizes) {
        if (s < 1) {
            throw ConfigurationError("train_block_sizes entries must be positive");
        }
    }
}

nn::TransformerConfig DenoiserConfig::transformer(const Vocab& vocab) const {
    nn::TransformerConfig t;
    t.layers = layers;
    t.hidden = hidden_dim;
    t.heads = heads;
    t.vocab_in = vocab.size_total;
    t.out_dim = vocab.token_count();
    t.validate();
    return t;
}

nlohmann::json DenoiserConfig::to_json() const {
    return {{"layers", layers},
            {"hidden_dim", hidden_dim},
            {"heads", heads},
            {"context_length", context_length},
            {"learn_rate", learn_rate},
            {"warmup_steps", warmup_steps},
            {"batch_size", batch_size},
            {"weight_decay", weight_decay},
            {"clip_norm", clip_norm},
            {"train_block_sizes", train_block_sizes},
            {"estimator", estimator_name(estimator)}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
    DenoiserConfig c;
    c.layers = j.at("layers").get<int>();
    c.hidden_dim = j.at("hidden_dim").get<int>();
    c.heads = j.at("heads").get<int>();
    c.context_length = j.at("context_length").get<int>();
    c.learn_rate = j.at("learn_rate").get<double>();
    c.warmup_steps = j.at("warmup_steps").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.clip_norm = j.at("clip_norm").get<double>();
    c.train_block_sizes = j.at("train_block_sizes").get<std::vector<int>>();
    c.estimator = estimator_from_name(j.at("estimator").get<std::string>());
    c.validate();
    return c;
}

Denoiser::Denoiser(const DenoiserConfig& cfg, const Vocab& vocab, uint64_t seed)
    : Denoiser(cfg, vocab, nn::Transformer<float>::initialized(cfg.transformer(vocab), seed), 0) {}

Denoiser::Denoiser(const DenoiserConfig& cfg, const Vocab& vocab, nn::Transformer<float> net, long trained_steps)
    : cfg_(cfg), vocab_(vocab), net_(std::move(net)), trained_steps_(trained_steps) {
    cfg_.validate();
}

void Denoiser::check_tokens(std::span<const int> tokens, bool allow_mask) const {
    for (int t : tokens) {
        if (t < 0 || t >= vocab_.size_total) {
            throw InvalidInput("token id " + std::to_string(t) + " outside the vocabulary");
        }
        if (!allow_mask && vocab_.is_mask(t)) {
            throw InvalidInput("clean context contains a mask token");
        }
    }
}

DenoiserOutput Denoiser::denoise(std::span<const int> noised_block, std::span<const int> clean_prefix) const {
    const int p = static_cast<int>(clean_prefix.size());
    const int b = static_cast<int>(noised_block.size());
    if (p + b > cfg_.context_length) {
        throw CapacityError("prefix (" + std::to_string(p) + ") plus block (" + std::to_string(b) +
                            ") exceeds context length " + std::to_string(cfg_.context_length));
    }
    if (b == 0) {
        return {Eigen::MatrixXd(0, vocab_.token_count()), Eigen::MatrixXd(0, cfg_.hidden_dim)};
    }
    check_tokens(clean_prefix, false);
    check_tokens(noised_block, true);

    nn::PackedInput<float> in;
    in.tokens.assign(clean_prefix.begin(), clean_prefix.end());
    in.tokens.insert(in.tokens.end(), noised_block.begin(), noised_block.end());
    in.positions.resize(static_cast<size_t>(p + b));
    std::iota(in.positions.begin(), in.positions.end(), 0);
    nn::AttentionMask mask(p + b);
    for (int i = 0; i < p; ++i) {
        for (int j = 0; j <= i; ++j) {
            mask.set(i, j);
        }
    }
    for (int i = p; i < p + b; ++i) {
        for (int j = 0; j < p + b; ++j) {
            mask.set(i, j);
        }
    }
    in.segments = {nn::Segment{0, p + b, std::move(mask)}};

    const nn::Mat<float> hidden = net_.forward(in, nullptr).bottomRows(b);
    DenoiserOutput out;
    out.hidden = to_double(hidden);
    out.logits = to_double(net_.head(hidden));
    for (int i = 0; i < b; ++i) {
        const int tok = noised_block[static_cast<size_t>(i)];
        if (!vocab_.is_mask(tok)) {
            out.logits.row(i).setConstant(kExcludedLogit);
            out.logits(i, vocab_.to_output_index(tok)) = 0.0;
        }
    }
    return out;
}

Eigen::MatrixXd Denoiser::x0_logits(std::span<const int> noised_block, std::span<const int> clean_prefix) const {
    return denoise(noised_block, clean_prefix).logits;
}

Eigen::MatrixXd Denoiser::layout_logits(std::span<const int> x0, std::span<const int> xt,
                                        const BlockLayout& layout) const {
    const int n = static_cast<int>(x0.size());
    layout.validate(n);
    if (static_cast<int>(xt.size()) != n) {
        throw InvalidInput("clean and noised sequences differ in length");
    }
    if (n > cfg_.context_length) {
        throw CapacityError("sequence of " + std::to_string(n) + " tokens exceeds context length " +
                            std::to_string(cfg_.context_length));
    }
    check_tokens(x0, false);
    check_tokens(xt, true);
    nn::PackedInput<float> in;
    in.tokens.assign(xt.begin(), xt.end());
    in.tokens.insert(in.tokens.end(), x0.begin(), x0.end());
    in.positions.resize(static_cast<size_t>(2 * n));
    for (int i = 0; i < 2 * n; ++i) {
        in.positions[static_cast<size_t>(i)] = i % n;
    }
    in.segments = {nn::Segment{0, 2 * n, block_diffusion_mask(layout)}};
    Eigen::MatrixXd logits = to_double(net_.head(net_.forward(in, nullptr).topRows(n)));
    for (int i = 0; i < n; ++i) {
        const int tok = xt[static_cast<size_t>(i)];
        if (!vocab_.is_mask(tok)) {
            logits.row(i).setConstant(kExcludedLogit);
            logits(i, vocab_.to_output_index(tok)) = 0.0;
        }
    }
    return logits;
}

Eigen::MatrixXd Denoiser::hidden_states(std::span<const int> tokens) const {
    const int n = static_cast<int>(tokens.size());
    if (n > cfg_.context_length) {
        throw CapacityError("sequence of " + std::to_string(n) + " tokens exceeds context length " +
                            std::to_string(cfg_.context_length));
    }
    if (n == 0) {
        return Eigen::MatrixXd(0, cfg_.hidden_dim);
    }
    check_tokens(tokens, false);
    nn::PackedInput<float> in;
    in.tokens.assign(tokens.begin(), tokens.end());
    in.positions.resize(static_cast<size_t>(n));
    std::iota(in.positions.begin(), in.positions.end(), 0);
    in.segments = {nn::Segment{0, n, nn::AttentionMask::causal(n)}};
    return to_double(net_.forward(in, nullptr));
}

std::vector<double> Denoiser::token_log_probs(std::span<const int> tokens) const {
    const int n = static_cast<int>(tokens.size());
    if (n == 0) {
        return {};
    }
    const TokenSequence masked(static_cast<size_t>(n), vocab_.mask_id);
    const Eigen::MatrixXd logp = log_softmax_rows(layout_logits(tokens, masked, BlockLayout::fixed(n, 1)));
    std::vector<double> out(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        out[static_cast<size_t>(i)] = logp(i, vocab_.to_output_index(tokens[static_cast<size_t>(i)]));
    }
    return out;
}

Checkpoint Denoiser::to_checkpoint() const {
    Checkpoint ckpt;
    ckpt.kind = "denoiser";
    ckpt.config = {{"denoiser", cfg_.to_json()},
                   {"vocab_size", vocab_.size_total},
                   {"mask_id", vocab_.mask_id},
                   {"trained_steps", trained_steps_}};
    store_transformer(ckpt, "", net_);
    return ckpt;
}

Denoiser Denoiser::from_checkpoint(const Checkpoint& ckpt) {
    try {
        const auto cfg = DenoiserConfig::from_json(ckpt.config.at("denoiser"));
        const Vocab vocab(ckpt.config.at("vocab_size").get<int>(), ckpt.config.at("mask_id").get<int>());
        nn::Transformer<float> net(cfg.transformer(vocab));
        restore_transformer(ckpt, "", net);
        return Denoiser(cfg, vocab, std::move(net), ckpt.config.at("trained_steps").get<long>());
    } catch (const nlohmann::json::exception& e) {
        throw IngestionError("malformed denoiser checkpoint config: " + std::string(e.what()));
    }
}

void Denoiser::save(const std::filesystem::path& dir) const { save_checkpoint(dir, to_checkpoint()); }

Denoiser Denoiser::load(const std::filesystem::path& dir) { return from_checkpoint(load_checkpoint(dir, "denoiser")); }

nn::AttentionMask block_diffusion_mask(const BlockLayout& layout) {
    const int n = layout.total();
    nn::AttentionMask mask(2 * n);
    const auto starts = layout.starts();
    for (size_t b = 0; b < starts.size(); ++b) {
        const int s = starts[b];
        const int e = s + layout.lengths[b];
        for (int i = s; i < e; ++i) {
            for (int j = s; j < e; ++j) {
                mask.set(i, j);
            }
            for (int j = 0; j < s; ++j) {
                mask.set(i, n + j);
            }
        }
    }
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            mask.set(n + i, n + j);
        }
    }
    return mask;
}

BlockLayout sample_layout(int total, std::span<const int> sizes, Rng& rng) {
    if (sizes.empty()) {
        throw InvalidInput("no block sizes to sample from");
    }
    BlockLayout layout;
    int done = 0;
    while (done < total) {
        const int len = std::min(sizes[rng.below(sizes.size())], total - done);
        layout.lengths.push_back(len);
        done += len;
    }
    return layout;
}

NoisedExample make_noised_example(std::span<const int> x0, const BlockLayout& layout, LossEstimator estimator,
                                  const NoiseSchedule& schedule, const Vocab& vocab, Rng& rng) {
    validate_tokens(x0, vocab);
    for (int t : x0) {
        if (vocab.is_mask(t)) {
            throw InvalidInput("clean sequence contains a mask token");
        }
    }
    layout.validate(static_cast<int>(x0.size()));
    NoisedExample ex;
    ex.x0.assign(x0.begin(), x0.end());
    ex.xt = ex.x0;
    ex.layout = layout;
    ex.weight.assign(x0.size(), 0.0);
    const auto starts = layout.starts();
    std::vector<int> idx;
    for (size_t b = 0; b < starts.size(); ++b) {
        const int s = starts[b];
        const int len = layout.lengths[b];
        if (estimator == LossEstimator::masked_count) {
            const int k = 1 + static_cast<int>(rng.below(static_cast<size_t>(len)));
            idx.resize(static_cast<size_t>(len));
            std::iota(idx.begin(), idx.end(), s);
            for (int i = 0; i < k; ++i) {
                const size_t j = static_cast<size_t>(i) + rng.below(static_cast<size_t>(len - i));
                std::swap(idx[static_cast<size_t>(i)], idx[j]);
                const auto pos = static_cast<size_t>(idx[static_cast<size_t>(i)]);
                ex.xt[pos] = vocab.mask_id;
                ex.weight[pos] = static_cast<double>(len) / k;
            }
        } else {
            const double t = rng.uniform_open();
            const double alpha = schedule.alpha(t);
            const double w = schedule.nelbo_weight(t);
            for (int i = s; i < s + len; ++i) {
                if (!(rng.uniform() < alpha)) {
                    ex.xt[static_cast<size_t>(i)] = vocab.mask_id;
                    ex.weight[static_cast<size_t>(i)] = w;
                }
            }
        }
    }
    return ex;
}

template <class T>
double denoiser_loss(const nn::Transformer<T>& net, const Vocab& vocab, std::span<const NoisedExample> examples,
                     nn::Transformer<T>* grad) {
    nn::PackedInput<T> in;
    size_t total_positions = 0;
    for (const auto& ex : examples) {
        const int n = static_cast<int>(ex.x0.size());
        const int offset = in.rows();
        in.tokens.insert(in.tokens.end(), ex.xt.begin(), ex.xt.end());
        in.tokens.insert(in.tokens.end(), ex.x0.begin(), ex.x0.end());
        for (int i = 0; i < 2 * n; ++i) {
            in.positions.push_back(i % n);
        }
        in.segments.push_back(nn::Segment{offset, 2 * n, block_diffusion_mask(ex.layout)});
        total_positions += static_cast<size_t>(n);
    }
    if (total_positions == 0) {
        return 0.0;
    }
    nn::ForwardCache<T> cache;
    const nn::Mat<T> hidden = net.forward(in, grad ? &cache : nullptr);
    const nn::Mat<T> logits = net.head(hidden);
    nn::Mat<T> d_logits;
    if (grad) {
        d_logits = nn::Mat<T>::Zero(logits.rows(), logits.cols());
    }
    const double norm = 1.0 / static_cast<double>(total_positions);
    double loss = 0.0;
    for (size_t e = 0; e < examples.size(); ++e) {
        const auto& ex = examples[e];
        const int offset = in.segments[e].offset;
        for (size_t i = 0; i < ex.x0.size(); ++i) {
            const double w = ex.weight[i];
            if (w == 0.0) {
                continue;
            }
            const auto row = static_cast<Eigen::Index>(offset + static_cast<int>(i));
            const int target = vocab.to_output_index(ex.x0[i]);
            const auto l = logits.row(row).template cast<double>();
            const double top = l.maxCoeff();
            const Eigen::RowVectorXd p = (l.array() - top).exp();
            const double z = p.sum();
            loss += w * (std::log(z) + top - l(target));
            if (grad) {
                Eigen::RowVectorXd d = p / z;
                d(target) -= 1.0;
                d_logits.row(row) = (d * (w * norm)).template cast<T>();
            }
        }
    }
    if (grad) {
        const nn::Mat<T> d_hidden = net.head_backward(hidden, d_logits, *grad);
        net.backward(in, cache, d_hidden, *grad, nullptr);
    }
    return loss * norm;
}

template double denoiser_loss<float>(const nn::Transformer<float>&, const Vocab&, std::span<const NoisedExample>,
                                     nn::Transformer<float>*);
template double denoiser_loss<double>(const nn::Transformer<double>&, const Vocab&, std::span<const NoisedExample>,
                                      nn::Transformer<double>*);

namespace {

nn::AdamW<float>::Options optimizer_options(const DenoiserConfig& cfg) {
    nn::AdamW<float>::Options opt;
    opt.learn_rate = cfg.learn_rate;
    opt.warmup_steps = cfg.warmup_steps;
    opt.weight_decay = cfg.weight_decay;
    opt.clip_norm = cfg.clip_norm;
    return opt;
}

}  // namespace

DenoiserTrainer::DenoiserTrainer(Denoiser& model, const NoiseSchedule& schedule, uint64_t seed)
    : model_(model), schedule_(schedule), rng_(seed), optimizer_(model.net(), optimizer_options(model.config())) {}

double DenoiserTrainer::step(const TokenBatch& batch) {
    const auto& cfg = model_.config();
    std::vector<NoisedExample> examples;
    examples.reserve(batch.size());
    for (const auto& seq : batch) {
        if (static_cast<int>(seq.size()) > cfg.context_length) {
            throw CapacityError("training sequence longer than the context length");
        }
        const auto layout = sample_layout(static_cast<int>(seq.size()), cfg.train_block_sizes, rng_);
        examples.push_back(make_noised_example(seq, layout, cfg.estimator, schedule_, model_.vocab(), rng_));
    }
    auto grad = model_.net().zeros_like();
    const double loss = denoiser_loss<float>(model_.net(), model_.vocab(), examples, &grad);
    if (!std::isfinite(loss)) {
        throw TrainingError("non-finite denoiser loss at step " + std::to_string(optimizer_.steps_taken() + 1));
    }
    optimizer_.step(model_.net(), grad);
    model_.set_trained_steps(optimizer_.steps_taken());
    return loss;
}

DenoiserTrainResult train_denoiser(const DenoiserConfig& cfg, const Vocab& vocab, BatchStream& stream,
                                   const NoiseSchedule& schedule, int steps, uint64_t seed,
                                   const StepCallback& on_step) {
    cfg.validate();
    if (steps < 0) {
        throw ConfigurationError("steps must be nonnegative");
    }
    if (stream.context_length() > cfg.context_length) {
        throw ConfigurationError("corpus chunks are longer than the denoiser context");
    }
    DenoiserTrainResult result{Denoiser(cfg, vocab, derive_seed(seed, 1)), {}};
    DenoiserTrainer trainer(result.model, schedule, derive_seed(seed, 2));
    result.loss_trace.reserve(static_cast<size_t>(steps));
    for (int s = 1; s <= steps; ++s) {
        const double loss = trainer.step(stream.next_batch());
        result.loss_trace.push_back(loss);
        if (on_step) {
            on_step(s, loss);
        }
    }
    return result;
}

}  // namespace ctrldiff
