#pragma once

// A small pre-LayerNorm transformer encoder with rotary position encoding,
// explicit attention masks and hand-written backward passes.
//
// Several independent sequences ("segments") are packed row-wise into one
// activation matrix; dense layers run on the packed matrix while attention
// runs per segment under that segment's mask.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ctrldiff/rng.hpp"

namespace ctrldiff::nn {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct TransformerConfig {
    int layers = 4;
    int hidden = 128;
    int heads = 4;
    int vocab_in = 28;  // input categories, including the mask
    int out_dim = 27;
    int mlp_ratio = 4;
    double rope_base = 10000.0;

    int head_dim() const { return hidden / heads; }
    void validate() const;
};

// allowed(i, j) != 0 means query i may attend to key j.
class AttentionMask {
public:
    AttentionMask() = default;
    explicit AttentionMask(int n) : n_(n), allowed_(static_cast<size_t>(n) * static_cast<size_t>(n), 0) {}

    static AttentionMask full(int n);
    static AttentionMask causal(int n);

    int size() const { return n_; }
    bool allowed(int i, int j) const { return allowed_[static_cast<size_t>(i) * static_cast<size_t>(n_) + static_cast<size_t>(j)] != 0; }
    void set(int i, int j, bool v = true) {
        allowed_[static_cast<size_t>(i) * static_cast<size_t>(n_) + static_cast<size_t>(j)] = v ? 1 : 0;
    }

private:
    int n_ = 0;
    std::vector<uint8_t> allowed_;
};

struct Segment {
    int offset = 0;
    int length = 0;
    AttentionMask mask;
};

// Packed input rows: either token ids or soft (relaxed one-hot) rows over
// vocab_in categories.
template <class T>
struct PackedInput {
    std::vector<int> tokens;
    Mat<T> soft;  // used when tokens is empty
    std::vector<int> positions;
    std::vector<Segment> segments;

    int rows() const { return tokens.empty() ? static_cast<int>(soft.rows()) : static_cast<int>(tokens.size()); }
};

template <class T>
struct LayerParams {
    Mat<T> ln1_g, ln1_b, wqkv, bqkv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
};

template <class T>
struct LayerCache {
    Mat<T> ln1_xhat, ln1_out, qkv, att_cat, ln2_xhat, ln2_out, h1, gelu_tanh, act;
    Eigen::Matrix<T, Eigen::Dynamic, 1> ln1_rstd, ln2_rstd;
    // probs[segment][head]
    std::vector<std::vector<Mat<T>>> probs;
};

template <class T>
struct ForwardCache {
    std::vector<LayerCache<T>> layers;
    Mat<T> lnf_xhat;
    Eigen::Matrix<T, Eigen::Dynamic, 1> lnf_rstd;
};

template <class T>
class Transformer {
public:
    Transformer() = default;
    explicit Transformer(const TransformerConfig& cfg);

    static Transformer initialized(const TransformerConfig& cfg, uint64_t seed);
    Transformer zeros_like() const;

    template <class U>
    Transformer<U> cast() const;

    const TransformerConfig& config() const { return cfg_; }

    // Final hidden states (after the last LayerNorm), one row per packed input row.
    Mat<T> forward(const PackedInput<T>& input, ForwardCache<T>* cache) const;

    // Accumulates parameter gradients into grad. When the input was soft and
    // d_soft is non-null, writes the gradient with respect to the soft rows.
    void backward(const PackedInput<T>& input, const ForwardCache<T>& cache, const Mat<T>& d_hidden,
                  Transformer& grad, Mat<T>* d_soft) const;

    // Linear output head, applied row-wise.
    Mat<T> head(const Mat<T>& hidden) const;
    // Returns d_hidden; accumulates head gradients.
    Mat<T> head_backward(const Mat<T>& hidden, const Mat<T>& d_logits, Transformer& grad) const;

    // Stable parameter enumeration shared by checkpoints and optimizers.
    void visit(const std::function<void(const std::string&, Mat<T>&)>& f);
    void visit(const std::function<void(const std::string&, const Mat<T>&)>& f) const;
    size_t parameter_count() const;
    std::vector<Mat<T>*> parameters();
    std::vector<const Mat<T>*> parameters() const;

    Mat<T> tok_emb;
    std::vector<LayerParams<T>> layers;
    Mat<T> lnf_g, lnf_b;
    Mat<T> head_w, head_b;

private:
    template <class U>
    friend class Transformer;

    TransformerConfig cfg_;
};

// Decoupled-weight-decay Adam over a parameter set. Weight decay applies to
// matrices with more than one row (embeddings and projections), not to
// biases or LayerNorm gains.
template <class T>
class AdamW {
public:
    struct Options {
        double learn_rate = 3e-4;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.01;
        int warmup_steps = 0;
        int decay_steps = 0;     // cosine decay to zero at this step when > warmup_steps
        double clip_norm = 1.0;  // <= 0 disables clipping
    };

    AdamW(const Transformer<T>& model, Options opt);

    // Returns the pre-clip global gradient norm.
    double step(Transformer<T>& model, Transformer<T>& grad);
    double current_learn_rate() const;
    long steps_taken() const { return step_; }

private:
    Options opt_;
    Transformer<T> m_, v_;
    long step_ = 0;
};

}  // namespace ctrldiff::nn
