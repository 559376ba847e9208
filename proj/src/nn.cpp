#include "ctrldiff/nn.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "ctrldiff/errors.hpp"

namespace ctrldiff::nn {

void TransformerConfig::validate() const {
    if (layers < 1 || hidden < 1 || heads < 1 || vocab_in < 1 || out_dim < 1 || mlp_ratio < 1) {
        throw ConfigurationError("transformer dimensions must be positive");
    }
    if (hidden % heads != 0) {
        throw ConfigurationError("hidden_dim must be divisible by heads");
    }
    if (head_dim() % 2 != 0) {
        throw ConfigurationError("rotary encoding needs an even head dimension");
    }
}

AttentionMask AttentionMask::full(int n) {
    AttentionMask m(n);
    std::fill(m.allowed_.begin(), m.allowed_.end(), uint8_t{1});
    return m;
}

AttentionMask AttentionMask::causal(int n) {
    AttentionMask m(n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            m.set(i, j);
        }
    }
    return m;
}

namespace {

template <class T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <class T>
void layer_norm(const Mat<T>& x, const Mat<T>& g, const Mat<T>& b, Mat<T>& xhat, ColVec<T>& rstd, Mat<T>& out) {
    constexpr T eps = T(1e-5);
    const auto n = x.rows();
    const auto d = x.cols();
    xhat.resize(n, d);
    rstd.resize(n);
    out.resize(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        const T mean = x.row(i).mean();
        const T var = (x.row(i).array() - mean).square().mean();
        const T r = T(1) / std::sqrt(var + eps);
        rstd(i) = r;
        xhat.row(i) = (x.row(i).array() - mean) * r;
        out.row(i) = xhat.row(i).cwiseProduct(g) + b;
    }
}

template <class T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& xhat, const ColVec<T>& rstd, const Mat<T>& g, Mat<T>& dg,
                           Mat<T>& db) {
    dg += (dy.array() * xhat.array()).colwise().sum().matrix();
    db += dy.colwise().sum();
    Mat<T> dx(dy.rows(), dy.cols());
    const T inv_d = T(1) / static_cast<T>(dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        const auto dxhat = dy.row(i).cwiseProduct(g);
        const T mean_dxhat = dxhat.sum() * inv_d;
        const T mean_dxhat_xhat = dxhat.cwiseProduct(xhat.row(i)).sum() * inv_d;
        dx.row(i) = rstd(i) * (dxhat.array() - mean_dxhat - xhat.row(i).array() * mean_dxhat_xhat);
    }
    return dx;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

// tanh-approximated GELU over a whole matrix; th receives the inner tanh,
// which the backward pass reuses.
template <class T>
void gelu(const Mat<T>& x, Mat<T>& th, Mat<T>& out) {
    th = (T(kGeluC) * (x.array() + T(0.044715) * x.array().cube())).tanh().matrix();
    out = (T(0.5) * x.array() * (T(1) + th.array())).matrix();
}

template <class T>
Mat<T> gelu_grad(const Mat<T>& x, const Mat<T>& th) {
    const auto xa = x.array();
    const auto ta = th.array();
    return (T(0.5) * (T(1) + ta) +
            T(0.5) * xa * (T(1) - ta.square()) * T(kGeluC) * (T(1) + T(3 * 0.044715) * xa.square()))
        .matrix();
}

// Additive attention bias: 0 where allowed, -inf where masked.
template <class T>
Mat<T> mask_bias(const AttentionMask& mask) {
    const int n = mask.size();
    Mat<T> b(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            b(i, j) = mask.allowed(i, j) ? T(0) : -std::numeric_limits<T>::infinity();
        }
    }
    return b;
}

template <class T>
struct Rope {
    Mat<T> cos, sin;  // [rows, head_dim / 2]
};

template <class T>
Rope<T> rope_tables(const std::vector<int>& positions, int head_dim, double base) {
    const int half = head_dim / 2;
    Rope<T> r;
    r.cos.resize(static_cast<Eigen::Index>(positions.size()), half);
    r.sin.resize(static_cast<Eigen::Index>(positions.size()), half);
    for (size_t i = 0; i < positions.size(); ++i) {
        for (int p = 0; p < half; ++p) {
            const double inv_freq = std::pow(base, -2.0 * p / head_dim);
            const double angle = positions[i] * inv_freq;
            r.cos(static_cast<Eigen::Index>(i), p) = static_cast<T>(std::cos(angle));
            r.sin(static_cast<Eigen::Index>(i), p) = static_cast<T>(std::sin(angle));
        }
    }
    return r;
}

// Rotates columns [col, col + head_dim) of every row; inverse rotates by -angle.
template <class T>
void apply_rope(Mat<T>& m, Eigen::Index col, int head_dim, const Rope<T>& rope, bool inverse) {
    const int half = head_dim / 2;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        T* row = m.row(i).data() + col;
        for (int p = 0; p < half; ++p) {
            const T c = rope.cos(i, p);
            const T s = inverse ? -rope.sin(i, p) : rope.sin(i, p);
            const T a = row[2 * p];
            const T b = row[2 * p + 1];
            row[2 * p] = a * c - b * s;
            row[2 * p + 1] = a * s + b * c;
        }
    }
}

template <class T>
void add_row_bias(Mat<T>& m, const Mat<T>& bias) {
    m.rowwise() += bias.row(0);
}

}  // namespace

template <class T>
Transformer<T>::Transformer(const TransformerConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const int d = cfg.hidden;
    const int f = cfg.hidden * cfg.mlp_ratio;
    tok_emb = Mat<T>::Zero(cfg.vocab_in, d);
    layers.resize(static_cast<size_t>(cfg.layers));
    for (auto& l : layers) {
        l.ln1_g = Mat<T>::Ones(1, d);
        l.ln1_b = Mat<T>::Zero(1, d);
        l.wqkv = Mat<T>::Zero(d, 3 * d);
        l.bqkv = Mat<T>::Zero(1, 3 * d);
        l.wo = Mat<T>::Zero(d, d);
        l.bo = Mat<T>::Zero(1, d);
        l.ln2_g = Mat<T>::Ones(1, d);
        l.ln2_b = Mat<T>::Zero(1, d);
        l.w1 = Mat<T>::Zero(d, f);
        l.b1 = Mat<T>::Zero(1, f);
        l.w2 = Mat<T>::Zero(f, d);
        l.b2 = Mat<T>::Zero(1, d);
    }
    lnf_g = Mat<T>::Ones(1, d);
    lnf_b = Mat<T>::Zero(1, d);
    head_w = Mat<T>::Zero(d, cfg.out_dim);
    head_b = Mat<T>::Zero(1, cfg.out_dim);
}

template <class T>
Transformer<T> Transformer<T>::initialized(const TransformerConfig& cfg, uint64_t seed) {
    Transformer t(cfg);
    Rng rng(seed);
    const double out_scale = 1.0 / std::sqrt(2.0 * cfg.layers);
    auto fill = [&](Mat<T>& m, double std) {
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            m.data()[i] = static_cast<T>(std * rng.normal());
        }
    };
    fill(t.tok_emb, 0.02);
    for (auto& l : t.layers) {
        fill(l.wqkv, 0.02);
        fill(l.wo, 0.02 * out_scale);
        fill(l.w1, 0.02);
        fill(l.w2, 0.02 * out_scale);
    }
    fill(t.head_w, 0.02);
    return t;
}

template <class T>
Transformer<T> Transformer<T>::zeros_like() const {
    Transformer z = *this;
    for (auto* p : z.parameters()) {
        p->setZero();
    }
    return z;
}

template <class T>
template <class U>
Transformer<U> Transformer<T>::cast() const {
    Transformer<U> out(cfg_);
    const auto src = parameters();
    const auto dst = out.parameters();
    for (size_t i = 0; i < src.size(); ++i) {
        *dst[i] = src[i]->template cast<U>();
    }
    return out;
}

template <class T>
std::vector<Mat<T>*> Transformer<T>::parameters() {
    std::vector<Mat<T>*> p = {&tok_emb};
    for (auto& l : layers) {
        for (Mat<T>* m : {&l.ln1_g, &l.ln1_b, &l.wqkv, &l.bqkv, &l.wo, &l.bo, &l.ln2_g, &l.ln2_b, &l.w1, &l.b1, &l.w2,
                          &l.b2}) {
            p.push_back(m);
        }
    }
    for (Mat<T>* m : {&lnf_g, &lnf_b, &head_w, &head_b}) {
        p.push_back(m);
    }
    return p;
}

template <class T>
std::vector<const Mat<T>*> Transformer<T>::parameters() const {
    auto mut = const_cast<Transformer*>(this)->parameters();
    return std::vector<const Mat<T>*>(mut.begin(), mut.end());
}

namespace {

const char* const kLayerNames[] = {"ln1_g", "ln1_b", "wqkv", "bqkv", "wo", "bo",
                                   "ln2_g", "ln2_b", "w1",   "b1",   "w2", "b2"};

// Names in the same order as Transformer::parameters().
std::vector<std::string> parameter_names(size_t layer_count) {
    std::vector<std::string> names = {"tok_emb"};
    for (size_t li = 0; li < layer_count; ++li) {
        for (const char* n : kLayerNames) {
            names.push_back("layer" + std::to_string(li) + "." + n);
        }
    }
    for (const char* n : {"lnf_g", "lnf_b", "head_w", "head_b"}) {
        names.emplace_back(n);
    }
    return names;
}

}  // namespace

template <class T>
void Transformer<T>::visit(const std::function<void(const std::string&, Mat<T>&)>& f) {
    const auto params = parameters();
    const auto names = parameter_names(layers.size());
    for (size_t i = 0; i < params.size(); ++i) {
        f(names[i], *params[i]);
    }
}

template <class T>
void Transformer<T>::visit(const std::function<void(const std::string&, const Mat<T>&)>& f) const {
    const auto params = parameters();
    const auto names = parameter_names(layers.size());
    for (size_t i = 0; i < params.size(); ++i) {
        f(names[i], *params[i]);
    }
}

template <class T>
size_t Transformer<T>::parameter_count() const {
    size_t n = 0;
    for (const auto* p : parameters()) {
        n += static_cast<size_t>(p->size());
    }
    return n;
}

template <class T>
Mat<T> Transformer<T>::forward(const PackedInput<T>& in, ForwardCache<T>* cache) const {
    const int n = in.rows();
    const int d = cfg_.hidden;
    const int hd = cfg_.head_dim();
    if (static_cast<int>(in.positions.size()) != n) {
        throw InvalidInput("packed input positions do not match row count");
    }
    Mat<T> x(n, d);
    if (!in.tokens.empty()) {
        for (int i = 0; i < n; ++i) {
            const int tok = in.tokens[static_cast<size_t>(i)];
            if (tok < 0 || tok >= cfg_.vocab_in) {
                throw InvalidInput("input token outside embedding table");
            }
            x.row(i) = tok_emb.row(tok);
        }
    } else {
        if (in.soft.cols() != cfg_.vocab_in) {
            throw InvalidInput("soft input width does not match embedding table");
        }
        x.noalias() = in.soft * tok_emb;
    }
    const Rope<T> rope = rope_tables<T>(in.positions, hd, cfg_.rope_base);
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));

    if (cache) {
        cache->layers.assign(layers.size(), LayerCache<T>{});
    }
    std::vector<Mat<T>> biases;
    biases.reserve(in.segments.size());
    for (const auto& seg : in.segments) {
        if (seg.mask.size() != seg.length) {
            throw InvalidInput("attention mask size does not match segment length");
        }
        biases.push_back(mask_bias<T>(seg.mask));
    }
    LayerCache<T> scratch;
    for (size_t li = 0; li < layers.size(); ++li) {
        const auto& p = layers[li];
        LayerCache<T>& c = cache ? cache->layers[li] : scratch;

        layer_norm(x, p.ln1_g, p.ln1_b, c.ln1_xhat, c.ln1_rstd, c.ln1_out);
        c.qkv.noalias() = c.ln1_out * p.wqkv;
        add_row_bias(c.qkv, p.bqkv);
        for (int h = 0; h < cfg_.heads; ++h) {
            apply_rope(c.qkv, h * hd, hd, rope, false);
            apply_rope(c.qkv, d + h * hd, hd, rope, false);
        }
        c.att_cat.resize(n, d);
        if (cache) {
            c.probs.assign(in.segments.size(), std::vector<Mat<T>>(static_cast<size_t>(cfg_.heads)));
        }
        Mat<T> scores, q, k, v;
        for (size_t si = 0; si < in.segments.size(); ++si) {
            const auto& seg = in.segments[si];
            const int len = seg.length;
            for (int h = 0; h < cfg_.heads; ++h) {
                q = c.qkv.block(seg.offset, h * hd, len, hd);
                k = c.qkv.block(seg.offset, d + h * hd, len, hd);
                v = c.qkv.block(seg.offset, 2 * d + h * hd, len, hd);
                scores.noalias() = q * k.transpose();
                for (int i = 0; i < len; ++i) {
                    auto r = scores.row(i).array();
                    r = r * scale + biases[si].row(i).array();
                    r = (r - r.maxCoeff()).exp();
                    r /= r.sum();
                }
                c.att_cat.block(seg.offset, h * hd, len, hd).noalias() = scores * v;
                if (cache) {
                    c.probs[si][static_cast<size_t>(h)] = scores;
                }
            }
        }
        x.noalias() += c.att_cat * p.wo;
        add_row_bias(x, p.bo);

        layer_norm(x, p.ln2_g, p.ln2_b, c.ln2_xhat, c.ln2_rstd, c.ln2_out);
        c.h1.noalias() = c.ln2_out * p.w1;
        add_row_bias(c.h1, p.b1);
        gelu(c.h1, c.gelu_tanh, c.act);
        x.noalias() += c.act * p.w2;
        add_row_bias(x, p.b2);
    }
    Mat<T> out;
    Mat<T> xhat;
    ColVec<T> rstd;
    layer_norm(x, lnf_g, lnf_b, xhat, rstd, out);
    if (cache) {
        cache->lnf_xhat = std::move(xhat);
        cache->lnf_rstd = std::move(rstd);
    }
    return out;
}

template <class T>
void Transformer<T>::backward(const PackedInput<T>& in, const ForwardCache<T>& cache, const Mat<T>& d_hidden,
                              Transformer& grad, Mat<T>* d_soft) const {
    const int d = cfg_.hidden;
    const int hd = cfg_.head_dim();
    const int n = in.rows();
    const Rope<T> rope = rope_tables<T>(in.positions, hd, cfg_.rope_base);
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));

    Mat<T> dx = layer_norm_backward(d_hidden, cache.lnf_xhat, cache.lnf_rstd, lnf_g, grad.lnf_g, grad.lnf_b);

    for (size_t li = layers.size(); li-- > 0;) {
        const auto& p = layers[li];
        auto& g = grad.layers[li];
        const auto& c = cache.layers[li];

        // MLP branch.
        g.w2.noalias() += c.act.transpose() * dx;
        g.b2 += dx.colwise().sum();
        Mat<T> d_h1 = dx * p.w2.transpose();
        d_h1.array() *= gelu_grad(c.h1, c.gelu_tanh).array();
        g.w1.noalias() += c.ln2_out.transpose() * d_h1;
        g.b1 += d_h1.colwise().sum();
        const Mat<T> d_ln2 = d_h1 * p.w1.transpose();
        dx += layer_norm_backward(d_ln2, c.ln2_xhat, c.ln2_rstd, p.ln2_g, g.ln2_g, g.ln2_b);

        // Attention branch.
        g.wo.noalias() += c.att_cat.transpose() * dx;
        g.bo += dx.colwise().sum();
        const Mat<T> d_att = dx * p.wo.transpose();
        Mat<T> d_qkv = Mat<T>::Zero(n, 3 * d);
        Mat<T> d_scores, q, k, v, d_out;
        for (size_t si = 0; si < in.segments.size(); ++si) {
            const auto& seg = in.segments[si];
            const int len = seg.length;
            for (int h = 0; h < cfg_.heads; ++h) {
                const Mat<T>& probs = c.probs[si][static_cast<size_t>(h)];
                q = c.qkv.block(seg.offset, h * hd, len, hd);
                k = c.qkv.block(seg.offset, d + h * hd, len, hd);
                v = c.qkv.block(seg.offset, 2 * d + h * hd, len, hd);
                d_out = d_att.block(seg.offset, h * hd, len, hd);
                d_qkv.block(seg.offset, 2 * d + h * hd, len, hd).noalias() += probs.transpose() * d_out;
                d_scores.noalias() = d_out * v.transpose();
                for (int i = 0; i < len; ++i) {
                    auto ds = d_scores.row(i).array();
                    const auto pr = probs.row(i).array();
                    const T dot = (pr * ds).sum();
                    ds = pr * (ds - dot) * scale;
                }
                d_qkv.block(seg.offset, h * hd, len, hd).noalias() += d_scores * k;
                d_qkv.block(seg.offset, d + h * hd, len, hd).noalias() += d_scores.transpose() * q;
            }
        }
        for (int h = 0; h < cfg_.heads; ++h) {
            apply_rope(d_qkv, h * hd, hd, rope, true);
            apply_rope(d_qkv, d + h * hd, hd, rope, true);
        }
        g.wqkv.noalias() += c.ln1_out.transpose() * d_qkv;
        g.bqkv += d_qkv.colwise().sum();
        const Mat<T> d_ln1 = d_qkv * p.wqkv.transpose();
        dx += layer_norm_backward(d_ln1, c.ln1_xhat, c.ln1_rstd, p.ln1_g, g.ln1_g, g.ln1_b);
    }

    if (!in.tokens.empty()) {
        for (int i = 0; i < n; ++i) {
            grad.tok_emb.row(in.tokens[static_cast<size_t>(i)]) += dx.row(i);
        }
    } else {
        grad.tok_emb.noalias() += in.soft.transpose() * dx;
        if (d_soft) {
            *d_soft = dx * tok_emb.transpose();
        }
    }
}

template <class T>
Mat<T> Transformer<T>::head(const Mat<T>& hidden) const {
    Mat<T> logits = hidden * head_w;
    add_row_bias(logits, head_b);
    return logits;
}

template <class T>
Mat<T> Transformer<T>::head_backward(const Mat<T>& hidden, const Mat<T>& d_logits, Transformer& grad) const {
    grad.head_w.noalias() += hidden.transpose() * d_logits;
    grad.head_b += d_logits.colwise().sum();
    return d_logits * head_w.transpose();
}

template <class T>
AdamW<T>::AdamW(const Transformer<T>& model, Options opt) : opt_(opt), m_(model.zeros_like()), v_(model.zeros_like()) {}

template <class T>
double AdamW<T>::current_learn_rate() const {
    double lr = opt_.learn_rate;
    if (opt_.warmup_steps > 0) {
        lr *= std::min(1.0, static_cast<double>(step_) / static_cast<double>(opt_.warmup_steps));
    }
    if (opt_.decay_steps > opt_.warmup_steps && step_ > opt_.warmup_steps) {
        const double frac = std::min(1.0, static_cast<double>(step_ - opt_.warmup_steps) /
                                              static_cast<double>(opt_.decay_steps - opt_.warmup_steps));
        lr *= 0.5 * (1.0 + std::cos(M_PI * frac));
    }
    return lr;
}

template <class T>
double AdamW<T>::step(Transformer<T>& model, Transformer<T>& grad) {
    auto params = model.parameters();
    auto grads = grad.parameters();
    auto ms = m_.parameters();
    auto vs = v_.parameters();
    double sq = 0.0;
    for (const auto* g : grads) {
        sq += g->template cast<double>().squaredNorm();
    }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) {
        throw TrainingError("non-finite gradient norm");
    }
    const double clip = (opt_.clip_norm > 0.0 && norm > opt_.clip_norm) ? opt_.clip_norm / norm : 1.0;
    ++step_;
    const double lr = current_learn_rate();
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_));
    const T b1 = static_cast<T>(opt_.beta1);
    const T b2 = static_cast<T>(opt_.beta2);
    for (size_t i = 0; i < params.size(); ++i) {
        Mat<T>& p = *params[i];
        const Mat<T> g = *grads[i] * static_cast<T>(clip);
        *ms[i] = b1 * *ms[i] + (T(1) - b1) * g;
        *vs[i] = b2 * *vs[i] + (T(1) - b2) * g.cwiseProduct(g);
        if (p.rows() > 1 && p.cols() > 1 && opt_.weight_decay > 0.0) {
            p *= static_cast<T>(1.0 - lr * opt_.weight_decay);
        }
        const T step_size = static_cast<T>(lr / bc1);
        const T denom_scale = static_cast<T>(1.0 / std::sqrt(bc2));
        p.array() -= step_size * ms[i]->array() / (vs[i]->array().sqrt() * denom_scale + static_cast<T>(opt_.eps));
    }
    return norm;
}

template class Transformer<float>;
template class Transformer<double>;
template Transformer<double> Transformer<float>::cast<double>() const;
template Transformer<float> Transformer<double>::cast<float>() const;
template Transformer<float> Transformer<float>::cast<float>() const;
template Transformer<double> Transformer<double>::cast<double>() const;
template class AdamW<float>;
template class AdamW<double>;

}  // namespace ctrldiff::nn
