#include "ctrldiff/block_policy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ctrldiff/errors.hpp"

namespace ctrldiff {

int ActionSpace::index_of(int length) const {
    const auto it = std::find(lengths.begin(), lengths.end(), length);
    if (it == lengths.end()) {
        throw InvalidInput("block length " + std::to_string(length) + " is not an allowed action");
    }
    return static_cast<int>(it - lengths.begin());
}

void ActionSpace::validate() const {
    if (lengths.empty()) {
        throw ConfigurationError("action space is empty");
    }
    for (size_t i = 0; i < lengths.size(); ++i) {
        if (lengths[i] < 1 || (i > 0 && lengths[i] <= lengths[i - 1])) {
            throw ConfigurationError("action lengths must be >= 1 and strictly increasing");
        }
    }
}

PolicyState extract_state(const Eigen::MatrixXd& block_means, std::span<const int> window_tokens, int window,
                          std::span<const double> weights) {
    if (window < 1) {
        throw InvalidInput("state window must be at least one block");
    }
    if (!block_means.allFinite()) {
        throw InvalidInput("hidden states must be finite");
    }
    const auto d = block_means.cols();
    const int used = std::min<int>(window, static_cast<int>(block_means.rows()));
    PolicyState s;
    s.window = Eigen::MatrixXd::Zero(window, d);
    s.blocks = used;
    s.pooled = Eigen::VectorXd::Zero(d);
    s.entropy = token_entropy(window_tokens);
    if (used == 0) {
        return s;
    }
    if (!weights.empty() && static_cast<int>(weights.size()) != used) {
        throw InvalidInput("one pooling weight per block in the window is required");
    }
    if (!weights.empty()) {
        double total = 0.0;
        for (double w : weights) {
            if (!(w >= 0.0)) {
                throw InvalidInput("pooling weights must be nonnegative");
            }
            total += w;
        }
        if (std::abs(total - 1.0) > 1e-9) {
            throw InvalidInput("pooling weights must sum to 1");
        }
    }
    const auto tail = block_means.bottomRows(used);
    s.window.bottomRows(used) = tail;
    for (int i = 0; i < used; ++i) {
        const double w = weights.empty() ? 1.0 / used : weights[static_cast<size_t>(i)];
        s.pooled += w * tail.row(i).transpose();
    }
    return s;
}

PolicyState sequence_state(const Denoiser& model, std::span<const int> tokens, std::span<const int> block_starts,
                           int window) {
    const int n = static_cast<int>(tokens.size());
    const int d = model.config().hidden_dim;
    // Only the blocks inside the window matter.
    std::vector<int> starts;
    for (int s : block_starts) {
        if (s < 0 || s >= n || (!starts.empty() && s <= starts.back())) {
            throw InvalidInput("block starts must be increasing offsets inside the sequence");
        }
        starts.push_back(s);
    }
    const size_t first = starts.size() > static_cast<size_t>(window) ? starts.size() - static_cast<size_t>(window) : 0;
    starts.erase(starts.begin(), starts.begin() + static_cast<long>(first));
    if (starts.empty()) {
        return extract_state(Eigen::MatrixXd(0, d), {}, window);
    }
    const int offset = std::max(0, n - model.context_length());
    const Eigen::MatrixXd hidden = model.hidden_states(tokens.subspan(static_cast<size_t>(offset)));
    Eigen::MatrixXd means(static_cast<Eigen::Index>(starts.size()), d);
    for (size_t b = 0; b < starts.size(); ++b) {
        const int lo = std::max(starts[b], offset);
        const int hi = b + 1 < starts.size() ? starts[b + 1] : n;
        if (hi <= lo) {
            means.row(static_cast<Eigen::Index>(b)) = hidden.row(0);
            continue;
        }
        means.row(static_cast<Eigen::Index>(b)) = hidden.middleRows(lo - offset, hi - lo).colwise().mean();
    }
    return extract_state(means, tokens.subspan(static_cast<size_t>(starts.front())), window);
}

void PolicyConfig::validate() const {
    actions.validate();
    if (window < 1 || conv_channels < 1 || mlp_hidden < 1) {
        throw ConfigurationError("policy dimensions must be positive");
    }
    if (conv_kernel < 1 || conv_kernel > window) {
        throw ConfigurationError("convolution kernel must lie in [1, window]");
    }
}

nlohmann::json PolicyConfig::to_json() const {
    return {{"actions", actions.lengths},
            {"window", window},
            {"conv_channels", conv_channels},
            {"conv_kernel", conv_kernel},
            {"mlp_hidden", mlp_hidden}};
}

PolicyConfig PolicyConfig::from_json(const nlohmann::json& j) {
    PolicyConfig c;
    c.actions.lengths = j.at("actions").get<std::vector<int>>();
    c.window = j.at("window").get<int>();
    c.conv_channels = j.at("conv_channels").get<int>();
    c.conv_kernel = j.at("conv_kernel").get<int>();
    c.mlp_hidden = j.at("mlp_hidden").get<int>();
    c.validate();
    return c;
}

PolicyParams PolicyParams::zeros_like() const {
    PolicyParams z = *this;
    z.visit([](const std::string&, Eigen::MatrixXd& m) { m.setZero(); });
    return z;
}

void PolicyParams::visit(const std::function<void(const std::string&, Eigen::MatrixXd&)>& fn) {
    fn("conv_w", conv_w);
    fn("conv_b", conv_b);
    fn("w1", w1);
    fn("b1", b1);
    fn("w_pi", w_pi);
    fn("b_pi", b_pi);
    fn("w_v", w_v);
    fn("b_v", b_v);
    fn("init", init);
}

void PolicyParams::visit(const std::function<void(const std::string&, const Eigen::MatrixXd&)>& fn) const {
    const_cast<PolicyParams*>(this)->visit([&](const std::string& name, Eigen::MatrixXd& m) { fn(name, m); });
}

double PolicyParams::squared_norm() const {
    double total = 0.0;
    visit([&](const std::string&, const Eigen::MatrixXd& m) { total += m.squaredNorm(); });
    return total;
}

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, double scale, Rng& rng) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        m.data()[i] = scale * rng.normal();
    }
    return m;
}

// Intermediate values of one forward pass.
struct PolicyTape {
    Eigen::MatrixXd window;       // with the initial vector in padding rows
    std::vector<int> argmax_t;    // max-pool winner per channel
    Eigen::VectorXd pooled_act;   // channel maxima after ReLU
    Eigen::VectorXd features;
    Eigen::VectorXd hidden;
    Eigen::VectorXd logits;
    double value = 0.0;
};

Eigen::VectorXd window_slice(const Eigen::MatrixXd& window, int t, int k) {
    const auto d = window.cols();
    Eigen::VectorXd v(k * d);
    for (int j = 0; j < k; ++j) {
        v.segment(j * d, d) = window.row(t + j).transpose();
    }
    return v;
}

PolicyTape run_policy(const PolicyConfig& cfg, const PolicyParams& p, const PolicyState& s) {
    PolicyTape tape;
    const int m = cfg.window;
    const int k = cfg.conv_kernel;
    const auto d = p.init.rows();
    tape.window = s.window;
    for (int r = 0; r < m - s.blocks; ++r) {
        tape.window.row(r) = p.init.col(0).transpose();
    }
    const int c = cfg.conv_channels;
    tape.pooled_act = Eigen::VectorXd::Constant(c, -std::numeric_limits<double>::infinity());
    tape.argmax_t.assign(static_cast<size_t>(c), 0);
    for (int t = 0; t + k <= m; ++t) {
        const Eigen::VectorXd u = p.conv_w * window_slice(tape.window, t, k) + p.conv_b.col(0);
        for (int ch = 0; ch < c; ++ch) {
            const double a = std::max(0.0, u(ch));
            if (a > tape.pooled_act(ch)) {
                tape.pooled_act(ch) = a;
                tape.argmax_t[static_cast<size_t>(ch)] = t;
            }
        }
    }
    tape.features.resize(c + d + 1);
    tape.features.head(c) = tape.pooled_act;
    tape.features.segment(c, d) = s.blocks > 0 ? s.pooled : Eigen::VectorXd(p.init.col(0));
    tape.features(c + d) = s.entropy;
    tape.hidden = (p.w1 * tape.features + p.b1.col(0)).array().tanh();
    tape.logits = p.w_pi * tape.hidden + p.b_pi.col(0);
    tape.value = (p.w_v * tape.hidden)(0) + p.b_v(0, 0);
    return tape;
}

}  // namespace

PolicyModel::PolicyModel(const PolicyConfig& cfg, int state_dim, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    if (state_dim < 1) {
        throw ConfigurationError("policy state dimension must be positive");
    }
    Rng rng(seed);
    const int c = cfg_.conv_channels;
    const int h = cfg_.mlp_hidden;
    const int in = cfg_.conv_kernel * state_dim;
    params_.conv_w = random_matrix(c, in, 1.0 / std::sqrt(in), rng);
    params_.conv_b = Eigen::MatrixXd::Zero(c, 1);
    params_.w1 = random_matrix(h, c + state_dim + 1, 1.0 / std::sqrt(c + state_dim + 1), rng);
    params_.b1 = Eigen::MatrixXd::Zero(h, 1);
    params_.w_pi = random_matrix(cfg_.actions.size(), h, 0.01, rng);
    params_.b_pi = Eigen::MatrixXd::Zero(cfg_.actions.size(), 1);
    params_.w_v = random_matrix(1, h, 1.0 / std::sqrt(h), rng);
    params_.b_v = Eigen::MatrixXd::Zero(1, 1);
    params_.init = random_matrix(state_dim, 1, 0.1, rng);
}

PolicyModel::PolicyModel(const PolicyConfig& cfg, PolicyParams params) : cfg_(cfg), params_(std::move(params)) {
    cfg_.validate();
    const auto d = params_.init.rows();
    const int c = cfg_.conv_channels;
    const int h = cfg_.mlp_hidden;
    const bool ok = params_.init.cols() == 1 && params_.conv_w.rows() == c &&
                    params_.conv_w.cols() == cfg_.conv_kernel * d && params_.conv_b.rows() == c &&
                    params_.w1.rows() == h && params_.w1.cols() == c + d + 1 && params_.b1.rows() == h &&
                    params_.w_pi.rows() == cfg_.actions.size() && params_.w_pi.cols() == h &&
                    params_.b_pi.rows() == cfg_.actions.size() && params_.w_v.rows() == 1 &&
                    params_.w_v.cols() == h && params_.b_v.size() == 1;
    if (!ok) {
        throw ConfigurationError("policy parameter shapes do not match the configuration");
    }
}

void PolicyModel::check_state(const PolicyState& s) const {
    if (s.window.rows() != cfg_.window || s.window.cols() != params_.init.rows()) {
        throw InvalidInput("policy state window has shape " + std::to_string(s.window.rows()) + "x" +
                           std::to_string(s.window.cols()) + ", expected " + std::to_string(cfg_.window) + "x" +
                           std::to_string(params_.init.rows()));
    }
    if (s.blocks < 0 || s.blocks > cfg_.window || s.pooled.size() != params_.init.rows()) {
        throw InvalidInput("malformed policy state");
    }
    if (!s.window.allFinite() || !s.pooled.allFinite() || !std::isfinite(s.entropy)) {
        throw InvalidInput("policy state must be finite");
    }
}

PolicyOutput PolicyModel::forward(const PolicyState& s) const {
    check_state(s);
    const auto tape = run_policy(cfg_, params_, s);
    PolicyOutput out;
    out.logits.assign(tape.logits.data(), tape.logits.data() + tape.logits.size());
    out.probs = softmax(out.logits);
    out.value = tape.value;
    return out;
}

void PolicyModel::backward(const PolicyState& s, std::span<const double> d_logits, double d_value,
                           PolicyParams& grad) const {
    check_state(s);
    if (static_cast<int>(d_logits.size()) != cfg_.actions.size()) {
        throw InvalidInput("one logit gradient per action is required");
    }
    const auto tape = run_policy(cfg_, params_, s);
    const auto& p = params_;
    const Eigen::Map<const Eigen::VectorXd> dl(d_logits.data(), static_cast<Eigen::Index>(d_logits.size()));
    grad.w_pi += dl * tape.hidden.transpose();
    grad.b_pi.col(0) += dl;
    grad.w_v.row(0) += d_value * tape.hidden.transpose();
    grad.b_v(0, 0) += d_value;
    const Eigen::VectorXd dh = p.w_pi.transpose() * dl + d_value * p.w_v.row(0).transpose();
    const Eigen::VectorXd dz = dh.array() * (1.0 - tape.hidden.array().square());
    grad.w1 += dz * tape.features.transpose();
    grad.b1.col(0) += dz;
    const Eigen::VectorXd dx = p.w1.transpose() * dz;
    const int c = cfg_.conv_channels;
    const int k = cfg_.conv_kernel;
    const auto d = p.init.rows();
    if (s.blocks == 0) {
        grad.init.col(0) += dx.segment(c, d);
    }
    const int padding = cfg_.window - s.blocks;
    for (int ch = 0; ch < c; ++ch) {
        if (tape.pooled_act(ch) <= 0.0) {
            continue;  // ReLU inactive at the winning position
        }
        const double du = dx(ch);
        const int t = tape.argmax_t[static_cast<size_t>(ch)];
        grad.conv_w.row(ch) += du * window_slice(tape.window, t, k).transpose();
        grad.conv_b(ch, 0) += du;
        for (int j = 0; j < k; ++j) {
            if (t + j < padding) {
                grad.init.col(0) += du * p.conv_w.row(ch).segment(j * d, d).transpose();
            }
        }
    }
}

void PolicyModel::zero_action_head() {
    params_.w_pi.setZero();
    params_.b_pi.setZero();
}

int PolicyModel::sample_action(const PolicyState& s, Rng& rng, double* log_prob) const {
    const auto out = forward(s);
    std::vector<double> lp(out.probs.size());
    for (size_t i = 0; i < lp.size(); ++i) {
        lp[i] = std::log(out.probs[i]);
    }
    const int a = gumbel_argmax(lp, rng);
    if (log_prob) {
        *log_prob = lp[static_cast<size_t>(a)];
    }
    return a;
}

int PolicyModel::greedy_action(const PolicyState& s) const {
    const auto out = forward(s);
    return static_cast<int>(std::max_element(out.probs.begin(), out.probs.end()) - out.probs.begin());
}

Checkpoint policy_checkpoint(const PolicyModel& p) {
    Checkpoint ckpt;
    ckpt.kind = "policy";
    ckpt.config = {{"policy", p.config().to_json()}, {"state_dim", p.state_dim()}};
    p.params().visit([&](const std::string& name, const Eigen::MatrixXd& m) { ckpt.add(name, m.cast<float>()); });
    return ckpt;
}

PolicyModel policy_from_checkpoint(const Checkpoint& ckpt) {
    try {
        const auto cfg = PolicyConfig::from_json(ckpt.config.at("policy"));
        PolicyParams params;
        params.visit([&](const std::string& name, Eigen::MatrixXd& m) { m = ckpt.at(name).cast<double>(); });
        return PolicyModel(cfg, std::move(params));
    } catch (const nlohmann::json::exception& e) {
        throw IngestionError("malformed policy checkpoint config: " + std::string(e.what()));
    } catch (const ConfigurationError& e) {
        throw IngestionError(std::string("policy checkpoint does not match its config: ") + e.what());
    }
}

void save_policy(const std::filesystem::path& dir, const PolicyModel& p) { save_checkpoint(dir, policy_checkpoint(p)); }

PolicyModel load_policy(const std::filesystem::path& dir) { return policy_from_checkpoint(load_checkpoint(dir, "policy")); }

double compute_reward(std::span<const double> block_log_probs, int max_length, double lambda1) {
    const int len = static_cast<int>(block_log_probs.size());
    if (len == 0) {
        throw InvalidInput("reward of an empty block");
    }
    if (len > max_length) {
        throw InvalidInput("block length exceeds the largest action");
    }
    double total = 0.0;
    for (double lp : block_log_probs) {
        if (!(lp <= 0.0)) {
            throw InvalidInput("log-probabilities must be <= 0");
        }
        total += lp;
    }
    return lambda1 * static_cast<double>(len) / max_length - std::exp(-total / len);
}

void PPOConfig::validate() const {
    if (!(clip > 0.0 && clip < 1.0)) {
        throw ConfigurationError("clip must lie in (0, 1)");
    }
    if (!(discount >= 0.0 && discount <= 1.0) || !(gae_lambda >= 0.0 && gae_lambda <= 1.0)) {
        throw ConfigurationError("discount and gae_lambda must lie in [0, 1]");
    }
    if (epochs < 1 || minibatch < 1 || episodes_per_update < 1) {
        throw ConfigurationError("epochs, minibatch and episodes_per_update must be positive");
    }
    if (!(learn_rate > 0.0) || !(value_coef >= 0.0)) {
        throw ConfigurationError("invalid PPO optimizer settings");
    }
}

nlohmann::json PPOConfig::to_json() const {
    return {{"clip", clip},           {"discount", discount},       {"gae_lambda", gae_lambda},
            {"epochs", epochs},       {"minibatch", minibatch},     {"lambda1", lambda1},
            {"learn_rate", learn_rate}, {"value_coef", value_coef}, {"max_grad_norm", max_grad_norm},
            {"episodes_per_update", episodes_per_update}};
}

std::vector<double> gae_advantages(std::span<const double> rewards, std::span<const double> values, double discount,
                                   double gae_lambda) {
    if (rewards.size() != values.size()) {
        throw InvalidInput("one value estimate per reward is required");
    }
    std::vector<double> adv(rewards.size());
    double running = 0.0;
    for (size_t i = rewards.size(); i-- > 0;) {
        const double next = i + 1 < values.size() ? values[i + 1] : 0.0;
        const double delta = rewards[i] + discount * next - values[i];
        running = delta + discount * gae_lambda * running;
        adv[i] = running;
    }
    return adv;
}

void normalize_advantages(std::span<double> advantages) {
    if (advantages.empty()) {
        return;
    }
    const double n = static_cast<double>(advantages.size());
    const double mean = std::accumulate(advantages.begin(), advantages.end(), 0.0) / n;
    double var = 0.0;
    for (double a : advantages) {
        var += (a - mean) * (a - mean);
    }
    const double sd = std::sqrt(var / n);
    for (double& a : advantages) {
        a = sd > 0.0 ? (a - mean) / sd : 0.0;
    }
}

void assign_advantages(std::span<Transition> episode, double discount, double gae_lambda) {
    std::vector<double> r, v;
    for (const auto& t : episode) {
        r.push_back(t.reward);
        v.push_back(t.value);
    }
    const auto adv = gae_advantages(r, v, discount, gae_lambda);
    for (size_t i = 0; i < episode.size(); ++i) {
        episode[i].advantage = adv[i];
        episode[i].ret = adv[i] + v[i];
    }
}

double clipped_objective(std::span<const double> new_log_probs, std::span<const double> old_log_probs,
                         std::span<const double> advantages, double clip, std::vector<double>* d_new_log_probs) {
    const size_t n = new_log_probs.size();
    if (old_log_probs.size() != n || advantages.size() != n || n == 0) {
        throw InvalidInput("clipped objective needs matching nonempty inputs");
    }
    if (d_new_log_probs) {
        d_new_log_probs->assign(n, 0.0);
    }
    double total = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double r = std::exp(new_log_probs[i] - old_log_probs[i]);
        const double a = advantages[i];
        const double unclipped = r * a;
        const double clipped = std::clamp(r, 1.0 - clip, 1.0 + clip) * a;
        total += std::min(unclipped, clipped);
        if (d_new_log_probs && unclipped <= clipped) {
            (*d_new_log_probs)[i] = unclipped / static_cast<double>(n);
        }
    }
    return total / static_cast<double>(n);
}

PPODiagnostics ppo_gradient(const PolicyModel& policy, std::span<const Transition> batch, const PPOConfig& cfg,
                            PolicyParams& grad) {
    if (batch.empty()) {
        throw InvalidInput("PPO batch is empty");
    }
    const size_t n = batch.size();
    std::vector<PolicyOutput> outs;
    std::vector<double> new_lp(n), old_lp(n), adv(n);
    PPODiagnostics diag;
    for (size_t i = 0; i < n; ++i) {
        outs.push_back(policy.forward(batch[i].state));
        new_lp[i] = std::log(outs[i].probs[static_cast<size_t>(batch[i].action)]);
        old_lp[i] = batch[i].log_prob;
        adv[i] = batch[i].advantage;
        const double r = std::exp(new_lp[i] - old_lp[i]);
        diag.mean_ratio += r / static_cast<double>(n);
        diag.clip_fraction += (std::abs(r - 1.0) > cfg.clip ? 1.0 : 0.0) / static_cast<double>(n);
    }
    std::vector<double> d_lp;
    diag.objective = clipped_objective(new_lp, old_lp, adv, cfg.clip, &d_lp);
    if (!std::isfinite(diag.objective)) {
        throw TrainingError("non-finite PPO objective");
    }
    std::vector<double> d_logits(static_cast<size_t>(policy.config().actions.size()));
    for (size_t i = 0; i < n; ++i) {
        const double err = outs[i].value - batch[i].ret;
        diag.value_loss += err * err / static_cast<double>(n);
        // d(-log pi(a))/d logits = p - onehot(a), scaled by the objective's derivative.
        for (size_t a = 0; a < d_logits.size(); ++a) {
            const double onehot = static_cast<int>(a) == batch[i].action ? 1.0 : 0.0;
            d_logits[a] = d_lp[i] * (outs[i].probs[a] - onehot);
        }
        const double d_value = cfg.value_coef * 2.0 * err / static_cast<double>(n);
        bool any = d_value != 0.0;
        for (double g : d_logits) {
            any = any || g != 0.0;
        }
        if (any) {
            policy.backward(batch[i].state, d_logits, d_value, grad);
        }
    }
    return diag;
}

PolicyOptimizer::PolicyOptimizer(const PolicyModel& policy, double learn_rate, double max_grad_norm)
    : learn_rate_(learn_rate), max_grad_norm_(max_grad_norm), m_(policy.params().zeros_like()),
      v_(policy.params().zeros_like()) {}

void PolicyOptimizer::step(PolicyModel& policy, PolicyParams grad) {
    ++step_;
    const double norm = std::sqrt(grad.squared_norm());
    if (!std::isfinite(norm)) {
        throw TrainingError("non-finite policy gradient");
    }
    if (max_grad_norm_ > 0.0 && norm > max_grad_norm_) {
        const double scale = max_grad_norm_ / norm;
        grad.visit([&](const std::string&, Eigen::MatrixXd& g) { g *= scale; });
    }
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_));
    std::vector<Eigen::MatrixXd*> gs, ms, vs, ps;
    grad.visit([&](const std::string&, Eigen::MatrixXd& x) { gs.push_back(&x); });
    m_.visit([&](const std::string&, Eigen::MatrixXd& x) { ms.push_back(&x); });
    v_.visit([&](const std::string&, Eigen::MatrixXd& x) { vs.push_back(&x); });
    policy.params().visit([&](const std::string&, Eigen::MatrixXd& x) { ps.push_back(&x); });
    for (size_t i = 0; i < gs.size(); ++i) {
        *ms[i] = b1 * *ms[i] + (1.0 - b1) * *gs[i];
        *vs[i] = b2 * *vs[i] + (1.0 - b2) * gs[i]->cwiseProduct(*gs[i]);
        ps[i]->array() -= learn_rate_ * (ms[i]->array() / bc1) / ((vs[i]->array() / bc2).sqrt() + eps);
    }
}

PPODiagnostics ppo_update(PolicyModel& policy, std::vector<Transition> batch, const PPOConfig& cfg,
                          PolicyOptimizer& opt, Rng& rng) {
    cfg.validate();
    if (batch.empty()) {
        throw InvalidInput("PPO batch is empty");
    }
    std::vector<double> adv;
    for (const auto& t : batch) {
        adv.push_back(t.advantage);
    }
    normalize_advantages(adv);
    for (size_t i = 0; i < batch.size(); ++i) {
        batch[i].advantage = adv[i];
    }
    PPODiagnostics first;
    std::vector<size_t> order(batch.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<Transition> mb;
    for (int e = 0; e < cfg.epochs; ++e) {
        for (size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[rng.below(i)]);
        }
        for (size_t lo = 0; lo < order.size(); lo += static_cast<size_t>(cfg.minibatch)) {
            mb.clear();
            for (size_t j = lo; j < std::min(order.size(), lo + static_cast<size_t>(cfg.minibatch)); ++j) {
                mb.push_back(batch[order[j]]);
            }
            auto grad = policy.params().zeros_like();
            const auto diag = ppo_gradient(policy, mb, cfg, grad);
            if (e == 0 && lo == 0) {
                first = diag;
            }
            // ppo_gradient returns the gradient of the loss to minimize.
            opt.step(policy, std::move(grad));
        }
    }
    return first;
}

RiggedBandit::RiggedBandit(int state_dim, int window, int best_length)
    : state_dim_(state_dim), window_(window), best_(best_length) {}

PolicyState RiggedBandit::state() const { return extract_state(Eigen::MatrixXd(0, state_dim_), {}, window_); }

EnvStep RiggedBandit::step(int block_length, Rng&) {
    return EnvStep{block_length == best_ ? 1.0 : 0.0, true, block_length};
}

GenerationEnvironment::GenerationEnvironment(const Denoiser& model, std::vector<TokenSequence> prompts, int length,
                                             SamplerConfig sampler, NoiseSchedule schedule, int window, int max_length,
                                             double lambda1)
    : model_(model), prompts_(std::move(prompts)), length_(length), sampler_(sampler), schedule_(std::move(schedule)),
      window_(window), max_length_(max_length), lambda1_(lambda1) {
    if (prompts_.empty()) {
        prompts_.push_back({});
    }
    if (length_ < 1) {
        throw ConfigurationError("episodes must generate at least one token");
    }
    sampler_.validate();
}

void GenerationEnvironment::reset(Rng& rng) {
    tokens_ = prompts_[rng.below(prompts_.size())];
    starts_.clear();
    if (!tokens_.empty()) {
        starts_.push_back(0);
    }
    remaining_ = length_;
}

PolicyState GenerationEnvironment::state() const { return sequence_state(model_, tokens_, starts_, window_); }

EnvStep GenerationEnvironment::step(int block_length, Rng& rng) {
    if (remaining_ <= 0) {
        throw InvalidInput("episode already finished");
    }
    const int len = std::min(block_length, remaining_);
    const int keep = std::max(0, static_cast<int>(tokens_.size()) + len - model_.context_length());
    const std::span<const int> prefix = std::span<const int>(tokens_).subspan(static_cast<size_t>(keep));
    const auto block = generate_block(model_, prefix, len, schedule_, sampler_, rng);
    starts_.push_back(static_cast<int>(tokens_.size()));
    tokens_.insert(tokens_.end(), block.begin(), block.end());
    remaining_ -= len;
    const auto lp = model_.token_log_probs(std::span<const int>(tokens_).subspan(static_cast<size_t>(keep)));
    const std::span<const double> block_lp(lp.data() + lp.size() - static_cast<size_t>(len), static_cast<size_t>(len));
    return EnvStep{compute_reward(block_lp, max_length_, lambda1_), remaining_ == 0, len};
}

nlohmann::json episode_record_json(const EpisodeRecord& r) {
    nlohmann::json hist = nlohmann::json::object();
    for (auto [len, count] : r.length_histogram) {
        hist[std::to_string(len)] = count;
    }
    return {{"episode", r.episode}, {"mean_reward", r.mean_reward}, {"length_histogram", hist}};
}

PolicyTrainResult train_policy(PolicyModel policy, PolicyEnvironment& env, int episodes, const PPOConfig& cfg,
                               uint64_t seed, const std::function<void(const EpisodeRecord&)>& on_episode) {
    cfg.validate();
    if (episodes < 0) {
        throw ConfigurationError("episodes must be nonnegative");
    }
    PolicyTrainResult result{std::move(policy), {}, {}};
    PolicyOptimizer opt(result.policy, cfg.learn_rate, cfg.max_grad_norm);
    Rng rng(derive_seed(seed, 1));
    Rng update_rng(derive_seed(seed, 2));
    const auto& actions = result.policy.config().actions;
    std::vector<Transition> batch;
    int pending = 0;
    for (int ep = 1; ep <= episodes; ++ep) {
        env.reset(rng);
        std::vector<Transition> episode;
        EpisodeRecord rec;
        rec.episode = ep;
        for (;;) {
            Transition t;
            t.state = env.state();
            t.action = result.policy.sample_action(t.state, rng, &t.log_prob);
            t.value = result.policy.forward(t.state).value;
            const auto st = env.step(actions.lengths[static_cast<size_t>(t.action)], rng);
            t.reward = st.reward;
            ++rec.length_histogram[st.length];
            rec.mean_reward += st.reward;
            episode.push_back(std::move(t));
            if (st.done) {
                break;
            }
        }
        rec.mean_reward /= static_cast<double>(episode.size());
        assign_advantages(episode, cfg.discount, cfg.gae_lambda);
        std::move(episode.begin(), episode.end(), std::back_inserter(batch));
        result.trace.push_back(rec);
        if (on_episode) {
            on_episode(rec);
        }
        if (++pending == cfg.episodes_per_update || ep == episodes) {
            result.updates.push_back(ppo_update(result.policy, std::move(batch), cfg, opt, update_rng));
            batch.clear();
            pending = 0;
        }
    }
    return result;
}

PolicyChooser::PolicyChooser(const PolicyModel& policy, const Denoiser& model, bool greedy)
    : policy_(policy), model_(model), greedy_(greedy) {}

int PolicyChooser::next_block_length(const GenerationState& state, Rng& rng) {
    std::vector<int> starts;
    if (state.prompt_length > 0) {
        starts.push_back(0);
    }
    starts.insert(starts.end(), state.block_starts.begin(), state.block_starts.end());
    const auto s = sequence_state(model_, state.tokens, starts, policy_.config().window);
    const int a = greedy_ ? policy_.greedy_action(s) : policy_.sample_action(s, rng);
    return policy_.config().actions.lengths[static_cast<size_t>(a)];
}

BlockLayout policy_layout(const PolicyModel& policy, const Denoiser& model, std::span<const int> tokens, int prompt,
                          Rng* rng) {
    const int n = static_cast<int>(tokens.size());
    if (prompt < 0 || prompt > n) {
        throw InvalidInput("prompt length outside the sequence");
    }
    BlockLayout layout;
    std::vector<int> starts;
    int at = 0;
    if (prompt > 0) {
        layout.lengths.push_back(prompt);
        starts.push_back(0);
        at = prompt;
    }
    while (at < n) {
        const auto s = sequence_state(model, tokens.subspan(0, static_cast<size_t>(at)), starts, policy.config().window);
        const int a = rng ? policy.sample_action(s, *rng) : policy.greedy_action(s);
        const int len = std::min(policy.config().actions.lengths[static_cast<size_t>(a)], n - at);
        starts.push_back(at);
        layout.lengths.push_back(len);
        at += len;
    }
    return layout;
}

}  // namespace ctrldiff
