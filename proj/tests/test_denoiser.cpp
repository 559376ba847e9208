#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "ctrldiff/denoiser.hpp"
#include "ctrldiff/errors.hpp"

using namespace ctrldiff;

namespace {

DenoiserConfig small_config() {
    DenoiserConfig c;
    c.layers = 2;
    c.hidden_dim = 16;
    c.heads = 2;
    c.context_length = 12;
    c.warmup_steps = 5;
    c.learn_rate = 3e-3;
    c.batch_size = 4;
    c.train_block_sizes = {1, 2, 4};
    return c;
}

const Vocab kVocab = Vocab::mask_last(6);

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("ctrldiff_test_" + name);
    std::filesystem::remove_all(p);
    return p;
}

// Perturbs the initialization so attention patterns are far from uniform.
void perturb(nn::Transformer<double>& net, uint64_t seed, double scale) {
    Rng rng(seed);
    for (auto* p : net.parameters()) {
        for (Eigen::Index i = 0; i < p->size(); ++i) {
            p->data()[i] += scale * rng.normal();
        }
    }
}

// Exact NELBO per token for one example by enumerating every nonempty mask
// subset of every block: subset S of a block of length n has weight
// 1 / (|S| * C(n, |S|)).
double enumerated_nelbo(const nn::Transformer<double>& net, const TokenSequence& x0, const BlockLayout& layout) {
    double total = 0.0;
    const auto starts = layout.starts();
    for (size_t b = 0; b < starts.size(); ++b) {
        const int n = layout.lengths[b];
        for (int subset = 1; subset < (1 << n); ++subset) {
            NoisedExample ex{x0, x0, layout, std::vector<double>(x0.size(), 0.0)};
            int k = 0;
            for (int i = 0; i < n; ++i) {
                k += (subset >> i) & 1;
            }
            double binom = 1.0;
            for (int i = 0; i < k; ++i) {
                binom = binom * (n - i) / (i + 1);
            }
            for (int i = 0; i < n; ++i) {
                if ((subset >> i) & 1) {
                    const auto pos = static_cast<size_t>(starts[b] + i);
                    ex.xt[pos] = kVocab.mask_id;
                    ex.weight[pos] = 1.0 / (k * binom);
                }
            }
            // denoiser_loss divides by the sequence length; undo that per term.
            total += denoiser_loss<double>(net, kVocab, std::span(&ex, 1), nullptr) * static_cast<double>(x0.size());
        }
    }
    return total / static_cast<double>(x0.size());
}

}  // namespace

TEST_CASE("denoise returns finite logits over non-mask tokens") {
    const Denoiser model(small_config(), kVocab, 7);
    const TokenSequence prefix = {0, 1, 2, 3};
    const TokenSequence block = {5, 4, 5};
    const auto out = model.denoise(block, prefix);
    CHECK(out.logits.rows() == 3);
    CHECK(out.logits.cols() == kVocab.token_count());
    CHECK(out.hidden.rows() == 3);
    CHECK(out.hidden.cols() == 16);
    CHECK(out.logits.allFinite());
    // Unmasked block positions carry their observed token.
    Eigen::Index arg = 0;
    out.logits.row(1).maxCoeff(&arg);
    CHECK(kVocab.from_output_index(static_cast<int>(arg)) == 4);
    CHECK(std::exp(log_softmax_rows(out.logits)(1, arg)) == 1.0);

    const auto again = model.denoise(block, prefix);
    CHECK((again.logits - out.logits).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("context overflow raises a capacity error") {
    const Denoiser model(small_config(), kVocab, 1);
    const TokenSequence prefix(10, 0);
    const TokenSequence block(3, kVocab.mask_id);
    CHECK_THROWS_AS(model.denoise(block, prefix), CapacityError);
    CHECK_THROWS_AS(model.hidden_states(TokenSequence(13, 1)), CapacityError);
    CHECK_THROWS_AS(model.denoise(block, TokenSequence{kVocab.mask_id}), InvalidInput);
}

TEST_CASE("block attention sees the prefix but not later blocks") {
    const Denoiser model(small_config(), kVocab, 3);
    const TokenSequence prefix = {1, 2};
    const TokenSequence block = {5, 5};
    const auto a = model.denoise(block, prefix).logits;
    const auto b = model.denoise(block, TokenSequence{1, 3}).logits;
    CHECK((a - b).cwiseAbs().maxCoeff() > 0.0);

    // In a packed layout, tokens after a block's start do not affect it.
    const TokenSequence x0 = {0, 1, 2, 3, 4, 0};
    const TokenSequence xt = {5, 5, 5, 5, 5, 5};
    TokenSequence x0_alt = x0;
    x0_alt[4] = 1;
    x0_alt[5] = 2;
    const BlockLayout layout{{2, 2, 2}};
    const auto la = model.layout_logits(x0, xt, layout);
    const auto lb = model.layout_logits(x0_alt, xt, layout);
    CHECK((la.topRows(4) - lb.topRows(4)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("packed layout logits agree with per-block denoising") {
    const Denoiser model(small_config(), kVocab, 11);
    const TokenSequence x0 = {0, 1, 2, 3, 4, 0, 1, 2, 3};
    const TokenSequence xt = {5, 1, 5, 5, 4, 5, 1, 5, 5};
    const BlockLayout layout{{3, 1, 4, 1}};
    const auto packed = model.layout_logits(x0, xt, layout);
    const auto reference = model.BlockDenoiser::layout_logits(x0, xt, layout);
    CHECK((packed - reference).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("token log-probs equal single-mask denoising") {
    const Denoiser model(small_config(), kVocab, 5);
    const TokenSequence x = {3, 0, 4, 4, 1};
    const auto lp = model.token_log_probs(x);
    REQUIRE(lp.size() == x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        const TokenSequence mask1{kVocab.mask_id};
        const auto logits = model.x0_logits(mask1, std::span(x).first(i));
        const double expected = log_softmax_rows(logits)(0, kVocab.to_output_index(x[i]));
        CHECK(lp[i] == doctest::Approx(expected).epsilon(1e-5));
    }
}

TEST_CASE("hidden states are prefix-causal") {
    const Denoiser model(small_config(), kVocab, 2);
    const TokenSequence a = {0, 1, 2, 3, 4};
    TokenSequence b = a;
    b.back() = 0;
    const auto ha = model.hidden_states(a);
    const auto hb = model.hidden_states(b);
    CHECK(ha.rows() == 5);
    CHECK(ha.cols() == 16);
    CHECK(ha.allFinite());
    CHECK((ha.topRows(4) - hb.topRows(4)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((ha.row(4) - hb.row(4)).cwiseAbs().maxCoeff() > 0.0);
    CHECK((model.hidden_states(a) - ha).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("training loss gradients match central differences") {
    // 2 layers, hidden 16, K = 6, length 8.
    const auto tcfg = small_config().transformer(kVocab);
    auto net = nn::Transformer<double>::initialized(tcfg, 21);
    perturb(net, 22, 0.3);
    Rng rng(23);
    std::vector<NoisedExample> examples;
    for (int e = 0; e < 2; ++e) {
        TokenSequence x0(8);
        for (auto& t : x0) {
            t = static_cast<int>(rng.below(5));
        }
        examples.push_back(make_noised_example(x0, BlockLayout{{3, 1, 4}}, LossEstimator::masked_count,
                                               NoiseSchedule::log_linear(), kVocab, rng));
    }
    auto grad = net.zeros_like();
    denoiser_loss<double>(net, kVocab, examples, &grad);
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
        const double up = denoiser_loss<double>(net, kVocab, examples, nullptr);
        x = saved - h;
        const double down = denoiser_loss<double>(net, kVocab, examples, nullptr);
        x = saved;
        const double fd = (up - down) / (2 * h);
        const double an = grads[pi]->data()[idx];
        if (std::abs(fd) + std::abs(an) < 1e-9) {
            continue;  // coordinates outside the graph (unused embedding rows)
        }
        worst = std::max(worst, std::abs(fd - an) / (std::abs(fd) + std::abs(an)));
        ++checked;
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("both loss estimators are unbiased for the enumerated objective") {
    auto net = nn::Transformer<double>::initialized(small_config().transformer(kVocab), 31);
    perturb(net, 32, 0.2);
    const TokenSequence x0 = {0, 3, 1, 4, 2};
    const BlockLayout layout{{4, 1}};
    const double exact = enumerated_nelbo(net, x0, layout);

    for (auto estimator : {LossEstimator::masked_count, LossEstimator::time_sampled}) {
        Rng rng(33);
        const int n = 20000;
        double sum = 0.0;
        double sum_sq = 0.0;
        for (int i = 0; i < n; ++i) {
            const auto ex = make_noised_example(x0, layout, estimator, NoiseSchedule::log_linear(), kVocab, rng);
            const double v = denoiser_loss<double>(net, kVocab, std::span(&ex, 1), nullptr);
            sum += v;
            sum_sq += v * v;
        }
        const double mean = sum / n;
        const double stderr_ = std::sqrt((sum_sq / n - mean * mean) / n);
        CAPTURE(static_cast<int>(estimator));
        CHECK(std::abs(mean - exact) < 5 * stderr_ + 1e-9);
    }
}

TEST_CASE("masked-count noising masks between 1 and L_b positions per block") {
    Rng rng(4);
    const TokenSequence x0(10, 2);
    const BlockLayout layout{{4, 4, 2}};
    for (int trial = 0; trial < 200; ++trial) {
        const auto ex = make_noised_example(x0, layout, LossEstimator::masked_count, NoiseSchedule::log_linear(),
                                            kVocab, rng);
        const auto starts = layout.starts();
        for (size_t b = 0; b < starts.size(); ++b) {
            int masked = 0;
            for (int i = starts[b]; i < starts[b] + layout.lengths[b]; ++i) {
                const bool m = kVocab.is_mask(ex.xt[static_cast<size_t>(i)]);
                masked += m;
                CHECK((ex.weight[static_cast<size_t>(i)] > 0) == m);
            }
            CHECK(masked >= 1);
            CHECK(masked <= layout.lengths[b]);
        }
    }
}

TEST_CASE("block diffusion mask structure") {
    const BlockLayout layout{{2, 3}};
    const auto m = block_diffusion_mask(layout);
    REQUIRE(m.size() == 10);
    // noised row 3 (block 1) sees its block and clean rows 0..1
    CHECK(m.allowed(3, 2));
    CHECK(m.allowed(3, 4));
    CHECK(m.allowed(3, 5 + 1));
    CHECK_FALSE(m.allowed(3, 5 + 2));
    CHECK_FALSE(m.allowed(3, 0));
    // noised row 0 (block 0) sees no clean rows
    CHECK_FALSE(m.allowed(0, 5));
    // clean rows are causal and never see noised rows
    CHECK(m.allowed(5 + 3, 5 + 3));
    CHECK_FALSE(m.allowed(5 + 3, 5 + 4));
    CHECK_FALSE(m.allowed(5 + 3, 3));
}

TEST_CASE("sample_layout covers the sequence and truncates the tail") {
    Rng rng(5);
    const std::vector<int> sizes = {4, 8, 16};
    for (int trial = 0; trial < 50; ++trial) {
        const auto layout = sample_layout(30, sizes, rng);
        CHECK(layout.total() == 30);
        for (size_t i = 0; i + 1 < layout.lengths.size(); ++i) {
            CHECK(std::find(sizes.begin(), sizes.end(), layout.lengths[i]) != sizes.end());
        }
    }
}

TEST_CASE("training is deterministic and zero steps keeps the initialization") {
    const auto cfg = small_config();
    TokenSequence stream;
    for (int i = 0; i < 400; ++i) {
        stream.push_back((i * 7 + i / 3) % 5);
    }
    auto run = [&](int steps, uint64_t seed) {
        BatchStream bs(stream, 12, cfg.batch_size, 9);
        return train_denoiser(cfg, kVocab, bs, NoiseSchedule::log_linear(), steps, seed);
    };
    const auto z1 = run(0, 4);
    const auto z2 = run(0, 4);
    CHECK(z1.loss_trace.empty());
    CHECK_FALSE(z1.model.trained());
    const auto init = Denoiser(cfg, kVocab, derive_seed(4, 1));
    auto a = z1.model.net().parameters();
    auto b = init.net().parameters();
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK((*a[i] - *b[i]).cwiseAbs().maxCoeff() == 0.0f);
    }
    (void)z2;

    const auto r1 = run(6, 4);
    const auto r2 = run(6, 4);
    const auto r3 = run(6, 5);
    CHECK(r1.loss_trace == r2.loss_trace);
    CHECK(r1.loss_trace != r3.loss_trace);
    CHECK(r1.model.trained());
}

TEST_CASE("training reduces the loss on a periodic stream") {
    auto cfg = small_config();
    cfg.estimator = LossEstimator::masked_count;
    TokenSequence stream;
    for (int i = 0; i < 2000; ++i) {
        stream.push_back(i % 5);
    }
    BatchStream bs(stream, 12, 8, 1);
    const auto r = train_denoiser(cfg, kVocab, bs, NoiseSchedule::log_linear(), 300, 3);
    auto median = [](std::vector<double> v) {
        std::nth_element(v.begin(), v.begin() + static_cast<long>(v.size() / 2), v.end());
        return v[v.size() / 2];
    };
    const std::vector<double> head(r.loss_trace.begin(), r.loss_trace.begin() + 30);
    const std::vector<double> tail(r.loss_trace.end() - 30, r.loss_trace.end());
    CHECK(median(tail) < 0.5 * median(head));
}

TEST_CASE("non-finite loss aborts training") {
    Denoiser model(small_config(), kVocab, 1);
    model.net().tok_emb(0, 0) = std::numeric_limits<float>::quiet_NaN();
    DenoiserTrainer trainer(model, NoiseSchedule::log_linear(), 1);
    const TokenBatch batch = {TokenSequence{0, 1, 2, 3, 0, 1, 2, 3}};
    CHECK_THROWS_AS(trainer.step(batch), TrainingError);
}

TEST_CASE("checkpoints round-trip exactly") {
    const Denoiser model(small_config(), kVocab, 13);
    const auto dir = temp_dir("denoiser_ckpt");
    model.save(dir);
    {
        std::ifstream in(dir / "manifest.json");
        const auto manifest = nlohmann::json::parse(in);
        CHECK(manifest.at("kind") == "denoiser");
        for (const auto& t : manifest.at("tensors")) {
            CHECK(t.at("dtype") == "f32le");
            CHECK(std::filesystem::exists(dir / t.at("file").get<std::string>()));
        }
    }
    const auto loaded = Denoiser::load(dir);
    const TokenSequence prefix = {1, 2, 3};
    const TokenSequence block = {5, 5, 0};
    CHECK((loaded.x0_logits(block, prefix) - model.x0_logits(block, prefix)).cwiseAbs().maxCoeff() == 0.0);
    CHECK(loaded.config().to_json() == model.config().to_json());

    std::filesystem::resize_file(dir / "tok_emb.bin", 8);
    CHECK_THROWS_AS(Denoiser::load(dir), IngestionError);
    CHECK_THROWS_AS(Denoiser::load(temp_dir("missing")), IngestionError);
    std::filesystem::remove_all(dir);
}
