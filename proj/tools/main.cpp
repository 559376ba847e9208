// ctrldiff: training, generation, evaluation and verification subcommands.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ctrldiff/block_policy.hpp"
#include "ctrldiff/blockgen.hpp"
#include "ctrldiff/checkpoint.hpp"
#include "ctrldiff/corpus.hpp"
#include "ctrldiff/denoiser.hpp"
#include "ctrldiff/errors.hpp"
#include "ctrldiff/eval_metrics.hpp"
#include "ctrldiff/guidance.hpp"
#include "verify.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace ctrldiff;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) {
        return "";
    }
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

// key=value lines become "--key value" arguments placed before the command
// line ones, so explicit flags win.
std::vector<std::string> config_file_args(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IngestionError("cannot read config file " + path.string());
    }
    std::vector<std::string> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line.resize(hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigurationError(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
        }
        out.push_back("--" + trim(line.substr(0, eq)));
        out.push_back(trim(line.substr(eq + 1)));
    }
    return out;
}

std::vector<std::string> expand_args(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    for (size_t i = 0; i < args.size(); ++i) {
        std::string path;
        if (args[i] == "--config" && i + 1 < args.size()) {
            path = args[i + 1];
        } else if (args[i].rfind("--config=", 0) == 0) {
            path = args[i].substr(9);
        }
        if (!path.empty() && !args.empty()) {
            const auto extra = config_file_args(path);
            args.insert(args.begin() + 1, extra.begin(), extra.end());
            break;
        }
    }
    return args;
}

// Every option of the subcommand with its merged value.
json merged_config(const CLI::App& sub, uint64_t seed) {
    json j = json::object();
    for (const auto* opt : sub.get_options()) {
        const auto name = opt->get_single_name();
        if (name.empty() || name == "help") {
            continue;
        }
        j[name] = opt->count() > 0 ? opt->as<std::string>() : opt->get_default_str();
    }
    j["seed"] = seed;
    j["subcommand"] = sub.get_name();
    return j;
}

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

void prepare_out_dir(const fs::path& dir) {
    fs::create_directories(dir);
    if (!fs::is_directory(dir)) {
        throw IngestionError("cannot create output directory " + dir.string());
    }
}

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) {
            continue;
        }
        try {
            out.push_back(std::stoi(item));
        } catch (const std::exception&) {
            throw ConfigurationError("expected a comma-separated integer list, got '" + s + "'");
        }
    }
    if (out.empty()) {
        throw ConfigurationError("empty integer list");
    }
    return out;
}

LossEstimator estimator_from_name(const std::string& name) {
    if (name == "masked-count") {
        return LossEstimator::masked_count;
    }
    if (name == "time-sampled") {
        return LossEstimator::time_sampled;
    }
    throw ConfigurationError("unknown estimator '" + name + "' (masked-count or time-sampled)");
}

SamplerMode sampler_from_name(const std::string& name) {
    if (name == "ancestral") {
        return SamplerMode::ancestral;
    }
    if (name == "first-hitting") {
        return SamplerMode::first_hitting;
    }
    throw ConfigurationError("unknown sampler '" + name + "' (ancestral or first-hitting)");
}

Tokenizer::UnknownPolicy unknown_from_name(const std::string& name) {
    if (name == "error") {
        return Tokenizer::UnknownPolicy::error;
    }
    if (name == "space") {
        return Tokenizer::UnknownPolicy::map_to_space;
    }
    throw ConfigurationError("unknown character policy '" + name + "' (error or space)");
}

struct BlockSpec {
    int fixed = 0;          // > 0 for fixed:N
    std::string policy;     // checkpoint path for policy:PATH
};

BlockSpec parse_block_spec(const std::string& s) {
    BlockSpec b;
    if (s.rfind("fixed:", 0) == 0) {
        try {
            b.fixed = std::stoi(s.substr(6));
        } catch (const std::exception&) {
            b.fixed = 0;
        }
        if (b.fixed < 1) {
            throw ConfigurationError("block length in '" + s + "' must be a positive integer");
        }
        return b;
    }
    if (s.rfind("policy:", 0) == 0 && s.size() > 7) {
        b.policy = s.substr(7);
        return b;
    }
    throw ConfigurationError("block spec must be fixed:N or policy:PATH, got '" + s + "'");
}

// "none" or LABEL:GAMMA:MODE.
std::optional<GuidanceConfig> parse_guidance(const std::string& s) {
    if (s == "none") {
        return std::nullopt;
    }
    const auto a = s.find(':');
    const auto b = a == std::string::npos ? a : s.find(':', a + 1);
    if (b == std::string::npos) {
        throw ConfigurationError("guidance must be none or LABEL:GAMMA:MODE, got '" + s + "'");
    }
    GuidanceConfig g;
    try {
        g.target_label = std::stoi(s.substr(0, a));
        g.gamma = std::stod(s.substr(a + 1, b - a - 1));
    } catch (const std::exception&) {
        throw ConfigurationError("guidance must be none or LABEL:GAMMA:MODE, got '" + s + "'");
    }
    g.approx = guidance_approx_from_name(s.substr(b + 1));
    return g;
}

std::vector<std::string> read_lines(const fs::path& path) {
    std::istringstream in(read_text_file(path));
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (!line.empty()) {
            out.push_back(line);
        }
    }
    return out;
}

void require_same_vocab(const Vocab& a, const Vocab& b, const std::string& what) {
    if (!(a == b)) {
        throw ConfigurationError("vocabulary of the " + what + " (" + std::to_string(b.size_total) +
                                 " categories) does not match the denoiser's (" + std::to_string(a.size_total) + ")");
    }
}

// ---------------------------------------------------------------------------

struct CorpusArgs {
    std::string kind = "text";
    std::string out;
    long chars = 1000000;
    long docs = 20000;
};

int cmd_make_corpus(const CorpusArgs& a, uint64_t seed) {
    if (a.kind == "text") {
        if (a.chars < 1) {
            throw ConfigurationError("chars must be positive");
        }
        write_file_atomic(a.out, synthetic_text8(static_cast<size_t>(a.chars), seed));
    } else if (a.kind == "labeled") {
        if (a.docs < 1) {
            throw ConfigurationError("docs must be positive");
        }
        std::ostringstream out;
        write_labeled_corpus(out, synthetic_sentiment(static_cast<size_t>(a.docs), seed));
        write_file_atomic(a.out, out.str());
    } else {
        throw ConfigurationError("corpus kind must be text or labeled, got '" + a.kind + "'");
    }
    return 0;
}

struct DenoiserArgs {
    std::string corpus;
    std::string out;
    int steps = 10000;
    DenoiserConfig cfg;
    std::string block_sizes = "1,4,8,16";
    std::string estimator = "masked-count";
    std::string unknown = "error";
    int log_every = 100;
    int eval_chunks = 100;
    int eval_block = 4;
    int eval_mc = 1;
};

int cmd_train_denoiser(DenoiserArgs a, uint64_t seed, const json& config) {
    a.cfg.train_block_sizes = parse_int_list(a.block_sizes);
    a.cfg.estimator = estimator_from_name(a.estimator);
    a.cfg.validate();
    if (a.steps < 0 || a.log_every < 1) {
        throw ConfigurationError("steps must be nonnegative and log-every positive");
    }
    const Tokenizer tok = Tokenizer::text8(unknown_from_name(a.unknown));
    const auto split = split_text8(read_text_file(a.corpus), tok);
    const fs::path out(a.out);
    prepare_out_dir(out);
    write_json(out / "config.json", config);

    BatchStream stream(split.train, a.cfg.context_length, a.cfg.batch_size, derive_seed(seed, 1));
    const auto schedule = NoiseSchedule::log_linear();
    std::string metrics;
    double acc = 0.0;
    int acc_n = 0;
    const auto t0 = Clock::now();
    auto result = train_denoiser(a.cfg, tok.vocab(), stream, schedule, a.steps, derive_seed(seed, 2),
                                 [&](int step, double loss) {
                                     acc += loss;
                                     ++acc_n;
                                     if (step % a.log_every == 0 || step == a.steps) {
                                         metrics += json{{"step", step}, {"loss", acc / acc_n}}.dump() + "\n";
                                         std::fprintf(stderr, "step %d loss %.4f %.0fs\n", step, acc / acc_n,
                                                      seconds_since(t0));
                                         acc = 0.0;
                                         acc_n = 0;
                                     }
                                 });
    const int block = a.eval_block;
    const auto bound = chunked_nll_bound(
        result.model, split.valid, a.cfg.context_length, a.eval_chunks,
        [block](std::span<const int> c) { return BlockLayout::fixed(static_cast<int>(c.size()), block); }, schedule,
        a.eval_mc, derive_seed(seed, 3));
    metrics += json{{"step", a.steps},
                    {"valid_bpc", bound.bpc()},
                    {"valid_bpc_stderr", bound.stderr_ / static_cast<double>(bound.tokens) / std::log(2.0)},
                    {"valid_tokens", bound.tokens},
                    {"eval_block", block}}
                   .dump() +
               "\n";
    std::fprintf(stderr, "validation BPC %.4f over %ld tokens\n", bound.bpc(), bound.tokens);
    result.model.save(out / "checkpoint");
    write_file_atomic(out / "metrics.jsonl", metrics);
    return 0;
}

struct ClassifierArgs {
    std::string corpus;
    std::string out;
    int steps = 4000;
    ClassifierConfig cfg;
    double valid_fraction = 0.1;
    int log_every = 100;
};

int cmd_train_classifier(const ClassifierArgs& a, uint64_t seed, const json& config) {
    a.cfg.validate();
    if (a.steps < 0 || a.log_every < 1 || !(a.valid_fraction > 0.0 && a.valid_fraction < 1.0)) {
        throw ConfigurationError("steps must be nonnegative, log-every positive and valid-fraction in (0, 1)");
    }
    auto docs = read_labeled_corpus(a.corpus, a.cfg.class_count);
    const auto n_valid = static_cast<size_t>(static_cast<double>(docs.size()) * a.valid_fraction);
    if (n_valid == 0 || n_valid >= docs.size()) {
        throw ConfigurationError("corpus " + a.corpus + " is too small to split");
    }
    const std::vector<LabeledExample> valid(docs.end() - static_cast<long>(n_valid), docs.end());
    docs.resize(docs.size() - n_valid);

    const fs::path out(a.out);
    prepare_out_dir(out);
    write_json(out / "config.json", config);
    const Tokenizer tok = Tokenizer::text8(Tokenizer::UnknownPolicy::map_to_space);
    const auto schedule = NoiseSchedule::log_linear();
    std::string metrics;
    double acc = 0.0;
    int acc_n = 0;
    const auto t0 = Clock::now();
    const auto result = train_classifier(a.cfg, tok, docs, schedule, a.steps, derive_seed(seed, 1),
                                         [&](int step, double loss) {
                                             acc += loss;
                                             ++acc_n;
                                             if (step % a.log_every == 0 || step == a.steps) {
                                                 metrics += json{{"step", step}, {"loss", acc / acc_n}}.dump() + "\n";
                                                 std::fprintf(stderr, "step %d loss %.4f %.0fs\n", step, acc / acc_n,
                                                              seconds_since(t0));
                                                 acc = 0.0;
                                                 acc_n = 0;
                                             }
                                         });
    json final = {{"step", a.steps}, {"valid_docs", valid.size()}};
    for (double t : {0.0, 0.5, 0.9}) {
        char key[32];
        std::snprintf(key, sizeof(key), "valid_accuracy_t%.1f", t);
        final[key] = classifier_accuracy(result.model, tok, valid, schedule, t, derive_seed(seed, 2));
    }
    metrics += final.dump() + "\n";
    std::fprintf(stderr, "%s\n", final.dump().c_str());
    save_classifier(out / "checkpoint", result.model);
    write_file_atomic(out / "metrics.jsonl", metrics);
    return 0;
}

struct SamplerArgs {
    std::string sampler = "first-hitting";
    int steps_per_block = 16;
    double nucleus = 0.9;

    SamplerConfig config(uint64_t seed) const {
        SamplerConfig c;
        c.mode = sampler_from_name(sampler);
        c.steps_per_block = steps_per_block;
        c.nucleus_p = nucleus;
        c.rng_seed = seed;
        c.validate();
        return c;
    }
};

struct PolicyArgs {
    std::string denoiser;
    std::string corpus;
    std::string out;
    int episodes = 2000;
    int length = 64;
    int prompt_length = 16;
    int prompts = 256;
    std::string actions = "4,8,16";
    PolicyConfig policy;
    PPOConfig ppo;
    SamplerArgs sampler;
};

int cmd_train_policy(PolicyArgs a, uint64_t seed, const json& config) {
    a.policy.actions.lengths = parse_int_list(a.actions);
    a.policy.actions.validate();
    a.ppo.validate();
    if (a.length < 1 || a.prompt_length < 0 || a.prompts < 1 || a.episodes < 0) {
        throw ConfigurationError("length and prompts must be positive, prompt-length and episodes nonnegative");
    }
    const Denoiser model = Denoiser::load(a.denoiser);
    const Tokenizer tok = Tokenizer::text8();
    require_same_vocab(model.vocab(), tok.vocab(), "text alphabet");
    const auto split = split_text8(read_text_file(a.corpus), tok);
    if (split.train.size() <= static_cast<size_t>(a.prompt_length)) {
        throw ConfigurationError("corpus " + a.corpus + " is shorter than one prompt");
    }
    Rng prompt_rng(derive_seed(seed, 1));
    std::vector<TokenSequence> prompts;
    for (int i = 0; i < a.prompts; ++i) {
        const size_t start = prompt_rng.below(split.train.size() - static_cast<size_t>(a.prompt_length));
        prompts.emplace_back(split.train.begin() + static_cast<long>(start),
                             split.train.begin() + static_cast<long>(start) + a.prompt_length);
    }

    const fs::path out(a.out);
    prepare_out_dir(out);
    write_json(out / "config.json", config);
    GenerationEnvironment env(model, prompts, a.length, a.sampler.config(derive_seed(seed, 2)),
                              NoiseSchedule::log_linear(), a.policy.window, a.policy.actions.max_length(),
                              a.ppo.lambda1);
    std::string rewards;
    const auto t0 = Clock::now();
    const auto result = train_policy(PolicyModel(a.policy, model.config().hidden_dim, derive_seed(seed, 3)), env,
                                     a.episodes, a.ppo, derive_seed(seed, 4), [&](const EpisodeRecord& r) {
                                         rewards += episode_record_json(r).dump() + "\n";
                                         if (r.episode % 50 == 0) {
                                             std::fprintf(stderr, "episode %d reward %.4f %.0fs\n", r.episode,
                                                          r.mean_reward, seconds_since(t0));
                                         }
                                     });
    std::string metrics;
    for (size_t i = 0; i < result.updates.size(); ++i) {
        const auto& d = result.updates[i];
        metrics += json{{"update", i},
                        {"objective", d.objective},
                        {"value_loss", d.value_loss},
                        {"mean_ratio", d.mean_ratio},
                        {"clip_fraction", d.clip_fraction}}
                       .dump() +
                   "\n";
    }
    save_policy(out / "checkpoint", result.policy);
    write_file_atomic(out / "rewards.jsonl", rewards);
    write_file_atomic(out / "metrics.jsonl", metrics);
    return 0;
}

struct GenerateArgs {
    std::string denoiser;
    std::string prompt;
    int length = 64;
    std::string block = "fixed:16";
    std::string guidance = "none";
    std::string classifier;
    std::string policy_mode = "sample";
    int samples = 1;
    std::string out;
    SamplerArgs sampler;
};

int cmd_generate(const GenerateArgs& a, uint64_t seed, const json& config) {
    if (a.length < 1 || a.samples < 1) {
        throw ConfigurationError("length and samples must be positive");
    }
    if (a.policy_mode != "greedy" && a.policy_mode != "sample") {
        throw ConfigurationError("policy-mode must be greedy or sample");
    }
    const auto block = parse_block_spec(a.block);
    const auto guidance = parse_guidance(a.guidance);
    const Denoiser model = Denoiser::load(a.denoiser);
    const Tokenizer tok = Tokenizer::text8();
    require_same_vocab(model.vocab(), tok.vocab(), "text alphabet");
    const auto prompt = a.prompt.empty() ? TokenSequence{} : tok.encode(a.prompt);

    std::optional<NeuralClassifier> classifier;
    std::optional<ClassifierGuide> guide;
    if (guidance) {
        if (a.classifier.empty()) {
            throw ConfigurationError("guidance needs --classifier");
        }
        classifier.emplace(load_classifier(a.classifier));
        require_same_vocab(model.vocab(), classifier->vocab(), "classifier");
        guidance->validate(classifier->class_count());
        guide.emplace(*classifier, *guidance);
    }
    std::optional<PolicyModel> policy;
    if (!block.policy.empty()) {
        policy.emplace(load_policy(block.policy));
        if (policy->state_dim() != model.config().hidden_dim) {
            throw ConfigurationError("policy state size " + std::to_string(policy->state_dim()) +
                                     " does not match the denoiser hidden size " +
                                     std::to_string(model.config().hidden_dim));
        }
    }

    const auto schedule = NoiseSchedule::log_linear();
    json sidecar = {{"seed", seed}, {"block", a.block}, {"guidance", a.guidance}, {"sampler", a.sampler.sampler}};
    json records = json::array();
    std::string text;
    const auto t0 = Clock::now();
    long generated = 0;
    for (int i = 0; i < a.samples; ++i) {
        const uint64_t s = derive_seed(seed, static_cast<uint64_t>(i));
        const auto cfg = a.sampler.config(s);
        GenerationResult r;
        if (policy) {
            PolicyChooser chooser(*policy, model, a.policy_mode == "greedy");
            r = generate_sequence(model, prompt, a.length, chooser, schedule, cfg, guide ? &*guide : nullptr);
        } else {
            r = generate_sequence(model, prompt, BlockLayout::fixed(a.length, block.fixed), schedule, cfg,
                                  guide ? &*guide : nullptr);
        }
        generated += a.length;
        json times = json::array();
        json calls = json::array();
        for (const auto& t : r.traces) {
            times.push_back(t.event_times);
            calls.push_back(t.denoiser_calls);
        }
        const auto line = tok.decode(r.tokens);
        records.push_back({{"seed", s}, {"lengths", r.layout.lengths}, {"block_times", times},
                           {"denoiser_calls", calls}, {"text", line}});
        text += line + "\n";
    }
    const double wall = seconds_since(t0);
    sidecar["samples"] = records;
    sidecar["tokens_per_second"] = nullptr;
    std::cout << text << std::flush;
    std::fprintf(stderr, "generated %ld tokens in %.3f s (%.1f tokens/s)\n", generated, wall,
                 wall > 0 ? static_cast<double>(generated) / wall : 0.0);
    if (!a.out.empty()) {
        const fs::path out(a.out);
        prepare_out_dir(out);
        write_json(out / "config.json", config);
        write_json(out / "sidecar.json", sidecar);
        write_file_atomic(out / "samples.txt", text);
    }
    return 0;
}

struct EvalArgs {
    std::string denoiser;
    std::string classifier;
    std::string samples;
    std::string corpus;
    std::string block = "fixed:4";
    std::string policy_mode = "sample";
    int target = 0;
    int chunks = 100;
    int mc = 1;
    int context = 0;
    std::string out;
};

int cmd_eval(const EvalArgs& a, uint64_t seed, const json& config) {
    if (a.samples.empty() && a.corpus.empty()) {
        throw ConfigurationError("eval needs --samples and/or --corpus");
    }
    const Tokenizer tok = Tokenizer::text8();
    std::optional<Denoiser> model;
    if (!a.denoiser.empty()) {
        model.emplace(Denoiser::load(a.denoiser));
        require_same_vocab(model->vocab(), tok.vocab(), "text alphabet");
    }
    MetricReport report;
    if (!a.corpus.empty()) {
        if (!model) {
            throw ConfigurationError("a likelihood bound on --corpus needs --denoiser");
        }
        const auto block = parse_block_spec(a.block);
        if (a.policy_mode != "greedy" && a.policy_mode != "sample") {
            throw ConfigurationError("policy-mode must be greedy or sample");
        }
        std::optional<PolicyModel> policy;
        if (!block.policy.empty()) {
            policy.emplace(load_policy(block.policy));
        }
        const auto split = split_text8(read_text_file(a.corpus), tok);
        const int ctx = a.context > 0 ? a.context : model->context_length();
        Rng layout_rng(derive_seed(seed, 2));
        const LayoutFn layout = [&](std::span<const int> c) {
            if (!policy) {
                return BlockLayout::fixed(static_cast<int>(c.size()), block.fixed);
            }
            return policy_layout(*policy, *model, c, 0, a.policy_mode == "sample" ? &layout_rng : nullptr);
        };
        const auto bound = chunked_nll_bound(*model, split.valid, ctx, a.chunks, layout, NoiseSchedule::log_linear(),
                                             a.mc, derive_seed(seed, 1));
        report.bpc = bound.bpc();
        report.ppl = bound.ppl();
    }
    if (!a.samples.empty()) {
        std::vector<TokenSequence> samples;
        for (const auto& line : read_lines(a.samples)) {
            samples.push_back(tok.encode(line));
        }
        if (samples.empty()) {
            throw ConfigurationError("no samples in " + a.samples);
        }
        report.dist1 = dist_n(samples, 1);
        report.dist2 = dist_n(samples, 2);
        report.dist3 = dist_n(samples, 3);
        report.entropy = mean_token_entropy(samples);
        if (model) {
            report.gen_ppl = generative_perplexity(samples, *model, model->vocab());
        }
        if (!a.classifier.empty()) {
            const auto clf = load_classifier(a.classifier);
            require_same_vocab(tok.vocab(), clf.vocab(), "classifier");
            std::vector<TokenSequence> clipped;
            for (const auto& s : samples) {
                const auto n = std::min(s.size(), static_cast<size_t>(clf.config().context_length));
                clipped.emplace_back(s.end() - static_cast<long>(n), s.end());
            }
            report.control_accuracy = control_accuracy(clipped, clf, a.target);
        }
    }
    const json j = report.to_json();
    std::cout << j.dump(2) << "\n";
    if (!a.out.empty()) {
        const fs::path out(a.out);
        prepare_out_dir(out);
        write_json(out / "config.json", config);
        write_json(out / "report.json", j);
    }
    return 0;
}

struct VerifyArgs {
    std::string suite;
    std::string out;
};

int cmd_verify(const VerifyArgs& a, uint64_t seed) {
    const auto rep = verify::run_suite(a.suite, seed);
    rep.print(std::cout);
    if (!a.out.empty()) {
        json lines = json::array();
        for (const auto& l : rep.lines) {
            lines.push_back({{"name", l.name}, {"pass", l.pass}, {"detail", l.detail}});
        }
        write_json(a.out, {{"suite", a.suite}, {"seed", seed}, {"pass", rep.ok()}, {"checks", lines}});
    }
    return rep.ok() ? 0 : 1;
}

void add_sampler_options(CLI::App* sub, SamplerArgs& s) {
    sub->add_option("--sampler", s.sampler, "ancestral or first-hitting");
    sub->add_option("--steps-per-block", s.steps_per_block, "ancestral grid steps per block");
    sub->add_option("--nucleus", s.nucleus, "nucleus mass per unmasking draw (1 disables)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Controllable semi-autoregressive discrete diffusion language model"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast)->always_capture_default();

    uint64_t seed = 0;
    std::string config_path;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--seed", seed, "global seed")->envname("CTRLDIFF_SEED");
        sub->add_option("--config", config_path, "key=value file; command-line flags override it");
    };

    CorpusArgs corpus;
    auto* mk = app.add_subcommand("make-corpus", "write a synthetic text or labeled corpus");
    common(mk);
    mk->add_option("--kind", corpus.kind, "text or labeled");
    mk->add_option("--out", corpus.out, "output file")->required();
    mk->add_option("--chars", corpus.chars, "characters of text");
    mk->add_option("--docs", corpus.docs, "labeled documents");

    DenoiserArgs den;
    auto* td = app.add_subcommand("train-denoiser", "train the block denoiser");
    common(td);
    td->add_option("--corpus", den.corpus, "raw text corpus")->required();
    td->add_option("--out", den.out, "output directory")->required();
    td->add_option("--steps", den.steps);
    td->add_option("--layers", den.cfg.layers);
    td->add_option("--hidden", den.cfg.hidden_dim);
    td->add_option("--heads", den.cfg.heads);
    td->add_option("--context", den.cfg.context_length);
    td->add_option("--lr", den.cfg.learn_rate);
    td->add_option("--warmup", den.cfg.warmup_steps);
    td->add_option("--batch", den.cfg.batch_size);
    td->add_option("--weight-decay", den.cfg.weight_decay);
    td->add_option("--clip", den.cfg.clip_norm);
    td->add_option("--block-sizes", den.block_sizes, "training block lengths, comma-separated");
    td->add_option("--estimator", den.estimator, "masked-count or time-sampled");
    td->add_option("--unknown", den.unknown, "characters outside the alphabet: error or space");
    td->add_option("--log-every", den.log_every);
    td->add_option("--eval-chunks", den.eval_chunks, "validation chunks for the final bound (0 for all)");
    td->add_option("--eval-block", den.eval_block, "block length of the validation bound");
    td->add_option("--eval-mc", den.eval_mc, "Monte-Carlo samples per validation chunk");

    ClassifierArgs cls;
    auto* tc = app.add_subcommand("train-classifier", "train the guidance classifier");
    common(tc);
    tc->add_option("--corpus", cls.corpus, "labeled corpus (label<TAB>text per line)")->required();
    tc->add_option("--out", cls.out, "output directory")->required();
    tc->add_option("--steps", cls.steps);
    tc->add_option("--classes", cls.cfg.class_count);
    tc->add_option("--layers", cls.cfg.layers);
    tc->add_option("--hidden", cls.cfg.hidden_dim);
    tc->add_option("--heads", cls.cfg.heads);
    tc->add_option("--context", cls.cfg.context_length);
    tc->add_option("--lr", cls.cfg.learn_rate);
    tc->add_option("--warmup", cls.cfg.warmup_steps);
    tc->add_option("--batch", cls.cfg.batch_size);
    tc->add_option("--weight-decay", cls.cfg.weight_decay);
    tc->add_option("--clip", cls.cfg.clip_norm);
    tc->add_option("--min-crop", cls.cfg.min_crop);
    tc->add_option("--valid-fraction", cls.valid_fraction);
    tc->add_option("--log-every", cls.log_every);

    PolicyArgs pol;
    auto* tp = app.add_subcommand("train-policy", "train the block-length policy with PPO");
    common(tp);
    tp->add_option("--denoiser", pol.denoiser, "denoiser checkpoint directory")->required();
    tp->add_option("--corpus", pol.corpus, "raw text for prompts")->required();
    tp->add_option("--out", pol.out, "output directory")->required();
    tp->add_option("--episodes", pol.episodes);
    tp->add_option("--length", pol.length, "generated tokens per episode");
    tp->add_option("--prompt-length", pol.prompt_length);
    tp->add_option("--prompts", pol.prompts, "distinct prompts drawn from the corpus");
    tp->add_option("--actions", pol.actions, "block lengths, comma-separated");
    tp->add_option("--window", pol.policy.window);
    tp->add_option("--conv-channels", pol.policy.conv_channels);
    tp->add_option("--conv-kernel", pol.policy.conv_kernel);
    tp->add_option("--mlp-hidden", pol.policy.mlp_hidden);
    tp->add_option("--lambda1", pol.ppo.lambda1);
    tp->add_option("--clip", pol.ppo.clip);
    tp->add_option("--discount", pol.ppo.discount);
    tp->add_option("--gae-lambda", pol.ppo.gae_lambda);
    tp->add_option("--epochs", pol.ppo.epochs);
    tp->add_option("--minibatch", pol.ppo.minibatch);
    tp->add_option("--lr", pol.ppo.learn_rate);
    tp->add_option("--value-coef", pol.ppo.value_coef);
    tp->add_option("--max-grad-norm", pol.ppo.max_grad_norm);
    tp->add_option("--episodes-per-update", pol.ppo.episodes_per_update);
    add_sampler_options(tp, pol.sampler);

    GenerateArgs gen;
    auto* gn = app.add_subcommand("generate", "generate text");
    common(gn);
    gn->add_option("--denoiser", gen.denoiser, "denoiser checkpoint directory")->required();
    gn->add_option("--prompt", gen.prompt);
    gn->add_option("--length", gen.length, "tokens to generate after the prompt");
    gn->add_option("--block", gen.block, "fixed:N or policy:PATH");
    gn->add_option("--policy-mode", gen.policy_mode, "sample from the policy or take its argmax (greedy)");
    gn->add_option("--guidance", gen.guidance, "none or LABEL:GAMMA:MODE (exact, factorized, taylor)");
    gn->add_option("--classifier", gen.classifier, "classifier checkpoint directory");
    gn->add_option("--samples", gen.samples);
    gn->add_option("--out", gen.out, "directory for the sidecar, samples and config");
    add_sampler_options(gn, gen.sampler);

    EvalArgs ev;
    auto* el = app.add_subcommand("eval", "evaluate samples and likelihood bounds");
    common(el);
    el->add_option("--denoiser", ev.denoiser, "denoiser checkpoint directory");
    el->add_option("--classifier", ev.classifier, "classifier checkpoint directory");
    el->add_option("--samples", ev.samples, "one sample per line");
    el->add_option("--corpus", ev.corpus, "raw text; its validation split is scored");
    el->add_option("--block", ev.block, "fixed:N or policy:PATH for the bound");
    el->add_option("--policy-mode", ev.policy_mode, "sample from the policy or take its argmax (greedy)");
    el->add_option("--target", ev.target, "target label for control accuracy");
    el->add_option("--chunks", ev.chunks, "validation chunks (0 for all)");
    el->add_option("--mc", ev.mc, "Monte-Carlo samples per chunk");
    el->add_option("--context", ev.context, "chunk length (default: the denoiser context)");
    el->add_option("--out", ev.out, "directory for report.json and config");

    VerifyArgs ver;
    auto* vf = app.add_subcommand("verify", "run a brute-force oracle suite");
    common(vf);
    vf->add_option("--suite", ver.suite, "diffusion, guidance, sampler, ppo or denoiser")->required();
    vf->add_option("--out", ver.out, "JSON report file");

    try {
        auto args = expand_args(argc, argv);
        std::reverse(args.begin(), args.end());
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }

    try {
        if (*mk) {
            return cmd_make_corpus(corpus, seed);
        }
        if (*td) {
            return cmd_train_denoiser(den, seed, merged_config(*td, seed));
        }
        if (*tc) {
            return cmd_train_classifier(cls, seed, merged_config(*tc, seed));
        }
        if (*tp) {
            return cmd_train_policy(pol, seed, merged_config(*tp, seed));
        }
        if (*gn) {
            return cmd_generate(gen, seed, merged_config(*gn, seed));
        }
        if (*el) {
            return cmd_eval(ev, seed, merged_config(*el, seed));
        }
        if (*vf) {
            return cmd_verify(ver, seed);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
