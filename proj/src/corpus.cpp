#include "ctrldiff/corpus.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "ctrldiff/errors.hpp"

namespace ctrldiff {

Tokenizer::Tokenizer(std::string alphabet, UnknownPolicy policy) : alphabet_(std::move(alphabet)), policy_(policy) {
    std::fill(std::begin(lookup_), std::end(lookup_), -1);
    if (alphabet_.empty()) {
        throw InvalidInput("tokenizer alphabet is empty");
    }
    for (size_t i = 0; i < alphabet_.size(); ++i) {
        const auto c = static_cast<unsigned char>(alphabet_[i]);
        if (lookup_[c] != -1) {
            throw InvalidInput(std::string("duplicate character in alphabet: '") + alphabet_[i] + "'");
        }
        lookup_[c] = static_cast<int>(i);
    }
    space_id_ = lookup_[static_cast<unsigned char>(' ')];
    if (policy_ == UnknownPolicy::map_to_space && space_id_ < 0) {
        throw InvalidInput("map_to_space policy requires a space in the alphabet");
    }
}

Tokenizer Tokenizer::text8(UnknownPolicy policy) { return Tokenizer("abcdefghijklmnopqrstuvwxyz ", policy); }

TokenSequence Tokenizer::encode(std::string_view text) const {
    if (text.empty()) {
        throw EncodingError("cannot encode empty text");
    }
    TokenSequence ids;
    ids.reserve(text.size());
    for (size_t i = 0; i < text.size(); ++i) {
        int id = lookup_[static_cast<unsigned char>(text[i])];
        if (id < 0) {
            if (policy_ == UnknownPolicy::error) {
                throw EncodingError("character " + std::to_string(static_cast<int>(static_cast<unsigned char>(text[i]))) +
                                    " at offset " + std::to_string(i) + " is outside the alphabet");
            }
            id = space_id_;
        }
        ids.push_back(id);
    }
    return ids;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
    std::string out;
    out.reserve(ids.size());
    const int n = static_cast<int>(alphabet_.size());
    for (int id : ids) {
        if (id == n) {
            out.push_back('_');
        } else if (id >= 0 && id < n) {
            out.push_back(alphabet_[static_cast<size_t>(id)]);
        } else {
            throw InvalidInput("token id " + std::to_string(id) + " outside vocabulary");
        }
    }
    return out;
}

TextSplit split_text8(std::string_view raw, const Tokenizer& tok, double train_fraction, double valid_fraction) {
    while (!raw.empty() && (raw.back() == '\n' || raw.back() == '\r')) {
        raw.remove_suffix(1);
    }
    if (raw.size() < 20) {
        throw IngestionError("corpus too short to split (" + std::to_string(raw.size()) + " characters)");
    }
    if (!(train_fraction > 0.0) || !(valid_fraction > 0.0) || train_fraction + valid_fraction > 1.0) {
        throw InvalidInput("split fractions must be positive and sum to at most 1");
    }
    const auto n = static_cast<double>(raw.size());
    const auto n_train = static_cast<size_t>(std::floor(n * train_fraction + 1e-9));
    const auto n_valid = static_cast<size_t>(std::floor(n * valid_fraction + 1e-9));
    TextSplit split;
    split.train = tok.encode(raw.substr(0, n_train));
    split.valid = tok.encode(raw.substr(n_train, n_valid));
    return split;
}

std::vector<std::pair<size_t, size_t>> chunk_ranges(size_t token_count, int context_length) {
    if (context_length < 1) {
        throw InvalidInput("context length must be positive");
    }
    const auto c = static_cast<size_t>(context_length);
    std::vector<std::pair<size_t, size_t>> out;
    for (size_t begin = 0; begin + c <= token_count; begin += c) {
        out.emplace_back(begin, begin + c);
    }
    return out;
}

BatchStream::BatchStream(TokenSequence stream, int context_length, int batch_size, uint64_t shuffle_seed)
    : stream_(std::move(stream)),
      context_length_(context_length),
      batch_size_(batch_size),
      seed_(shuffle_seed),
      ranges_(chunk_ranges(stream_.size(), context_length)) {
    if (batch_size < 1) {
        throw InvalidInput("batch size must be positive");
    }
    if (ranges_.empty()) {
        throw IngestionError("token stream shorter than one context window");
    }
    order_ = epoch_order(0);
}

TokenSequence BatchStream::chunk(size_t index) const {
    const auto [b, e] = ranges_.at(index);
    return TokenSequence(stream_.begin() + static_cast<std::ptrdiff_t>(b), stream_.begin() + static_cast<std::ptrdiff_t>(e));
}

std::vector<size_t> BatchStream::epoch_order(size_t epoch) const {
    std::vector<size_t> order(ranges_.size());
    std::iota(order.begin(), order.end(), size_t{0});
    Rng rng(derive_seed(seed_, epoch));
    for (size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[rng.below(i)]);
    }
    return order;
}

TokenBatch BatchStream::next_batch() {
    TokenBatch batch;
    while (static_cast<int>(batch.size()) < batch_size_) {
        if (cursor_ == order_.size()) {
            if (!batch.empty()) {
                break;
            }
            ++epoch_;
            order_ = epoch_order(epoch_);
            cursor_ = 0;
        }
        batch.push_back(chunk(order_[cursor_++]));
    }
    return batch;
}

std::vector<LabeledExample> parse_labeled_corpus(std::istream& in, int class_count) {
    std::vector<LabeledExample> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        const auto tab = line.find('\t');
        if (tab == std::string::npos || tab == 0) {
            throw IngestionError("line " + std::to_string(line_no) + ": expected label<TAB>text");
        }
        const std::string label_str = line.substr(0, tab);
        if (!std::all_of(label_str.begin(), label_str.end(), [](char c) { return c >= '0' && c <= '9'; })) {
            throw IngestionError("line " + std::to_string(line_no) + ": label is not a base-10 integer");
        }
        const int label = std::stoi(label_str);
        if (label >= class_count) {
            throw IngestionError("line " + std::to_string(line_no) + ": label " + label_str +
                                 " outside declared class count " + std::to_string(class_count));
        }
        out.push_back({line.substr(tab + 1), label});
    }
    return out;
}

std::vector<LabeledExample> read_labeled_corpus(const std::filesystem::path& path, int class_count) {
    std::ifstream in(path);
    if (!in) {
        throw IngestionError("cannot open labeled corpus " + path.string());
    }
    return parse_labeled_corpus(in, class_count);
}

void write_labeled_corpus(std::ostream& out, const std::vector<LabeledExample>& examples) {
    for (const auto& ex : examples) {
        out << ex.label << '\t' << ex.text << '\n';
    }
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IngestionError("cannot open corpus " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

namespace {

constexpr std::array kFunctionWords = {
    "the", "of",   "and",  "in",   "a",     "to",    "is",   "was",  "as",   "for",  "by",   "with", "that",
    "on",  "from", "it",   "at",   "an",    "which", "are",  "his",  "be",   "or",   "this", "also", "were",
    "its", "one",  "has",  "had",  "their", "not",   "have", "but",  "after", "into", "other", "most"};

constexpr std::array kContentWords = {
    "city",     "world",    "war",       "history",  "state",    "people",   "century", "government", "music",
    "language", "system",   "number",    "country",  "university", "church", "book",    "film",      "game",
    "water",    "time",     "form",      "name",     "king",     "series",   "family",  "life",      "party",
    "region",   "island",   "river",     "army",     "school",   "work",     "group",   "power",     "art",
    "law",      "theory",   "species",   "album",    "band",     "season",   "team",    "station",   "center",
    "empire",   "province", "republic",  "science",  "company",  "market",   "energy",  "field",     "light",
    "house",    "road",     "line",      "design",   "model",    "version",  "program", "network",   "data",
    "used",     "known",    "called",    "became",   "born",     "made",     "written", "built",     "found",
    "began",    "led",      "held",      "named",    "released", "located",  "based",   "developed", "including",
    "early",    "modern",   "national",  "general",  "public",   "united",   "american", "english",  "french",
    "german",   "roman",    "ancient",   "large",    "small",    "major",    "new",     "old",       "north",
    "south",    "east",     "west",      "first",    "second",   "several",  "many",    "two",       "three",
    "four",     "five",     "zero",      "nine",     "eight",    "seven",    "six",     "during",    "between",
    "under",    "over",     "through",   "against",  "within",   "without",  "about",   "since",     "until"};

constexpr std::array kPositiveWords = {
    "good",      "great",   "love",      "excellent", "happy",    "wonderful", "best",     "beautiful",
    "enjoy",     "perfect", "nice",      "amazing",   "fun",      "recommend", "favorite", "pleasant",
    "bright",    "fresh",   "friendly",  "glad",      "superb",   "delight",   "brilliant", "lovely",
    "fantastic", "joy",     "smooth",    "sweet",     "charming", "reliable",  "worth",    "gentle",
    "warm",      "splendid", "elegant",  "praise",    "success",  "win",       "kind",     "calm"};

constexpr std::array kNegativeWords = {
    "bad",     "poor",     "terrible", "awful",  "hate",      "worst",  "boring", "broken",
    "waste",   "ugly",     "sad",      "angry",  "useless",   "horrible", "cheap", "refund",
    "dull",    "slow",     "wrong",    "fail",   "annoying",  "weak",   "noisy",  "rude",
    "damaged", "painful",  "awkward",  "bitter", "dirty",     "fake",   "harsh",  "lousy",
    "messy",   "nasty",    "regret",   "sick",   "stupid",    "worse",  "lost",   "dead"};

// Zipf(1) weights over a word list.
template <size_t N>
std::array<double, N> zipf_cdf() {
    std::array<double, N> cdf{};
    double total = 0.0;
    for (size_t i = 0; i < N; ++i) {
        total += 1.0 / static_cast<double>(i + 1);
        cdf[i] = total;
    }
    for (auto& c : cdf) {
        c /= total;
    }
    return cdf;
}

template <size_t N>
const char* draw_word(const std::array<const char*, N>& words, Rng& rng) {
    static const auto cdf = zipf_cdf<N>();
    const double u = rng.uniform();
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    const auto idx = std::min(static_cast<size_t>(it - cdf.begin()), N - 1);
    return words[idx];
}

}  // namespace

std::string synthetic_document(int label, Rng& rng) {
    // Two-state chain over word kinds: function words tend to be followed by
    // content words and vice versa.
    const size_t n_words = 30 + rng.below(21);
    std::string doc;
    bool function_state = rng.uniform() < 0.5;
    for (size_t w = 0; w < n_words; ++w) {
        const char* word = nullptr;
        if (function_state) {
            word = draw_word(kFunctionWords, rng);
            function_state = rng.uniform() < 0.3;
        } else {
            if (rng.uniform() < 0.45) {
                word = label == 0 ? draw_word(kPositiveWords, rng) : draw_word(kNegativeWords, rng);
            } else {
                word = draw_word(kContentWords, rng);
            }
            function_state = rng.uniform() < 0.6;
        }
        if (!doc.empty()) {
            doc.push_back(' ');
        }
        doc += word;
    }
    return doc;
}

std::string synthetic_text8(size_t char_count, uint64_t seed) {
    Rng rng(seed);
    std::string out;
    out.reserve(char_count + 512);
    while (out.size() < char_count) {
        if (!out.empty()) {
            out.push_back(' ');
        }
        out += synthetic_document(static_cast<int>(rng.below(2)), rng);
    }
    out.resize(char_count);
    return out;
}

std::vector<LabeledExample> synthetic_sentiment(size_t example_count, uint64_t seed) {
    Rng rng(seed);
    std::vector<LabeledExample> out;
    out.reserve(example_count);
    for (size_t i = 0; i < example_count; ++i) {
        const int label = static_cast<int>(i % 2);
        out.push_back({synthetic_document(label, rng), label});
    }
    return out;
}

}  // namespace ctrldiff
