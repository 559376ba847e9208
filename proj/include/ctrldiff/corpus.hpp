#pragma once

// Character-level text ingestion, labeled corpora and batching.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ctrldiff/diffusion.hpp"
#include "ctrldiff/rng.hpp"

namespace ctrldiff {

class Tokenizer {
public:
    enum class UnknownPolicy { error, map_to_space };

    Tokenizer(std::string alphabet, UnknownPolicy policy);

    // 'a'..'z' followed by ' ' (ids 0..26); the mask is id 27.
    static Tokenizer text8(UnknownPolicy policy = UnknownPolicy::error);

    const std::string& alphabet() const { return alphabet_; }
    UnknownPolicy policy() const { return policy_; }
    Vocab vocab() const { return Vocab::mask_last(static_cast<int>(alphabet_.size()) + 1); }

    TokenSequence encode(std::string_view text) const;
    // The mask renders as '_'.
    std::string decode(std::span<const int> ids) const;

private:
    std::string alphabet_;
    UnknownPolicy policy_;
    int lookup_[256];
    int space_id_ = -1;
};

struct LabeledExample {
    std::string text;
    int label = 0;
};

struct TextSplit {
    TokenSequence train;
    TokenSequence valid;
};

// Contiguous train/valid split (default 90% / 5%, the rest unused). Trailing
// newlines are dropped before encoding.
TextSplit split_text8(std::string_view raw, const Tokenizer& tok, double train_fraction = 0.9,
                      double valid_fraction = 0.05);

// Non-overlapping [begin, end) ranges of context_length tokens; the partial
// tail is dropped.
std::vector<std::pair<size_t, size_t>> chunk_ranges(size_t token_count, int context_length);

using TokenBatch = std::vector<TokenSequence>;

// Concatenate-then-wrap batching over a token stream. Chunk order is a
// seeded permutation, reshuffled each epoch; the last batch of an epoch may be
// short.
class BatchStream {
public:
    BatchStream(TokenSequence stream, int context_length, int batch_size, uint64_t shuffle_seed);

    size_t chunk_count() const { return ranges_.size(); }
    int context_length() const { return context_length_; }
    TokenSequence chunk(size_t index) const;
    // Chunk indices of one epoch in visiting order.
    std::vector<size_t> epoch_order(size_t epoch) const;
    TokenBatch next_batch();

private:
    TokenSequence stream_;
    int context_length_;
    int batch_size_;
    uint64_t seed_;
    std::vector<std::pair<size_t, size_t>> ranges_;
    std::vector<size_t> order_;
    size_t epoch_ = 0;
    size_t cursor_ = 0;
};

std::vector<LabeledExample> parse_labeled_corpus(std::istream& in, int class_count);
std::vector<LabeledExample> read_labeled_corpus(const std::filesystem::path& path, int class_count);
void write_labeled_corpus(std::ostream& out, const std::vector<LabeledExample>& examples);

std::string read_text_file(const std::filesystem::path& path);

// Word-level synthetic corpora over the Text8 alphabet. Documents mix shared
// function words, neutral content words and words from one of two
// class-specific vocabularies; the class is the document's label.
std::string synthetic_document(int label, Rng& rng);
std::string synthetic_text8(size_t char_count, uint64_t seed);
std::vector<LabeledExample> synthetic_sentiment(size_t example_count, uint64_t seed);

}  // namespace ctrldiff
