#include <doctest.h>

#include <set>
#include <sstream>

#include "ctrldiff/corpus.hpp"
#include "ctrldiff/errors.hpp"

using namespace ctrldiff;

TEST_CASE("encode follows alphabet order") {
    const auto tok = Tokenizer::text8();
    CHECK(tok.encode("abc") == TokenSequence{0, 1, 2});
    CHECK(tok.encode("a a") == TokenSequence{0, 26, 0});
    CHECK_THROWS_AS(tok.encode("A"), EncodingError);
    CHECK_THROWS_AS(tok.encode(""), EncodingError);
    CHECK(tok.vocab().size_total == 28);
    CHECK(tok.vocab().mask_id == 27);

    const auto lenient = Tokenizer::text8(Tokenizer::UnknownPolicy::map_to_space);
    CHECK(lenient.encode("a,b") == TokenSequence{0, 26, 1});
    CHECK_THROWS_AS(Tokenizer("abca", Tokenizer::UnknownPolicy::error), InvalidInput);
}

TEST_CASE("decode(encode(s)) round-trips over random strings") {
    const auto tok = Tokenizer::text8();
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        std::string s(1 + rng.below(64), ' ');
        for (char& c : s) {
            c = tok.alphabet()[rng.below(tok.alphabet().size())];
        }
        const auto ids = tok.encode(s);
        CHECK(tok.decode(ids) == s);
        for (int id : ids) {
            CHECK(id < tok.vocab().token_count());
        }
    }
}

TEST_CASE("split_text8 keeps proportions") {
    const auto tok = Tokenizer::text8();
    const std::string raw(100, 'q');
    const auto split = split_text8(raw, tok);
    CHECK(split.train.size() == 90);
    CHECK(split.valid.size() == 5);
    CHECK_THROWS_AS(split_text8("short text", tok), IngestionError);
    CHECK_THROWS_AS(split_text8("", tok), IngestionError);
}

TEST_CASE("chunking drops the partial tail and covers a prefix") {
    const auto r = chunk_ranges(10, 4);
    REQUIRE(r.size() == 2);
    CHECK(r[0] == std::pair<size_t, size_t>{0, 4});
    CHECK(r[1] == std::pair<size_t, size_t>{4, 8});
    CHECK(chunk_ranges(1000, 256).size() == 3);
    for (size_t n : {0u, 7u, 99u, 513u}) {
        const auto rr = chunk_ranges(n, 8);
        size_t expect = 0;
        for (const auto& [b, e] : rr) {
            CHECK(b == expect);
            CHECK(e - b == 8);
            expect = e;
        }
        CHECK(n - expect < 8);
    }
}

TEST_CASE("batch stream is deterministic per seed") {
    TokenSequence stream(1000);
    for (size_t i = 0; i < stream.size(); ++i) {
        stream[i] = static_cast<int>(i % 27);
    }
    BatchStream a(stream, 16, 4, 9);
    BatchStream b(stream, 16, 4, 9);
    BatchStream c(stream, 16, 4, 10);
    bool differs = false;
    for (int i = 0; i < 40; ++i) {
        const auto ba = a.next_batch();
        const auto bb = b.next_batch();
        const auto bc = c.next_batch();
        CHECK(ba == bb);
        differs = differs || ba != bc;
        for (const auto& row : ba) {
            CHECK(row.size() == 16);
        }
    }
    CHECK(differs);
    const auto order = a.epoch_order(0);
    CHECK(std::set<size_t>(order.begin(), order.end()).size() == a.chunk_count());
}

TEST_CASE("labeled corpus parsing") {
    std::istringstream in("0\tgood day\n1\tbad day\r\n\n1\tworse\n");
    const auto ex = parse_labeled_corpus(in, 2);
    REQUIRE(ex.size() == 3);
    CHECK(ex[0].text == "good day");
    CHECK(ex[1].label == 1);
    CHECK(ex[1].text == "bad day");

    std::istringstream bad_label("2\tx\n");
    CHECK_THROWS_AS(parse_labeled_corpus(bad_label, 2), IngestionError);
    std::istringstream no_tab("0 x\n");
    CHECK_THROWS_AS(parse_labeled_corpus(no_tab, 2), IngestionError);

    std::ostringstream out;
    write_labeled_corpus(out, ex);
    std::istringstream again(out.str());
    const auto ex2 = parse_labeled_corpus(again, 2);
    CHECK(ex2.size() == 3);
    CHECK(ex2[2].text == "worse");
}

TEST_CASE("synthetic corpora are reproducible and encodable") {
    const auto tok = Tokenizer::text8();
    const auto text = synthetic_text8(5000, 3);
    CHECK(text.size() == 5000);
    CHECK(text == synthetic_text8(5000, 3));
    CHECK_NOTHROW(tok.encode(text));
    const auto ex = synthetic_sentiment(10, 4);
    CHECK(ex.size() == 10);
    CHECK(ex[0].label == 0);
    CHECK(ex[1].label == 1);
    for (const auto& e : ex) {
        CHECK_NOTHROW(tok.encode(e.text));
    }
}
