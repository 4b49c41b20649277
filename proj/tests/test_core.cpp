#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "clozepet/csv.hpp"
#include "clozepet/error.hpp"
#include "clozepet/rng.hpp"
#include "clozepet/vocab.hpp"

using namespace clozepet;

TEST_CASE("splitmix64 is a pure function") {
  REQUIRE(splitmix64(0) == splitmix64(0));
  REQUIRE(splitmix64(1) != splitmix64(2));
}

TEST_CASE("derive_seed separates streams and orders its parts") {
  REQUIRE(derive_seed(42, 1) == derive_seed(42, 1));
  REQUIRE(derive_seed(42, 1) != derive_seed(42, 2));
  REQUIRE(derive_seed(42, 1, 2) != derive_seed(42, 2, 1));
  REQUIRE(derive_seed(41, 1) != derive_seed(42, 1));
}

TEST_CASE("rng draws reproduce bit-exactly for a fixed seed") {
  Rng a(7), b(7);
  for (int i = 0; i < 100; ++i) {
    REQUIRE(a.next_u64() == b.next_u64());
  }
  Rng c(7), d(7);
  for (int i = 0; i < 100; ++i) {
    REQUIRE(c.uniform() == d.uniform());
    REQUIRE(c.normal() == d.normal());
  }
}

TEST_CASE("rng uniform stays in range and bernoulli respects extremes") {
  Rng r(3);
  for (int i = 0; i < 1000; ++i) {
    double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    REQUIRE(r.uniform_index(5) < 5);
    REQUIRE_FALSE(r.bernoulli(0.0));
    REQUIRE(r.bernoulli(1.0));
  }
}

TEST_CASE("rng shuffle permutes and preserves the multiset") {
  std::vector<int> v{1, 2, 3, 4, 5, 6, 7, 8};
  auto original = v;
  Rng r(11);
  r.shuffle(v);
  auto sorted = v;
  std::sort(sorted.begin(), sorted.end());
  REQUIRE(sorted == original);

  std::vector<int> w = original;
  Rng r2(11);
  r2.shuffle(w);
  REQUIRE(w == v);
}

TEST_CASE("csv escaping quotes only when needed") {
  REQUIRE(csv::escape_field("plain") == "plain");
  REQUIRE(csv::escape_field("a,b") == "\"a,b\"");
  REQUIRE(csv::escape_field("say \"hi\"") == "\"say \"\"hi\"\"\"");
  REQUIRE(csv::escape_field("line\nbreak") == "\"line\nbreak\"");
}

TEST_CASE("csv round-trips awkward fields") {
  std::vector<std::vector<std::string>> rows{
      {"doc_id", "text", "label"},
      {"d1", "Hallo, Welt", "Anrede"},
      {"d2", "quote \" and\nnewline", ""},
  };
  std::string blob;
  for (const auto& row : rows) blob += csv::format_row(row);
  auto parsed = csv::parse(blob);
  REQUIRE(parsed == rows);
}

TEST_CASE("csv parse rejects an unterminated quote") {
  REQUIRE_THROWS_AS(csv::parse("a,\"oops"), Error);
}

TEST_CASE("csv parse of empty text yields no rows") {
  REQUIRE(csv::parse("").empty());
}

TEST_CASE("vocabulary builder puts specials first and ranks by frequency") {
  auto vocab = build_vocabulary({"b b b a a c"}, 100);
  REQUIRE(vocab.surface(0) == "[PAD]");
  REQUIRE(vocab.pad_id == 0);
  REQUIRE(vocab.unk_id == 1);
  REQUIRE(vocab.mask_id == 2);
  REQUIRE(vocab.sep_id == 3);
  REQUIRE(vocab.cls_id == 4);
  REQUIRE(vocab.surface(5) == "b");
  REQUIRE(vocab.surface(6) == "a");
  REQUIRE(vocab.surface(7) == "c");
}

TEST_CASE("vocabulary builder breaks frequency ties lexicographically") {
  auto vocab = build_vocabulary({"zz aa mm"}, 100);
  REQUIRE(vocab.surface(5) == "aa");
  REQUIRE(vocab.surface(6) == "mm");
  REQUIRE(vocab.surface(7) == "zz");
}

TEST_CASE("vocabulary size cap truncates the tail") {
  auto vocab = build_vocabulary({"a a a b b c"}, 7);
  REQUIRE(vocab.size() == 7);
  REQUIRE(vocab.lookup("c") == -1);
}

TEST_CASE("tokenize of empty text is empty") {
  auto vocab = build_vocabulary({"a b"}, 100);
  REQUIRE(tokenize("", vocab).empty());
}

TEST_CASE("tokenize passes special surface forms through") {
  auto vocab = build_vocabulary({"der patient"}, 100);
  auto ids = tokenize("der [MASK] patient", vocab);
  REQUIRE(ids.size() == 3);
  REQUIRE(ids[1] == vocab.mask_id);
  int mask_count = 0;
  for (int id : ids) mask_count += id == vocab.mask_id;
  REQUIRE(mask_count == 1);

  // glued to a word it still splits out
  auto glued = tokenize("der[SEP]patient", vocab);
  REQUIRE(glued.size() == 3);
  REQUIRE(glued[1] == vocab.sep_id);
}

TEST_CASE("tokenize covers unknown words by greedy subwords or UNK") {
  auto vocab = Vocabulary::from_tokens(
      {"[PAD]", "[UNK]", "[MASK]", "[SEP]", "[CLS]", "herz", "insuffizienz"});
  auto covered = tokenize("herzinsuffizienz", vocab);
  REQUIRE(covered == TokenIds{5, 6});

  auto unk = tokenize("qqq", vocab);
  REQUIRE(unk == TokenIds{vocab.unk_id});
}

TEST_CASE("tokenize splits punctuation off words") {
  auto vocab = build_vocabulary({"befund : gut ."}, 100);
  auto ids = tokenize("befund: gut.", vocab);
  REQUIRE(ids.size() == 4);
  REQUIRE(vocab.surface(ids[0]) == "befund");
  REQUIRE(vocab.surface(ids[1]) == ":");
  REQUIRE(vocab.surface(ids[3]) == ".");
}

TEST_CASE("umlauts count as word characters") {
  auto vocab = build_vocabulary({"ödeme gehört"}, 100);
  REQUIRE(tokenize("ödeme", vocab).size() == 1);
  REQUIRE(is_alphabetic_token("gehört"));
  REQUIRE(is_alphabetic_token("Sektion"));
  REQUIRE_FALSE(is_alphabetic_token("a1"));
  REQUIRE_FALSE(is_alphabetic_token("x."));
  REQUIRE_FALSE(is_alphabetic_token(""));
}

TEST_CASE("codepoint_count sees multi-byte letters as one") {
  REQUIRE(codepoint_count("ab") == 2);
  REQUIRE(codepoint_count("sehr geehrte") == 12);
  REQUIRE(codepoint_count("öl") == 2);
}

TEST_CASE("encode_with_specials wraps and truncates") {
  auto vocab = build_vocabulary({"a b c d e f"}, 100);
  auto ids = encode_with_specials("a b c", vocab, 16);
  REQUIRE(ids.front() == vocab.cls_id);
  REQUIRE(ids.back() == vocab.sep_id);
  REQUIRE(ids.size() == 5);

  auto clipped = encode_with_specials("a b c d e f", vocab, 4);
  REQUIRE(clipped.size() == 4);
  REQUIRE(clipped.front() == vocab.cls_id);
  REQUIRE(clipped.back() == vocab.sep_id);
}

TEST_CASE("duplicate vocabulary tokens are rejected") {
  REQUIRE_THROWS_AS(Vocabulary::from_tokens({"[PAD]", "[UNK]", "[MASK]", "[SEP]",
                                             "[CLS]", "a", "a"}),
                    Error);
}

TEST_CASE("missing special token is rejected") {
  REQUIRE_THROWS_AS(Vocabulary::from_tokens({"[PAD]", "[UNK]", "[MASK]", "a"}),
                    Error);
}

TEST_CASE("error carries its code and message") {
  Error e(ErrorCode::UnknownLabel, "label 'X' not in class list");
  REQUIRE(e.code() == ErrorCode::UnknownLabel);
  REQUIRE(std::string(e.what()).find("X") != std::string::npos);
}
