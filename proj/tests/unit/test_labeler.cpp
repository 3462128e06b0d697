#include <algorithm>
#include <numeric>
#include <random>
#include <sstream>

#include "doctest.h"
#include "engage/error.hpp"
#include "engage/labeler.hpp"
#include "oracles.hpp"

using namespace engage;
using namespace engage::labeler;
using convlog::ResponseRow;

namespace {

convlog::Conversation with_flags(int n, unsigned regen_mask) {
  auto c = oracle::random_conversation(n, 1000 + static_cast<std::uint64_t>(n));
  for (int i = 0; i < n; ++i) {
    c.turns[static_cast<std::size_t>(i)].response.regenerated = (regen_mask >> i) & 1U;
  }
  return c;
}

std::vector<int> labels_of(const std::vector<LabeledRow>& rows) {
  std::vector<int> out;
  for (const auto& r : rows) {
    out.push_back(r.label);
  }
  return out;
}

ResponseRow row(int n_subsequent, bool regenerated, std::optional<int> star = std::nullopt) {
  ResponseRow r;
  r.conversation_id = "c";
  r.user_message = "hi";
  r.response_text = "hello";
  r.n_subsequent_user_messages = n_subsequent;
  r.regenerated = regenerated;
  r.star_rating = star;
  return r;
}

std::string words(int count, const std::string& stem) {
  std::string s;
  for (int i = 0; i < count; ++i) {
    s += (i ? " " : "") + stem + std::to_string(i);
  }
  return s;
}

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) {
    out.push_back(w);
  }
  return out;
}

}  // namespace

TEST_CASE("continuation labels on short conversations") {
  const auto rows3 = convlog::extract_rows(oracle::random_conversation(3, 1));
  CHECK(labels_of(label_continuation(rows3, 1)) == std::vector{1, 1, 0});
  CHECK(labels_of(label_continuation(rows3, 2)) == std::vector{1, 0, 0});
  const auto rows2 = convlog::extract_rows(oracle::random_conversation(2, 2));
  CHECK(labels_of(label_continuation(rows2, 4)) == std::vector{0, 0});
  CHECK_THROWS_AS(label_continuation(rows2, 0), Error);
}

TEST_CASE("retry and intersection examples") {
  const std::vector rows = {row(0, false), row(0, true), row(0, false), row(0, true)};
  CHECK(labels_of(label_retry(rows)) == std::vector{1, 0, 1, 0});
  const std::vector three = {row(3, false), row(3, true)};
  CHECK(labels_of(label_intersection(three, 2)) == std::vector{1, 0});
}

TEST_CASE("star labels drop unrated rows") {
  CHECK(labels_of(label_star(std::vector{row(0, false, 4)}, 4)) == std::vector{1});
  CHECK(labels_of(label_star(std::vector{row(0, false, 3)}, 4)) == std::vector{0});
  std::vector<ResponseRow> batch;
  for (int i = 0; i < 100; ++i) {
    batch.push_back(row(0, false, i % 20 == 0 ? std::optional<int>(1 + i % 4) : std::nullopt));
  }
  CHECK(label_star(batch, 2).size() == 5);
  CHECK_THROWS_AS(label_star(batch, 1), Error);
  CHECK_THROWS_AS(label_star(batch, 5), Error);
}

TEST_CASE("labels match the brute-force definitions for every N, k <= 8") {
  for (int n = 1; n <= 8; ++n) {
    for (unsigned mask = 0; mask < (1U << n); ++mask) {
      const auto c = with_flags(n, mask);
      const auto rows = convlog::extract_rows(c);
      CHECK(labels_of(label_retry(rows)) == oracle::retry_labels(c));
      for (int k = 1; k <= 8; ++k) {
        const auto cont = labels_of(label_continuation(rows, k));
        const auto both = labels_of(label_intersection(rows, k));
        REQUIRE(cont == oracle::continuation_labels(c, k));
        REQUIRE(both == oracle::intersection_labels(c, k));
        CHECK(std::count(cont.begin(), cont.end(), 0) == std::min(k, n));
      }
    }
  }
}

TEST_CASE("star labels match the brute-force definition for every rating pattern") {
  for (int n = 1; n <= 5; ++n) {
    int patterns = 1;
    for (int i = 0; i < n; ++i) {
      patterns *= 5;
    }
    for (int p = 0; p < patterns; ++p) {
      auto c = oracle::random_conversation(n, 7);
      int code = p;
      for (auto& t : c.turns) {
        const int v = code % 5;
        code /= 5;
        t.response.star_rating = v == 0 ? std::nullopt : std::optional<int>(v);
      }
      const auto rows = convlog::extract_rows(c);
      for (int s = 2; s <= 4; ++s) {
        std::vector<int> expected;
        for (const auto& l : oracle::star_labels(c, s)) {
          if (l) {
            expected.push_back(*l);
          }
        }
        REQUIRE(labels_of(label_star(rows, s)) == expected);
      }
    }
  }
}

TEST_CASE("intersection is the AND of continuation and retry") {
  for (int n_sub = 0; n_sub <= 2; ++n_sub) {
    for (bool regen : {false, true}) {
      const std::vector rows = {row(n_sub, regen)};
      const int both = label_intersection(rows, 2)[0].label;
      const int cont = label_continuation(rows, 2)[0].label;
      const int retry = label_retry(rows)[0].label;
      CHECK(both == (cont & retry));
      CHECK(both <= std::min(cont, retry));
    }
  }
}

TEST_CASE("continuation positives shrink as k grows") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto rows = convlog::extract_rows(oracle::random_conversation(1 + static_cast<int>(seed % 12), seed));
    for (int k = 1; k < 10; ++k) {
      const auto a = labels_of(label_continuation(rows, k));
      const auto b = labels_of(label_continuation(rows, k + 1));
      for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(b[i] <= a[i]);
      }
    }
  }
}

TEST_CASE("star base rate is non-increasing in s") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::vector<ResponseRow> rows;
    std::mt19937_64 rng(seed);
    for (int i = 0; i < 40; ++i) {
      rows.push_back(row(0, false, 1 + static_cast<int>(rng() % 4)));
    }
    double prev = 1.0;
    for (int s = 2; s <= 4; ++s) {
      const auto l = labels_of(label_star(rows, s));
      const double rate = std::accumulate(l.begin(), l.end(), 0.0) / l.size();
      CHECK(rate <= prev);
      prev = rate;
    }
  }
}

TEST_CASE("apply dispatches on the strategy and stamps it on rows") {
  const auto rows = convlog::extract_rows(oracle::random_conversation(5, 3));
  for (const auto& st : {LabelStrategy::continuation(2), LabelStrategy::retry(), LabelStrategy::intersection(1)}) {
    for (const auto& r : labeler::apply(st, rows)) {
      CHECK(r.strategy == st);
    }
  }
  CHECK(labels_of(labeler::apply(LabelStrategy::continuation(2), rows)) == labels_of(label_continuation(rows, 2)));
}

TEST_CASE("strategy descriptors and JSON round-trip") {
  for (const auto& st : {LabelStrategy::continuation(1), LabelStrategy::continuation(7), LabelStrategy::retry(),
                         LabelStrategy::star(2), LabelStrategy::star(4), LabelStrategy::intersection(2)}) {
    CHECK(LabelStrategy::parse(st.descriptor()) == st);
    CHECK(strategy_from_json(to_json(st)) == st);
  }
  CHECK(LabelStrategy::continuation(2).descriptor() == "continuation:k=2");
  CHECK(LabelStrategy::star(3).descriptor() == "star:s=3");
  CHECK(LabelStrategy::retry().descriptor() == "retry");
  for (const char* bad : {"continuation", "retry:k=1", "star:s=5", "star:k=2", "bogus", "intersection:k=0",
                          "continuation:k=x", "continuation:k"}) {
    CHECK_THROWS_AS(LabelStrategy::parse(bad), Error);
  }
}

TEST_CASE("labeled rows round-trip through the labeled-row format") {
  const auto rows = convlog::extract_rows(oracle::random_conversation(6, 11));
  std::ostringstream out;
  const auto labeled = label_intersection(rows, 2);
  for (const auto& r : labeled) {
    write_labeled_row(out, r);
  }
  std::istringstream in(out.str());
  const auto parsed = parse_labeled_rows(in);
  CHECK(parsed.issues.empty());
  REQUIRE(parsed.rows.size() == labeled.size());
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    CHECK(parsed.rows[i].row == labeled[i].row);
    CHECK(parsed.rows[i].label == labeled[i].label);
    CHECK(parsed.rows[i].strategy == labeled[i].strategy);
  }
}

TEST_CASE("malformed labeled rows are reported by line") {
  const auto rows = convlog::extract_rows(oracle::random_conversation(2, 4));
  std::ostringstream out;
  write_labeled_row(out, label_retry(rows)[0]);
  auto j = to_json(label_retry(rows)[1]);
  j["label"] = 2;
  out << "garbage\n" << j.dump() << "\n";
  std::istringstream in(out.str());
  const auto parsed = parse_labeled_rows(in);
  CHECK(parsed.rows.size() == 1);
  REQUIRE(parsed.issues.size() == 2);
  CHECK(parsed.issues[0].line == 2);
  CHECK(parsed.issues[1].line == 3);
}

// ---------------------------------------------------------------------------

TEST_CASE("short contexts render in full") {
  ResponseRow r;
  r.user_message = words(4, "u");
  convlog::Turn t;
  t.user_message = "one two";
  t.response.text = "three";
  r.prior_turns = {t};
  const auto w = render_context(r, 128);
  CHECK(w.text == "USER: one two\nBOT: three\nUSER: u0 u1 u2 u3");
  CHECK_FALSE(w.truncated);
  CHECK(w.token_budget == 128);
  CHECK(split_ws(w.text).size() == 10);
}

TEST_CASE("long contexts keep exactly the newest budget tokens") {
  ResponseRow r;
  for (int i = 0; i < 10; ++i) {
    convlog::Turn t;
    t.user_message = words(14, "q" + std::to_string(i) + "_");
    t.response.text = words(13, "a" + std::to_string(i) + "_");
    r.prior_turns.push_back(t);
  }
  r.user_message = words(9, "now");
  const auto w = render_context(r, 256);
  const auto kept = split_ws(w.text);
  CHECK(kept.size() == 256);
  CHECK(w.truncated);
  CHECK(kept.back() == "now8");
  std::string full;
  for (const auto& t : r.prior_turns) {
    full += "USER: " + t.user_message + "\nBOT: " + t.response.text + "\n";
  }
  full += "USER: " + r.user_message;
  const auto all = split_ws(full);
  CHECK(all.size() == 300);
  CHECK(std::equal(kept.begin(), kept.end(), all.end() - 256));
  CHECK(full.ends_with(w.text));
  CHECK(render_context(r, 256).text == w.text);
}

TEST_CASE("rendering matches a naive serialize-then-cut oracle") {
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    const auto c = oracle::random_conversation(1 + static_cast<int>(seed % 15), seed);
    for (const auto& r : convlog::extract_rows(c)) {
      std::string full;
      if (r.greeting) {
        full = "BOT: " + *r.greeting;
      }
      for (const auto& t : r.prior_turns) {
        full += (full.empty() ? "" : "\n") + std::string("USER: ") + t.user_message + "\nBOT: " + t.response.text;
      }
      full += (full.empty() ? "" : "\n") + std::string("USER: ") + r.user_message;
      const auto all = split_ws(full);
      for (int budget : {1, 3, 7, 16, 40, 128}) {
        const auto w = render_context(r, budget);
        const auto kept = split_ws(w.text);
        const std::size_t expect = std::min<std::size_t>(all.size(), static_cast<std::size_t>(budget));
        REQUIRE(kept.size() == expect);
        CHECK(std::equal(kept.begin(), kept.end(), all.end() - static_cast<std::ptrdiff_t>(expect)));
        CHECK(full.ends_with(w.text));
        CHECK(w.truncated == (all.size() > static_cast<std::size_t>(budget)));
      }
    }
  }
}

TEST_CASE("keep_last_tokens never splits a token") {
  const auto w = keep_last_tokens("  alpha beta\tgamma\n delta  ", 2);
  CHECK(w.text == "gamma\n delta  ");
  CHECK(w.truncated);
  CHECK(keep_last_tokens("a b", 5).text == "a b");
  CHECK_FALSE(keep_last_tokens("a b", 2).truncated);
  CHECK(keep_last_tokens("", 3).text.empty());
  CHECK_THROWS_AS(keep_last_tokens("a", 0), Error);
  CHECK(tokenize(" x  yy\tz ").size() == 3);
}

TEST_CASE("standard budgets") {
  CHECK(is_standard_budget(128));
  CHECK(is_standard_budget(256));
  CHECK(is_standard_budget(512));
  CHECK_FALSE(is_standard_budget(100));
  ResponseRow r;
  r.user_message = "x";
  CHECK(render_context(r, 100).text == "USER: x");
}
