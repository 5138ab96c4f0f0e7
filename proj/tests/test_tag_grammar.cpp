#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "oracles.hpp"
#include "tagpr/tag_grammar.hpp"

using namespace tagpr;

namespace {

const std::vector<std::string> kPieces = {"<analyze_input>", "</analyze_input>", "<make_decision>", "</make_decision>",
                                          "<foo>", "</foo>", "<", ">", "</", "text", " ", "\n", "é", "<Bad>",
                                          "</>", "<a_b>", "</a_b>", "x<y"};

std::string random_markup(std::mt19937_64& rng, int len) {
  std::string s;
  for (int i = 0; i < len; ++i) s += kPieces[rng() % kPieces.size()];
  return s;
}

std::string random_flat_chain(std::mt19937_64& rng, const std::vector<std::string>& names) {
  std::string s;
  const int spans = static_cast<int>(rng() % 6);
  for (int i = 0; i < spans; ++i) {
    if (rng() % 2) s += "glue ";
    const auto& n = names[rng() % names.size()];
    s += "<" + n + ">body " + std::to_string(rng() % 100) + "</" + n + ">";
  }
  if (rng() % 2) s += "  the answer ";
  return s;
}

}  // namespace

TEST(TagGrammar, RegistryRejectsBadNames) {
  EXPECT_THROW(TagRegistry({"Analyze"}), std::invalid_argument);
  EXPECT_THROW(TagRegistry({""}), std::invalid_argument);
  EXPECT_THROW(TagRegistry({"a", "a"}), std::invalid_argument);
  EXPECT_THROW(TagRegistry({"a"}, 0), std::invalid_argument);
  EXPECT_NO_THROW(TagRegistry({"a_b", "c"}, 1));
}

TEST(TagGrammar, DefaultRegistry) {
  const auto r = TagRegistry::defaults();
  EXPECT_EQ(r.names().size(), 5u);
  EXPECT_EQ(r.min_tag_count(), 3);
  EXPECT_TRUE(r.contains("compare_entities"));
}

TEST(TagGrammar, StructuralViolations) {
  const TagRegistry reg({"a", "b", "c"}, 1);
  EXPECT_TRUE(validate(parse_chain("<a>1<b>2</b></a>"), reg).has(ViolationKind::nested_tag));
  EXPECT_TRUE(validate(parse_chain("<a>1</a></b>"), reg).has(ViolationKind::stray_close));
  EXPECT_TRUE(validate(parse_chain("<a>1</a><b>2"), reg).has(ViolationKind::unclosed_tag));
  EXPECT_TRUE(validate(parse_chain("<a>  </a>"), reg).has(ViolationKind::empty_body));
  EXPECT_TRUE(validate(parse_chain("<a>1</a>"), reg).ok());
}

TEST(TagGrammar, NestedMarkersStayInOuterBody) {
  const auto c = parse_chain("<a>x<b>y</b>z</a>tail");
  ASSERT_EQ(c.spans.size(), 1u);
  EXPECT_EQ(c.spans[0].body, "x<b>y</b>z");
  EXPECT_EQ(c.answer, "tail");
}

TEST(TagGrammar, AnglesThatAreNotMarkersAreText) {
  const auto c = parse_chain("<a>1 < 2 and 3 > 2</a> ok");
  ASSERT_EQ(c.spans.size(), 1u);
  EXPECT_EQ(c.spans[0].body, "1 < 2 and 3 > 2");
  EXPECT_TRUE(c.malformations.empty());
}

TEST(TagGrammar, AnswerWithoutCloseMarkerIsWholeText) {
  EXPECT_EQ(parse_chain("  just an answer ").answer, "just an answer");
}

TEST(TagGrammarProperty, SegmentsReproduceRaw) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 2000; ++trial) {
    const auto raw = random_markup(rng, static_cast<int>(rng() % 30));
    const auto c = parse_chain(raw);
    std::string joined;
    for (auto seg : c.segments()) joined += seg;
    ASSERT_EQ(joined, raw);
    for (std::size_t i = 0; i < c.spans.size(); ++i) {
      ASSERT_LT(c.spans[i].start, c.spans[i].end);
      if (i > 0) {
        ASSERT_LE(c.spans[i - 1].end, c.spans[i].start);
      }
    }
  }
}

TEST(TagGrammarProperty, FlatChainsMatchRegexOracle) {
  std::mt19937_64 rng(2);
  const std::vector<std::string> names{"analyze_input", "make_decision", "x", "a_b"};
  for (int trial = 0; trial < 1000; ++trial) {
    const auto raw = random_flat_chain(rng, names);
    const auto got = parse_chain(raw);
    const auto want = oracle::parse_flat(raw);
    ASSERT_EQ(got.spans.size(), want.spans.size()) << raw;
    for (std::size_t i = 0; i < got.spans.size(); ++i) {
      EXPECT_EQ(got.spans[i].name, want.spans[i].name);
      EXPECT_EQ(got.spans[i].body, want.spans[i].body);
      EXPECT_EQ(got.spans[i].start, want.spans[i].start);
      EXPECT_EQ(got.spans[i].end, want.spans[i].end);
    }
    EXPECT_EQ(got.answer, want.answer) << raw;
    EXPECT_TRUE(got.malformations.empty());
  }
}

TEST(TagGrammarProperty, LargerRegistryNeverAddsUnknownTags) {
  std::mt19937_64 rng(3);
  const TagRegistry small({"analyze_input"}, 1);
  const TagRegistry large({"analyze_input", "make_decision", "foo", "a_b"}, 1);
  for (int trial = 0; trial < 1000; ++trial) {
    const auto c = parse_chain(random_markup(rng, static_cast<int>(rng() % 20)));
    const auto rs = validate(c, small), rl = validate(c, large);
    auto unknown = [](const ValidationReport& r) {
      return std::count_if(r.violations.begin(), r.violations.end(),
                           [](const Violation& v) { return v.kind == ViolationKind::unknown_tag; });
    };
    EXPECT_LE(unknown(rl), unknown(rs));
  }
}

TEST(TagGrammarProperty, LowerMinimumKeepsPassing) {
  std::mt19937_64 rng(4);
  const std::vector<std::string> names{"analyze_input", "make_decision"};
  for (int trial = 0; trial < 500; ++trial) {
    const auto c = parse_chain(random_flat_chain(rng, names));
    for (int k = 1; k <= 5; ++k) {
      if (!validate(c, TagRegistry(names, k)).ok()) continue;
      for (int j = 1; j <= k; ++j) EXPECT_TRUE(validate(c, TagRegistry(names, j)).ok());
    }
  }
}

TEST(TagGrammarProperty, HistogramSumsToOne) {
  std::mt19937_64 rng(5);
  const std::vector<std::string> names{"analyze_input", "make_decision", "x", "a_b"};
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<TaggedChain> corpus;
    for (int i = 0; i < 1 + static_cast<int>(rng() % 10); ++i) corpus.push_back(parse_chain(random_flat_chain(rng, names)));
    const auto h = tag_histogram(corpus);
    if (h.empty()) continue;
    double sum = 0;
    for (const auto& [name, f] : h) {
      EXPECT_GE(f, 0.0);
      sum += f;
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}
