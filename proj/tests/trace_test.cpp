#include "cascade/trace.hpp"

#include <gtest/gtest.h>

#include <string>

#include "testutil.hpp"

namespace cascade {
namespace {

using testutil::write_temp_file;

const char* kWellFormed =
    R"({"id":"a","truth":{"kind":"class","label":1},"local":{"prediction":1,"softmax":[0.2,0.8]},"remote":{"prediction":1,"softmax":[0.1,0.9],"latency_s":0.5,"cost":0.02}}
{"id":"b","truth":{"kind":"answers","accepted":["10th","10th century"]},"local":{"prediction":"10th","token_likelihoods":[0.9,0.4]},"remote":{"prediction":"11th","correct":false}}
{"id":"c","truth":{"kind":"boolean"},"local":{"correct":true}}
)";

TEST(LoadTrace, ParsesWellFormedFileInOrder) {
  // Truth kinds must agree across a dataset, so split the fixture.
  auto path = write_temp_file("well_formed.jsonl",
                              R"({"id":"a","truth":{"kind":"class","label":1},"local":{"prediction":1,"softmax":[0.2,0.8]}}
{"id":"b","truth":{"kind":"class","label":0},"local":{"prediction":1,"softmax":[0.4,0.6]}}
{"id":"c","truth":{"kind":"class","label":1},"local":{"correct":false}}
)");
  TraceDataset dataset = load_trace(path);
  ASSERT_EQ(dataset.records.size(), 3u);
  EXPECT_EQ(dataset.records[0].id, "a");
  EXPECT_EQ(dataset.records[1].id, "b");
  EXPECT_EQ(dataset.records[2].id, "c");
  EXPECT_EQ(dataset.task_kind, TargetKind::Class);
  EXPECT_EQ(dataset.records[0].truth.label, 1);
  ASSERT_TRUE(dataset.records[0].local.softmax);
  EXPECT_EQ(dataset.records[0].local.softmax->size(), 2u);
  EXPECT_FALSE(dataset.records[0].remote);
}

TEST(LoadTrace, ParsesAllObservationFields) {
  auto path = write_temp_file("full_fields.jsonl", kWellFormed);
  // Mixed truth kinds on purpose: must be rejected.
  EXPECT_THROW(load_trace(path), TraceError);
}

TEST(LoadTrace, RejectsSoftmaxNotSummingToOne) {
  auto path = write_temp_file(
      "bad_softmax.jsonl",
      R"({"id":"a","truth":{"kind":"class","label":0},"local":{"softmax":[0.5,0.6]}})");
  try {
    load_trace(path);
    FAIL() << "expected TraceError";
  } catch (const TraceError& e) {
    EXPECT_NE(std::string(e.what()).find("softmax does not sum to 1"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("line 1"), std::string::npos);
  }
}

TEST(LoadTrace, RejectsDuplicateId) {
  auto path = write_temp_file(
      "dup_id.jsonl",
      R"({"id":"a","truth":{"kind":"class","label":0},"local":{"prediction":0}}
{"id":"a","truth":{"kind":"class","label":0},"local":{"prediction":1}}
)");
  try {
    load_trace(path);
    FAIL() << "expected TraceError";
  } catch (const TraceError& e) {
    EXPECT_NE(std::string(e.what()).find("duplicate id \"a\""), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(LoadTrace, ReportsParseErrorWithLineNumber) {
  auto path = write_temp_file(
      "parse_error.jsonl",
      R"({"id":"a","truth":{"kind":"class","label":0},"local":{"prediction":0}}
this is not json
)");
  try {
    load_trace(path);
    FAIL() << "expected TraceError";
  } catch (const TraceError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("parse error"), std::string::npos);
  }
}

TEST(LoadTrace, RejectsUnknownFieldByName) {
  auto path = write_temp_file(
      "unknown_field.jsonl",
      R"({"id":"a","truth":{"kind":"class","label":0},"local":{"prediction":0,"confidenz":0.4}})");
  try {
    load_trace(path);
    FAIL() << "expected TraceError";
  } catch (const TraceError& e) {
    EXPECT_NE(std::string(e.what()).find("confidenz"), std::string::npos);
  }
}

TEST(LoadTrace, RejectsUnresolvableCorrectness) {
  // kind=boolean without an explicit correct flag can never be scored.
  auto path = write_temp_file("unresolvable.jsonl",
                              R"({"id":"a","truth":{"kind":"boolean"},"local":{"prediction":1}})");
  EXPECT_THROW(load_trace(path), TraceError);
}

TEST(LoadTrace, RejectsPositiveLogprob) {
  auto path = write_temp_file(
      "bad_logprob.jsonl",
      R"({"id":"a","truth":{"kind":"class","label":0},"local":{"prediction":0,"top_tokens":[[{"token":"x","logprob":0.5}]]}})");
  EXPECT_THROW(load_trace(path), TraceError);
}

TEST(LoadTrace, RejectsEmptyFile) {
  auto path = write_temp_file("empty.jsonl", "\n");
  EXPECT_THROW(load_trace(path), TraceError);
}

TEST(RoundTrip, SerializeThenLoadIsIdentity) {
  TraceDataset dataset = synthesize_trace({200, 0.7, 0.9, std::nullopt, 11});
  auto path = write_temp_file("roundtrip.jsonl", serialize_trace(dataset));
  TraceDataset reloaded = load_trace(path);
  ASSERT_EQ(reloaded.records.size(), dataset.records.size());
  for (std::size_t i = 0; i < dataset.records.size(); ++i) {
    EXPECT_EQ(reloaded.records[i], dataset.records[i]) << "record " << i;
  }
}

TEST(RoundTrip, PreservesEveryField) {
  TraceRecord record;
  record.id = "full";
  record.truth.kind = TargetKind::Answers;
  record.truth.accepted = {"10th", "10th century"};
  record.local.prediction = Prediction{std::string("10th")};
  record.local.token_likelihoods = std::vector<double>{0.9, 0.25, 1.0};
  record.local.top_tokens = std::vector<std::vector<TokenOption>>{
      {{"10th", -0.1}, {"11th", -2.5}}, {{"century", -0.3}}};
  record.local.activations = std::vector<double>{0.123456789012345, -4.5};
  record.local.latency_s = 0.0321;
  record.local.cost = 0.0;
  record.local.correct = true;
  record.remote = record.local;
  record.remote->prediction = Prediction{std::string("11th")};
  record.remote->correct = false;

  TraceDataset dataset{{record}, TargetKind::Answers, "test"};
  auto path = write_temp_file("full_record.jsonl", serialize_trace(dataset));
  TraceDataset reloaded = load_trace(path);
  ASSERT_EQ(reloaded.records.size(), 1u);
  EXPECT_EQ(reloaded.records[0], record);
}

TEST(ResolveCorrectness, ClassPredictionComparesToLabel) {
  TraceRecord record = testutil::class_record("a", /*label=*/1, /*local=*/1, 0.8);
  EXPECT_TRUE(resolve_correctness(record).local);
  record.local.prediction = Prediction{0};
  EXPECT_FALSE(resolve_correctness(record).local);
}

TEST(ResolveCorrectness, AnswersUseExactMatch) {
  TraceRecord record;
  record.id = "q";
  record.truth.kind = TargetKind::Answers;
  record.truth.accepted = {"10th century", "10th"};
  record.local.prediction = Prediction{std::string("10th")};
  EXPECT_TRUE(resolve_correctness(record).local);
}

TEST(ResolveCorrectness, ExplicitFlagWins) {
  TraceRecord record = testutil::class_record("a", 1, 1, 0.8);
  record.local.correct = false;  // contradicts the matching prediction
  EXPECT_FALSE(resolve_correctness(record).local);
}

TEST(ResolveCorrectness, ArgmaxWhenPredictionAbsent) {
  TraceRecord record;
  record.id = "a";
  record.truth.kind = TargetKind::Class;
  record.truth.label = 2;
  record.local.softmax = std::vector<double>{0.1, 0.2, 0.7};
  EXPECT_TRUE(resolve_correctness(record).local);
}

TEST(ResolveCorrectness, ArgmaxTieBreaksToLowestIndex) {
  TraceRecord record;
  record.id = "a";
  record.truth.kind = TargetKind::Class;
  record.truth.label = 1;
  record.local.softmax = std::vector<double>{0.4, 0.4, 0.2};
  EXPECT_FALSE(resolve_correctness(record).local);  // argmax = index 0
  record.truth.label = 0;
  EXPECT_TRUE(resolve_correctness(record).local);
}

TEST(ResolveCorrectness, RemoteAbsentMeansNoRemoteFlag) {
  TraceRecord record = testutil::class_record("a", 1, 1, 0.8);
  record.remote.reset();
  EXPECT_FALSE(resolve_correctness(record).remote.has_value());
}

TEST(ResolveCorrectness, IsPureAndRepeatable) {
  TraceRecord record = testutil::class_record("a", 1, 0, 0.6);
  const ResolvedCorrectness first = resolve_correctness(record);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(resolve_correctness(record), first);
}

TEST(ExactMatch, StrictByteEquality) {
  EXPECT_TRUE(exact_match("10th", {"10th", "10th century"}));
  EXPECT_FALSE(exact_match("10th.", {"10th"}));
  EXPECT_TRUE(exact_match("", {""}));
  EXPECT_FALSE(exact_match("10TH", {"10th"}));
}

TEST(ExactMatch, OptInNormalization) {
  EXPECT_TRUE(exact_match(" 10TH ", {"10th"}, /*normalize=*/true));
  EXPECT_FALSE(exact_match("10 th", {"10th"}, /*normalize=*/true));
}

TEST(Synthesize, DeterministicForFixedSeed) {
  const SynthSpec spec{1000, 0.7, 0.9, std::nullopt, 7};
  EXPECT_EQ(serialize_trace(synthesize_trace(spec)), serialize_trace(synthesize_trace(spec)));
}

TEST(Synthesize, DifferentSeedsDiffer) {
  EXPECT_NE(serialize_trace(synthesize_trace({100, 0.7, 0.9, std::nullopt, 1})),
            serialize_trace(synthesize_trace({100, 0.7, 0.9, std::nullopt, 2})));
}

TEST(Synthesize, PerfectLocalAccuracyMakesAllLocalCorrect) {
  TraceDataset dataset = synthesize_trace({10, 1.0, 0.5, std::nullopt, 3});
  for (const auto& record : dataset.records) {
    EXPECT_TRUE(resolve_correctness(record).local) << record.id;
  }
}

TEST(Synthesize, RealizedAccuracyWithinHalfCountOfRequest) {
  TraceDataset dataset = synthesize_trace({1000, 0.7, 0.9, std::nullopt, 7});
  std::size_t local = 0, remote = 0;
  for (const auto& record : dataset.records) {
    const auto correctness = resolve_correctness(record);
    local += correctness.local ? 1 : 0;
    remote += *correctness.remote ? 1 : 0;
  }
  EXPECT_NEAR(static_cast<double>(local) / 1000.0, 0.7, 0.001);
  EXPECT_NEAR(static_cast<double>(remote) / 1000.0, 0.9, 0.001);
}

TEST(Synthesize, CorrectRecordsGetHigherConfidenceOnAverage) {
  TraceDataset dataset = synthesize_trace({2000, 0.5, 0.9, std::nullopt, 5});
  double sum_correct = 0.0, sum_wrong = 0.0;
  std::size_t n_correct = 0, n_wrong = 0;
  for (const auto& record : dataset.records) {
    const double top = *std::max_element(record.local.softmax->begin(), record.local.softmax->end());
    if (resolve_correctness(record).local) {
      sum_correct += top;
      ++n_correct;
    } else {
      sum_wrong += top;
      ++n_wrong;
    }
  }
  EXPECT_GT(sum_correct / n_correct, sum_wrong / n_wrong + 0.2);
}

TEST(Synthesize, InfeasibleComplementarityIsRejected) {
  // All locally-correct inputs remote-wrong is impossible at these accuracies.
  EXPECT_THROW(synthesize_trace({100, 0.9, 0.9, 1.0, 1}), TraceError);
  // complementarity 0 requires local-correct to nest in remote-correct.
  EXPECT_THROW(synthesize_trace({100, 0.9, 0.5, 0.0, 1}), TraceError);
}

TEST(Synthesize, ComplementarityControlsOverlap) {
  // 30% of locally-correct records should be remote-wrong.
  TraceDataset dataset = synthesize_trace({1000, 0.6, 0.7, 0.3, 9});
  std::size_t local_correct = 0, local_correct_remote_wrong = 0;
  for (const auto& record : dataset.records) {
    const auto correctness = resolve_correctness(record);
    if (correctness.local) {
      ++local_correct;
      local_correct_remote_wrong += !*correctness.remote ? 1 : 0;
    }
  }
  EXPECT_NEAR(static_cast<double>(local_correct_remote_wrong) / local_correct, 0.3, 0.01);
}

TEST(Synthesize, ValidatesArguments) {
  EXPECT_THROW(synthesize_trace({0, 0.5, 0.5, std::nullopt, 1}), TraceError);
  EXPECT_THROW(synthesize_trace({10, -0.1, 0.5, std::nullopt, 1}), TraceError);
  EXPECT_THROW(synthesize_trace({10, 0.5, 1.5, std::nullopt, 1}), TraceError);
}

}  // namespace
}  // namespace cascade
