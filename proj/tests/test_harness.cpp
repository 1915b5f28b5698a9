#include <filesystem>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "rediv/emu.hpp"
#include "rediv/error.hpp"
#include "rediv/harness.hpp"

using namespace rediv;

TEST_SUITE_BEGIN("harness");

namespace {

SampleRecord record(bool detected, bool evaded, bool sem, uint32_t seq_len = 1) {
  SampleRecord r;
  r.label = 1;
  r.detected = detected;
  r.evaded = evaded;
  r.sem_preserved = sem;
  r.seq_len = seq_len;
  return r;
}

std::vector<SynthBinary> tiny_corpus(uint32_t per_class, uint64_t seed) {
  CorpusSpec spec;
  spec.count_per_class = per_class;
  spec.seed = seed;
  return synth_corpus(spec);
}

LocalDetectorClient trained_client(const std::vector<SynthBinary>& corpus, double fpr) {
  std::vector<LabeledImage> labeled;
  std::vector<BinaryImage> goodware;
  for (const auto& s : corpus) {
    labeled.push_back({s.image, s.label});
    if (s.label == 0) goodware.push_back(s.image);
  }
  std::mt19937_64 rng(17);
  Detector d = train_cfg_detector(labeled, rng);
  calibrate_fpr(d, goodware, fpr);
  return LocalDetectorClient(std::move(d));
}

}  // namespace

TEST_CASE("same seed gives a byte-identical corpus") {
  CorpusSpec spec;
  spec.count_per_class = 4;
  spec.seed = 11;
  const auto a = synth_corpus(spec);
  const auto b = synth_corpus(spec);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(serialize_image(a[i].image) == serialize_image(b[i].image));
    CHECK(a[i].name == b[i].name);
  }
}

TEST_CASE("every corpus binary verifies and halts cleanly") {
  for (const auto& sb : tiny_corpus(10, 12)) {
    CHECK(verify_layout(sb.image).empty());
    const Trace t = execute(sb.image);
    REQUIRE_FALSE(t.events.empty());
    CHECK(t.events.back().kind == Event::Kind::Halt);
    CHECK(t.events.back().halt == HaltReason::Clean);
    if (sb.label == 1) CHECK_FALSE(build_cfg(sb.image).call_sites.empty());
  }
}

TEST_CASE("slack shaping alternates between tight and roomy") {
  const auto corpus = tiny_corpus(4, 13);
  for (const auto& sb : corpus) {
    const SlackSpace s = slack_space(sb.image, ".text");
    CHECK((s.size == 8 || s.size == 384));
    CHECK(s.size == sb.layout.slack_bytes);
  }
}

TEST_CASE("asr counts evasions over detected samples") {
  std::vector<SampleRecord> records;
  for (int i = 0; i < 10; ++i) records.push_back(record(true, i < 9, true));
  const auto asr = compute_asr(records);
  REQUIRE(asr.has_value());
  CHECK(*asr == doctest::Approx(0.9));

  SUBCASE("undetected samples never enter the denominator") {
    records.push_back(record(false, false, false));
    CHECK(*compute_asr(records) == doctest::Approx(0.9));
  }
  SUBCASE("an all-miss detector leaves asr undefined") {
    std::vector<SampleRecord> none = {record(false, false, false)};
    CHECK_FALSE(compute_asr(none).has_value());
  }
  SUBCASE("independent recount agrees") {
    size_t detected = 0, evaded = 0;
    for (const auto& r : records) {
      detected += r.detected ? 1 : 0;
      evaded += (r.detected && r.evaded) ? 1 : 0;
    }
    CHECK(*compute_asr(records) ==
          doctest::Approx(static_cast<double>(evaded) / static_cast<double>(detected)));
  }
}

TEST_CASE("spr divides preserved evasions by evasions") {
  std::vector<SampleRecord> records;
  for (int i = 0; i < 8; ++i) records.push_back(record(true, true, i != 0));
  const auto spr = compute_spr(records);
  REQUIRE(spr.has_value());
  CHECK(*spr == doctest::Approx(7.0 / 8.0));

  SUBCASE("the denominator is evasions, not corpus size") {
    records.push_back(record(true, false, false));  // failed attack: no effect
    CHECK(*compute_spr(records) == doctest::Approx(7.0 / 8.0));
  }
  SUBCASE("no evasions leaves spr undefined") {
    std::vector<SampleRecord> none = {record(true, false, false)};
    CHECK_FALSE(compute_spr(none).has_value());
  }
}

TEST_CASE("a small campaign runs end to end") {
  const auto corpus = tiny_corpus(12, 500);
  const LocalDetectorClient client = trained_client(corpus, 0.10);
  MctsConfig config;
  config.seed = 7;
  config.budget = 10;
  CampaignOptions options;
  options.keep_outputs = true;
  const CampaignOutputs out = run_campaign_serial(corpus, client, config, options);

  CHECK(out.report.records.size() == 12);  // malicious-class samples only
  CHECK(out.report.dist_delta == kDistDeltaEpsilon);
  for (size_t i = 0; i < out.report.records.size(); ++i) {
    const auto& rec = out.report.records[i];
    CHECK(rec.error.empty());
    if (rec.evaded) {
      CHECK(rec.layout_ok);
      CHECK(rec.sem_preserved);
      CHECK(rec.seq_len >= 1);
      REQUIRE(out.adv_images[i].has_value());
      CHECK(execute(*out.adv_images[i]) == execute(corpus[12 + i].image));
    }
  }
  const CampaignAggregates again = recompute_aggregates(out.report.records);
  CHECK(again.asr == out.report.aggregates.asr);
  CHECK(again.spr == out.report.aggregates.spr);
  CHECK(again.seq_len_hist == out.report.aggregates.seq_len_hist);
}

TEST_CASE("parallel and serial campaigns agree on non-timing fields") {
  const auto corpus = tiny_corpus(8, 321);
  const LocalDetectorClient client = trained_client(corpus, 0.10);
  MctsConfig config;
  config.seed = 9;
  config.budget = 8;
  CampaignOptions serial_opts;
  CampaignOptions parallel_opts;
  parallel_opts.threads = 4;
  const CampaignOutputs s = run_campaign_serial(corpus, client, config, serial_opts);
  const CampaignOutputs p = run_campaign(corpus, client, config, parallel_opts);

  REQUIRE(s.report.records.size() == p.report.records.size());
  for (size_t i = 0; i < s.report.records.size(); ++i) {
    const auto &a = s.report.records[i], &b = p.report.records[i];
    CHECK(a.name == b.name);
    CHECK(a.detected == b.detected);
    CHECK(a.evaded == b.evaded);
    CHECK(a.seq_len == b.seq_len);
    CHECK(a.nop_bytes == b.nop_bytes);
    CHECK(a.queries == b.queries);
    CHECK(a.sem_preserved == b.sem_preserved);
    CHECK(a.patch_target == b.patch_target);
    CHECK(sequence_to_json(s.sequences[i]) == sequence_to_json(p.sequences[i]));
  }
  CHECK(s.report.aggregates.asr == p.report.aggregates.asr);
}

TEST_CASE("corpus feature extraction is identical parallel and serial") {
  const auto corpus = tiny_corpus(6, 654);
  CHECK(extract_corpus_features(corpus, 4) == extract_corpus_features_serial(corpus));
}

TEST_CASE("reports survive the json round trip") {
  const auto corpus = tiny_corpus(5, 911);
  const LocalDetectorClient client = trained_client(corpus, 0.2);
  MctsConfig config;
  config.seed = 3;
  config.budget = 6;
  const CampaignOutputs out = run_campaign_serial(corpus, client, config, {});
  const CampaignReport back = report_from_json(report_to_json(out.report));
  REQUIRE(back.records.size() == out.report.records.size());
  for (size_t i = 0; i < back.records.size(); ++i) {
    CHECK(back.records[i].name == out.report.records[i].name);
    CHECK(back.records[i].evaded == out.report.records[i].evaded);
    CHECK(back.records[i].queries == out.report.records[i].queries);
  }
  CHECK(back.aggregates.asr == out.report.aggregates.asr);
}

TEST_CASE("corpus directories round trip") {
  namespace fs = std::filesystem;
  const std::string dir = "/tmp/rediv-test-corpus";
  fs::remove_all(dir);
  const auto corpus = tiny_corpus(3, 246);
  save_corpus(corpus, dir);
  const auto loaded = load_corpus(dir);
  REQUIRE(loaded.size() == corpus.size());
  for (size_t i = 0; i < corpus.size(); ++i) {
    CHECK(loaded[i].name == corpus[i].name);
    CHECK(loaded[i].label == corpus[i].label);
    CHECK(loaded[i].image == corpus[i].image);
  }
  fs::remove_all(dir);
}

TEST_SUITE_END();
