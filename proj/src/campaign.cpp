#include <chrono>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "rediv/emu.hpp"
#include "rediv/error.hpp"
#include "rediv/harness.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace rediv {

namespace {

namespace fs = std::filesystem;

struct SampleOutcome {
  SampleRecord record;
  std::optional<BinaryImage> adv;
  std::optional<PatchPlan> plan;
  TransformationSequence sequence;
  std::string search_log;
};

SampleOutcome attack_sample(const SynthBinary& sample, const DetectorClient& detector,
                            const MctsConfig& base_config, uint64_t sample_index,
                            double dist_delta) {
  SampleOutcome out;
  SampleRecord& rec = out.record;
  rec.name = sample.name;
  rec.label = sample.label;

  const auto t0 = std::chrono::steady_clock::now();
  try {
    rec.detected = detector.query(sample.image).label == 1;
    if (!rec.detected) return out;

    MctsConfig config = base_config;
    config.seed = mix_seed(base_config.seed, sample_index);
    const Cfg cfg = build_cfg(sample.image);
    SearchResult result = search(sample.image, cfg, detector, config);
    out.search_log = search_log_to_json(result);

    rec.queries = result.queries;
    rec.seq_len = static_cast<uint32_t>(result.sequence.length());
    rec.nop_bytes = result.sequence.total_nop_bytes();
    if (result.evaded()) {
      rec.evaded = true;
      const PatchPlan plan = plan_patch(sample.image, result.sequence);
      const BinaryImage adv = adv_patch(sample.image, result.sequence, plan);
      rec.layout_ok = verify_layout(adv).empty();
      rec.patch_target = plan.target == PatchTarget::Slack ? "slack" : "new_section";
      rec.r1_fired = r1(adv);
      rec.r2_fired = r2(adv);
      const TraceComparison cmp = sem_equal(sample.image, adv, dist_delta);
      rec.sem_preserved = cmp.sem_equal;
      rec.dist_norm = cmp.dist_norm;
      out.adv = adv;
      out.plan = plan;
      out.sequence = result.sequence;
    }
  } catch (const Error& e) {
    rec.error = e.what();
  }
  rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                    .count();
  return out;
}

CampaignOutputs run_campaign_impl(const std::vector<SynthBinary>& corpus,
                                  const DetectorClient& detector, const MctsConfig& config,
                                  const CampaignOptions& options, bool parallel) {
  std::vector<const SynthBinary*> targets;
  for (const auto& s : corpus)
    if (s.label == 1) targets.push_back(&s);

  std::vector<BinaryImage> all_images;
  all_images.reserve(corpus.size());
  for (const auto& s : corpus) all_images.push_back(s.image);
  const double dist_delta = calibrate_threshold(all_images, options.dist_percentile);

  std::vector<SampleOutcome> outcomes(targets.size());
  if (parallel) {
#ifdef _OPENMP
    const int nthreads = options.threads > 0 ? options.threads : omp_get_max_threads();
#pragma omp parallel for schedule(dynamic) num_threads(nthreads)
#endif
    for (long i = 0; i < static_cast<long>(targets.size()); ++i)
      outcomes[i] = attack_sample(*targets[i], detector, config, static_cast<uint64_t>(i),
                                  dist_delta);
  } else {
    for (size_t i = 0; i < targets.size(); ++i)
      outcomes[i] = attack_sample(*targets[i], detector, config, i, dist_delta);
  }

  CampaignOutputs out;
  out.report.dist_delta = dist_delta;
  for (auto& o : outcomes) {
    out.report.records.push_back(std::move(o.record));
    out.sequences.push_back(std::move(o.sequence));
    if (options.keep_outputs) {
      out.adv_images.push_back(std::move(o.adv));
      out.plans.push_back(std::move(o.plan));
    }
  }
  out.report.aggregates = recompute_aggregates(out.report.records);

  if (!options.output_dir.empty()) {
    fs::create_directories(options.output_dir);
    for (size_t i = 0; i < outcomes.size(); ++i) {
      const auto& rec = out.report.records[i];
      if (!rec.evaded) continue;
      const std::string stem = options.output_dir + "/" + rec.name;
      if (options.keep_outputs && out.adv_images[i]) {
        const auto bytes = serialize_image(*out.adv_images[i]);
        std::ofstream f(stem + ".adv", std::ios::binary);
        f.write(reinterpret_cast<const char*>(bytes.data()),
                static_cast<std::streamsize>(bytes.size()));
      }
      if (options.keep_outputs && out.plans[i])
        std::ofstream(stem + ".plan.json") << plan_to_json(*out.plans[i]);
      std::ofstream(stem + ".seq.json") << sequence_to_json(out.sequences[i]);
      std::ofstream(stem + ".search.json") << outcomes[i].search_log;
    }
  }
  return out;
}

}  // namespace

std::optional<double> compute_asr(const std::vector<SampleRecord>& records) {
  size_t detected = 0, evaded = 0;
  for (const auto& r : records) {
    if (!r.detected) continue;
    ++detected;
    if (r.evaded) ++evaded;
  }
  if (detected == 0) return std::nullopt;
  return static_cast<double>(evaded) / static_cast<double>(detected);
}

std::optional<double> compute_spr(const std::vector<SampleRecord>& records) {
  size_t evaded = 0, preserved = 0;
  for (const auto& r : records) {
    if (!(r.detected && r.evaded)) continue;
    ++evaded;
    if (r.sem_preserved) ++preserved;
  }
  if (evaded == 0) return std::nullopt;
  return static_cast<double>(preserved) / static_cast<double>(evaded);
}

CampaignAggregates recompute_aggregates(const std::vector<SampleRecord>& records) {
  CampaignAggregates agg;
  agg.asr = compute_asr(records);
  agg.spr = compute_spr(records);
  size_t attacked = 0;
  uint64_t queries = 0;
  for (const auto& r : records) {
    if (!r.detected) continue;
    ++attacked;
    queries += r.queries;
    if (r.evaded) ++agg.seq_len_hist[r.seq_len];
  }
  agg.mean_queries =
      attacked == 0 ? 0.0 : static_cast<double>(queries) / static_cast<double>(attacked);
  return agg;
}

CampaignOutputs run_campaign(const std::vector<SynthBinary>& corpus,
                             const DetectorClient& detector, const MctsConfig& config,
                             const CampaignOptions& options) {
  return run_campaign_impl(corpus, detector, config, options, options.threads != 1);
}

CampaignOutputs run_campaign_serial(const std::vector<SynthBinary>& corpus,
                                    const DetectorClient& detector, const MctsConfig& config,
                                    const CampaignOptions& options) {
  return run_campaign_impl(corpus, detector, config, options, false);
}

std::vector<FeatureVector> extract_corpus_features(const std::vector<SynthBinary>& corpus,
                                                   int threads) {
  std::vector<FeatureVector> out(corpus.size());
#ifdef _OPENMP
  const int nthreads = threads > 0 ? threads : omp_get_max_threads();
#pragma omp parallel for schedule(dynamic) num_threads(nthreads)
#endif
  for (long i = 0; i < static_cast<long>(corpus.size()); ++i)
    out[i] = extract_features(build_cfg(corpus[i].image));
  return out;
}

std::vector<FeatureVector> extract_corpus_features_serial(const std::vector<SynthBinary>& corpus) {
  std::vector<FeatureVector> out(corpus.size());
  for (size_t i = 0; i < corpus.size(); ++i)
    out[i] = extract_features(build_cfg(corpus[i].image));
  return out;
}

std::string report_to_json(const CampaignReport& report) {
  nlohmann::json j;
  j["dist_delta"] = report.dist_delta;
  j["records"] = nlohmann::json::array();
  for (const auto& r : report.records) {
    nlohmann::json e;
    e["name"] = r.name;
    e["label"] = r.label;
    e["detected"] = r.detected;
    e["evaded"] = r.evaded;
    e["seq_len"] = r.seq_len;
    e["nop_bytes"] = r.nop_bytes;
    e["queries"] = r.queries;
    e["wall_ms"] = r.wall_ms;
    e["sem_preserved"] = r.sem_preserved;
    e["dist_norm"] = r.dist_norm;
    e["layout_ok"] = r.layout_ok;
    e["patch_target"] = r.patch_target;
    e["r1_fired"] = r.r1_fired;
    e["r2_fired"] = r.r2_fired;
    e["error"] = r.error;
    j["records"].push_back(std::move(e));
  }
  nlohmann::json agg;
  if (report.aggregates.asr) agg["asr"] = *report.aggregates.asr;
  if (report.aggregates.spr) agg["spr"] = *report.aggregates.spr;
  agg["mean_queries"] = report.aggregates.mean_queries;
  nlohmann::json hist = nlohmann::json::object();
  for (const auto& [len, count] : report.aggregates.seq_len_hist)
    hist[std::to_string(len)] = count;
  agg["seq_len_hist"] = std::move(hist);
  j["aggregates"] = std::move(agg);
  return j.dump(2);
}

CampaignReport report_from_json(const std::string& json_text) {
  const auto j = nlohmann::json::parse(json_text);
  CampaignReport report;
  report.dist_delta = j.at("dist_delta").get<double>();
  for (const auto& e : j.at("records")) {
    SampleRecord r;
    r.name = e.at("name").get<std::string>();
    r.label = e.at("label").get<int>();
    r.detected = e.at("detected").get<bool>();
    r.evaded = e.at("evaded").get<bool>();
    r.seq_len = e.at("seq_len").get<uint32_t>();
    r.nop_bytes = e.at("nop_bytes").get<uint32_t>();
    r.queries = e.at("queries").get<uint64_t>();
    r.wall_ms = e.at("wall_ms").get<double>();
    r.sem_preserved = e.at("sem_preserved").get<bool>();
    r.dist_norm = e.at("dist_norm").get<double>();
    r.layout_ok = e.at("layout_ok").get<bool>();
    r.patch_target = e.at("patch_target").get<std::string>();
    r.r1_fired = e.at("r1_fired").get<bool>();
    r.r2_fired = e.at("r2_fired").get<bool>();
    r.error = e.at("error").get<std::string>();
    report.records.push_back(std::move(r));
  }
  report.aggregates = recompute_aggregates(report.records);
  return report;
}

void save_corpus(const std::vector<SynthBinary>& corpus, const std::string& dir) {
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["entries"] = nlohmann::json::array();
  for (const auto& s : corpus) {
    const std::string file = s.name + ".bin";
    const auto bytes = serialize_image(s.image);
    std::ofstream f(dir + "/" + file, std::ios::binary);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    nlohmann::json e;
    e["name"] = s.name;
    e["label"] = s.label;
    e["file"] = file;
    manifest["entries"].push_back(std::move(e));
  }
  std::ofstream(dir + "/corpus.json") << manifest.dump(2);
}

std::vector<SynthBinary> load_corpus(const std::string& dir) {
  std::ifstream mf(dir + "/corpus.json");
  if (!mf) fail(errc::empty_corpus, "no corpus.json in " + dir);
  nlohmann::json manifest;
  mf >> manifest;
  std::vector<SynthBinary> corpus;
  for (const auto& e : manifest.at("entries")) {
    SynthBinary s;
    s.name = e.at("name").get<std::string>();
    s.label = e.at("label").get<int>();
    std::ifstream f(dir + "/" + e.at("file").get<std::string>(), std::ios::binary);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    s.image = parse_image(bytes);
    corpus.push_back(std::move(s));
  }
  return corpus;
}

}  // namespace rediv
