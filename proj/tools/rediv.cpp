// Command-line front end: corpus synthesis, detector training, evasion
// campaigns, trace verification, and heuristic scans.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

#include "CLI11.hpp"
#include "json.hpp"
#include "rediv/detect.hpp"
#include "rediv/emu.hpp"
#include "rediv/error.hpp"
#include "rediv/harness.hpp"
#include "rediv/mcts.hpp"

namespace fs = std::filesystem;
using namespace rediv;

namespace {

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CLI::ValidationError("cannot open " + path);
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(f)),
                              std::istreambuf_iterator<char>());
}

ClassProfile profile_from_json(const nlohmann::json& j, ClassProfile base) {
  if (j.contains("stmt_weights")) {
    const auto w = j["stmt_weights"].get<std::vector<double>>();
    for (size_t i = 0; i < base.stmt_weights.size() && i < w.size(); ++i)
      base.stmt_weights[i] = w[i];
  }
  if (j.contains("body_min")) base.body_min = j["body_min"].get<uint32_t>();
  if (j.contains("body_max")) base.body_max = j["body_max"].get<uint32_t>();
  if (j.contains("func_min")) base.func_min = j["func_min"].get<uint32_t>();
  if (j.contains("func_max")) base.func_max = j["func_max"].get<uint32_t>();
  if (j.contains("calls_min")) base.calls_min = j["calls_min"].get<uint32_t>();
  if (j.contains("calls_max")) base.calls_max = j["calls_max"].get<uint32_t>();
  if (j.contains("data_byte_bias")) base.data_byte_bias = j["data_byte_bias"].get<uint8_t>();
  return base;
}

CorpusSpec spec_from_file(const std::string& path) {
  CorpusSpec spec;
  std::ifstream f(path);
  if (!f) throw CLI::ValidationError("cannot open " + path);
  nlohmann::json j;
  f >> j;
  if (j.contains("count_per_class")) spec.count_per_class = j["count_per_class"].get<uint32_t>();
  if (j.contains("seed")) spec.seed = j["seed"].get<uint64_t>();
  if (j.contains("benign")) spec.benign = profile_from_json(j["benign"], spec.benign);
  if (j.contains("malicious")) spec.malicious = profile_from_json(j["malicious"], spec.malicious);
  return spec;
}

int cmd_synth(const std::string& spec_path, const std::string& out_dir, uint32_t count,
              uint64_t seed) {
  CorpusSpec spec;
  if (!spec_path.empty()) spec = spec_from_file(spec_path);
  if (count > 0) spec.count_per_class = count;
  if (seed > 0) spec.seed = seed;
  const auto corpus = synth_corpus(spec);
  save_corpus(corpus, out_dir);
  std::cout << "wrote " << corpus.size() << " binaries to " << out_dir << "\n";
  return 0;
}

int cmd_train(const std::string& kind, const std::string& corpus_dir, double fpr,
              const std::string& out_path, uint64_t seed) {
  const auto corpus = load_corpus(corpus_dir);
  std::vector<LabeledImage> labeled;
  std::vector<BinaryImage> goodware, malware;
  for (const auto& s : corpus) {
    labeled.push_back({s.image, s.label});
    (s.label ? malware : goodware).push_back(s.image);
  }
  std::mt19937_64 rng(seed);
  Detector d = kind == "bytes" ? train_bytes_detector(labeled, rng)
                               : train_cfg_detector(labeled, rng);
  const CalibrationResult cal = calibrate_fpr(d, goodware, fpr, &malware);
  std::ofstream(out_path) << detector_to_json(d);
  std::cout << "trained " << kind << " detector on " << corpus.size() << " samples: theta="
            << cal.theta << " achieved_fpr=" << cal.achieved_fpr
            << " tpr=" << cal.tpr_at_theta << "\n";
  return 0;
}

int cmd_attack(const std::string& model_path, const std::string& external_cmd,
               const std::string& mode, uint32_t n, uint32_t c, uint32_t s, double budget,
               uint64_t seed, const std::string& in_dir, const std::string& out_path,
               const std::string& sidecar_dir, int threads, const std::string& nop_opcodes,
               const std::string& stub_order) {
  const auto corpus = load_corpus(in_dir);

  std::unique_ptr<DetectorClient> client;
  if (!external_cmd.empty()) {
    client = std::make_unique<ExternalDetector>(std::vector<std::string>{external_cmd});
  } else {
    const auto model_bytes = read_file(model_path);
    client = std::make_unique<LocalDetectorClient>(
        detector_from_json(std::string(model_bytes.begin(), model_bytes.end())));
  }

  MctsConfig config;
  config.max_length = n;
  config.budget = c;
  config.simulations = s;
  config.size_budget_fraction = budget;
  config.seed = seed;
  config.feedback = mode == "label" ? FeedbackMode::LabelOnly : FeedbackMode::WithProb;
  if (!nop_opcodes.empty()) config.nop_whitelist = parse_nop_whitelist(nop_opcodes);
  if (stub_order == "nops_first") config.stub_order = StubOrder::NopsFirst;

  CampaignOptions options;
  options.threads = threads;
  options.keep_outputs = true;
  options.output_dir = sidecar_dir;

  const CampaignOutputs out = run_campaign(corpus, *client, config, options);
  std::ofstream(out_path) << report_to_json(out.report);
  const auto& agg = out.report.aggregates;
  std::cout << "attacked " << out.report.records.size() << " samples: asr="
            << (agg.asr ? std::to_string(*agg.asr) : "undefined")
            << " spr=" << (agg.spr ? std::to_string(*agg.spr) : "undefined")
            << " mean_queries=" << agg.mean_queries << "\n"
            << "report written to " << out_path << "\n";
  return 0;
}

int cmd_verify(const std::string& orig_path, const std::string& adv_path,
               const std::string& dot_dir) {
  const BinaryImage orig = parse_image(read_file(orig_path));
  const BinaryImage adv = parse_image(read_file(adv_path));
  for (const auto& [name, img] : {std::pair{"original", &orig}, std::pair{"adversarial", &adv}}) {
    const auto violations = verify_layout(*img);
    for (const auto& v : violations) std::cout << name << " layout violation: " << v << "\n";
    if (!violations.empty()) return 1;
  }
  if (!dot_dir.empty()) {
    fs::create_directories(dot_dir);
    std::ofstream(dot_dir + "/orig.dot") << to_dot(build_cfg(orig));
    std::ofstream(dot_dir + "/adv.dot") << to_dot(build_cfg(adv));
  }
  const TraceComparison cmp = sem_equal(orig, adv, kDistDeltaEpsilon);
  std::cout << "dist_norm=" << cmp.dist_norm << " dist_delta=" << cmp.dist_delta
            << " sem_equal=" << (cmp.sem_equal ? "yes" : "no") << "\n";
  return cmp.sem_equal ? 0 : 1;
}

int cmd_scan(const std::string& rule, const std::string& in_dir) {
  const auto corpus = load_corpus(in_dir);
  size_t fired = 0;
  for (const auto& s : corpus) {
    const bool hit = rule == "r1" ? r1(s.image) : r2(s.image);
    fired += hit ? 1 : 0;
    std::cout << s.name << ": " << (hit ? "FLAG" : "clean") << "\n";
  }
  std::cout << rule << " fired on " << fired << "/" << corpus.size() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"black-box evasion robustness harness for toy executable detectors"};
  app.require_subcommand(1);

  std::string spec_path, out_dir;
  uint32_t synth_count = 0;
  uint64_t synth_seed = 0;
  auto* synth = app.add_subcommand("synth", "synthesize a labeled toy corpus");
  synth->add_option("--spec", spec_path, "corpus spec json");
  synth->add_option("--out", out_dir, "output directory")->required();
  synth->add_option("--count", synth_count, "binaries per class (overrides spec)");
  synth->add_option("--seed", synth_seed, "corpus seed (overrides spec)");

  std::string kind = "cfg", corpus_dir, model_out = "model.json";
  double fpr = 0.01;
  uint64_t train_seed = 1;
  auto* train = app.add_subcommand("train", "train and calibrate a toy detector");
  train->add_option("--kind", kind, "bytes|cfg")->check(CLI::IsMember({"bytes", "cfg"}));
  train->add_option("--corpus", corpus_dir, "corpus directory")->required();
  train->add_option("--fpr", fpr, "target false-positive rate");
  train->add_option("--out", model_out, "model output path");
  train->add_option("--seed", train_seed, "training seed");

  std::string model_path, external_cmd, mode = "prob", attack_in, report_out = "report.json";
  std::string sidecar_dir, nop_opcodes, stub_order = "call_first";
  uint32_t n = 6, c = 40, s = 1;
  double budget = 0.05;
  uint64_t attack_seed = 0;
  int threads = 0;
  auto* attack = app.add_subcommand("attack", "run an evasion campaign against a detector");
  attack->add_option("--model", model_path, "detector model json");
  attack->add_option("--external-cmd", external_cmd,
                     "external detector command speaking the line protocol");
  attack->add_option("--mode", mode, "prob|label")->check(CLI::IsMember({"prob", "label"}));
  attack->add_option("--n", n, "max transformation sequence length");
  attack->add_option("--c", c, "search iterations per round");
  attack->add_option("--s", s, "simulation rollout depth");
  attack->add_option("--budget", budget, "nop size budget as a fraction of file size");
  attack->add_option("--seed", attack_seed, "attack seed");
  attack->add_option("--in", attack_in, "corpus directory")->required();
  attack->add_option("--out", report_out, "report output path");
  attack->add_option("--sidecar-dir", sidecar_dir, "per-sample sidecar directory");
  attack->add_option("--threads", threads, "worker threads (0 = all)");
  attack->add_option("--nop-opcodes", nop_opcodes, "comma-separated nop opcode whitelist");
  attack->add_option("--stub-order", stub_order, "call_first|nops_first")
      ->check(CLI::IsMember({"call_first", "nops_first"}));

  std::string orig_path, adv_path, dot_dir;
  auto* verify = app.add_subcommand("verify", "compare traces of two binaries");
  verify->add_option("--orig", orig_path, "original binary")->required();
  verify->add_option("--adv", adv_path, "patched binary")->required();
  verify->add_option("--emit-dot", dot_dir, "write both CFGs as graphviz into this directory");

  std::string rule = "r1", scan_in;
  auto* scan = app.add_subcommand("scan", "run a heuristic rule over a corpus");
  scan->add_option("--rule", rule, "r1|r2")->check(CLI::IsMember({"r1", "r2"}));
  scan->add_option("--in", scan_in, "corpus directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) return cmd_synth(spec_path, out_dir, synth_count, synth_seed);
    if (train->parsed()) return cmd_train(kind, corpus_dir, fpr, model_out, train_seed);
    if (attack->parsed()) {
      if (model_path.empty() == external_cmd.empty()) {
        std::cerr << "attack needs exactly one of --model or --external-cmd\n";
        return 2;
      }
      return cmd_attack(model_path, external_cmd, mode, n, c, s, budget, attack_seed, attack_in,
                        report_out, sidecar_dir, threads, nop_opcodes, stub_order);
    }
    if (verify->parsed()) return cmd_verify(orig_path, adv_path, dot_dir);
    if (scan->parsed()) return cmd_scan(rule, scan_in);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
