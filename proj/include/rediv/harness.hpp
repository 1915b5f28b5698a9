#ifndef REDIV_HARNESS_HPP
#define REDIV_HARNESS_HPP

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rediv/detect.hpp"
#include "rediv/mcts.hpp"
#include "rediv/patch.hpp"

namespace rediv {

// Statement mixture knobs for one synthetic style class.
struct ClassProfile {
  // assign, alu, branch, loop, call, syscall, jmp_chain
  std::array<double, 7> stmt_weights{0.2, 0.2, 0.15, 0.1, 0.2, 0.1, 0.05};
  uint32_t body_min = 4;
  uint32_t body_max = 8;
  uint32_t func_min = 3;
  uint32_t func_max = 8;
  uint32_t calls_min = 1;
  uint32_t calls_max = 3;
  uint8_t data_byte_bias = 0;  // flavor of the .data filler bytes
};

struct CorpusSpec {
  uint32_t count_per_class = 200;
  uint64_t seed = 1;
  ClassProfile benign;
  ClassProfile malicious;

  CorpusSpec();
};

// What the synthesizer knows about a binary it emitted; the test oracle for
// parsing, disassembly, and call enumeration.
struct LayoutRecord {
  rva_t text_va = 0;
  uint32_t text_meaningful = 0;  // .text virtual_size
  uint32_t slack_bytes = 0;
  uint32_t file_size = 0;
  std::vector<rva_t> function_addrs;
  std::vector<rva_t> call_site_addrs;  // every static call, address order
  uint32_t section_count = 0;
};

struct SynthBinary {
  std::string name;
  int label = 0;
  BinaryImage image;
  LayoutRecord layout;
};

// Generates one binary for a style class; deterministic in (seed).
// tight_slack shapes the ".text" padding so stubs cannot fit in slack.
SynthBinary synth_binary(const ClassProfile& profile, int label, uint64_t seed, bool tight_slack,
                         const std::string& name);

// Whole corpus: every binary re-parses, passes the layout audit, runs to a
// clean halt, and the malicious-style class has at least one transformable
// call. Throws GenerationExhausted after bounded retries.
std::vector<SynthBinary> synth_corpus(const CorpusSpec& spec);

struct SampleRecord {
  std::string name;
  int label = 0;           // style class of the sample
  bool detected = false;   // f(z) == 1
  bool evaded = false;     // f(z_adv) == 0 after the search
  uint32_t seq_len = 0;
  uint32_t nop_bytes = 0;
  uint64_t queries = 0;
  double wall_ms = 0.0;    // timing; excluded from replay comparisons
  bool sem_preserved = false;
  double dist_norm = 0.0;
  bool layout_ok = false;
  std::string patch_target;  // "slack" / "new_section" / ""
  bool r1_fired = false;
  bool r2_fired = false;
  std::string error;
};

struct CampaignAggregates {
  std::optional<double> asr;
  std::optional<double> spr;
  double mean_queries = 0.0;                  // over attacked samples
  std::map<uint32_t, uint32_t> seq_len_hist;  // over successful evasions
};

struct CampaignReport {
  std::vector<SampleRecord> records;
  CampaignAggregates aggregates;
  double dist_delta = 0.0;
};

// ASR: evasions over detected samples; nullopt when nothing was detected.
std::optional<double> compute_asr(const std::vector<SampleRecord>& records);

// SPR: semantics-preserving evasions over all evasions; nullopt without any.
std::optional<double> compute_spr(const std::vector<SampleRecord>& records);

CampaignAggregates recompute_aggregates(const std::vector<SampleRecord>& records);

struct CampaignOptions {
  int threads = 1;             // OpenMP fan-out across samples
  bool keep_outputs = false;   // retain patched images in memory
  std::string output_dir;      // when set, write per-sample sidecars
  double dist_percentile = 99.5;
};

struct CampaignOutputs {
  CampaignReport report;
  // parallel to report.records; populated when keep_outputs
  std::vector<std::optional<BinaryImage>> adv_images;
  std::vector<std::optional<PatchPlan>> plans;
  std::vector<TransformationSequence> sequences;
};

// Attacks every detected malicious-style sample with the configured search;
// per-sample failures are recorded, never fatal. Fully determined by
// (corpus, detector, config) except the wall-time fields.
CampaignOutputs run_campaign(const std::vector<SynthBinary>& corpus,
                             const DetectorClient& detector, const MctsConfig& config,
                             const CampaignOptions& options);

// Single-threaded reference implementation with identical outputs.
CampaignOutputs run_campaign_serial(const std::vector<SynthBinary>& corpus,
                                    const DetectorClient& detector, const MctsConfig& config,
                                    const CampaignOptions& options);

// Corpus-wide feature extraction, OpenMP and serial reference.
std::vector<FeatureVector> extract_corpus_features(const std::vector<SynthBinary>& corpus,
                                                   int threads);
std::vector<FeatureVector> extract_corpus_features_serial(const std::vector<SynthBinary>& corpus);

std::string report_to_json(const CampaignReport& report);
CampaignReport report_from_json(const std::string& json_text);

// Corpus directory IO: <name>.bin files plus a corpus.json manifest.
void save_corpus(const std::vector<SynthBinary>& corpus, const std::string& dir);
std::vector<SynthBinary> load_corpus(const std::string& dir);

uint64_t mix_seed(uint64_t seed, uint64_t index);

}  // namespace rediv

#endif  // REDIV_HARNESS_HPP
