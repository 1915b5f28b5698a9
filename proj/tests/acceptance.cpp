// Acceptance suite: end-to-end checks over the whole pipeline, one numbered
// criterion per case, each printing a PASS/FAIL line with its measurements.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>

#include "helpers.hpp"
#include "rediv/detect.hpp"
#include "rediv/emu.hpp"
#include "rediv/harness.hpp"
#include "rediv/mcts.hpp"
#include "rediv/patch.hpp"

using namespace rediv;
using rediv::testing::reference_edit_distance;

namespace {

int g_failures = 0;

void report(int num, const char* name, bool pass, const std::string& detail) {
  std::printf("[%2d] %s — %s (%s)\n", num, pass ? "PASS" : "FAIL", name, detail.c_str());
  if (!pass) ++g_failures;
}

double elapsed_s(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Instruction random_instruction(std::mt19937_64& rng) {
  const auto reg = [&] { return static_cast<Reg>(rng() % 8); };
  const auto imm = [&] { return static_cast<uint32_t>(rng()); };
  const auto disp = [&] { return static_cast<int32_t>(rng()); };
  switch (rng() % 21) {
    case 0: return make_mov_ri(0, reg(), imm());
    case 1: return make_mov_rr(0, reg(), reg());
    case 2: return make_push(0, reg());
    case 3: return make_pop(0, reg());
    case 4: return make_alu_ri(0, Mnemonic::ADD_RI, reg(), imm());
    case 5: return make_alu_ri(0, Mnemonic::SUB_RI, reg(), imm());
    case 6: return make_alu_rr(0, Mnemonic::ADD_RR, reg(), reg());
    case 7: return make_alu_rr(0, Mnemonic::SUB_RR, reg(), reg());
    case 8: return make_alu_rr(0, Mnemonic::XOR_RR, reg(), reg());
    case 9: return make_alu_rr(0, Mnemonic::AND_RR, reg(), reg());
    case 10: return make_alu_rr(0, Mnemonic::OR_RR, reg(), reg());
    case 11: return make_alu_rr(0, Mnemonic::CMP_RR, reg(), reg());
    case 12: return make_alu_rr(0, Mnemonic::TEST_RR, reg(), reg());
    case 13: return make_inc(0, reg());
    case 14: return make_dec(0, reg());
    case 15: return make_call(0, disp());
    case 16: return make_jmp(0, disp());
    case 17: return make_jcc(0, static_cast<Cond>(rng() % 6), disp());
    case 18: return make_ret(0);
    case 19: return make_nop(0);
    default: return make_syscall_marker(0);
  }
}

// Shared fixtures, built once.
struct Fixture {
  std::vector<SynthBinary> corpus;             // 200 + 200, seed 1
  Detector cfg_detector_fpr1;                  // calibrated at FPR 1%
  Detector cfg_detector_fpr01;                 // calibrated at FPR 0.1%
  CampaignOutputs prob1, label1, prob01;       // the three campaigns
  double campaign_seconds = 0.0;
};

Fixture build_fixture() {
  Fixture fx;
  CorpusSpec spec;
  spec.count_per_class = 200;
  spec.seed = 1;
  fx.corpus = synth_corpus(spec);

  std::vector<LabeledImage> labeled;
  std::vector<BinaryImage> goodware, malware;
  for (const auto& s : fx.corpus) {
    labeled.push_back({s.image, s.label});
    (s.label ? malware : goodware).push_back(s.image);
  }
  std::mt19937_64 rng(1);
  fx.cfg_detector_fpr1 = train_cfg_detector(labeled, rng);
  fx.cfg_detector_fpr01 = fx.cfg_detector_fpr1;
  calibrate_fpr(fx.cfg_detector_fpr1, goodware, 0.01, &malware);
  calibrate_fpr(fx.cfg_detector_fpr01, goodware, 0.001, &malware);

  const LocalDetectorClient client1(fx.cfg_detector_fpr1);
  const LocalDetectorClient client01(fx.cfg_detector_fpr01);
  MctsConfig config;  // N=6, C=40, S=1, 5% budget
  config.seed = 5;
  CampaignOptions options;
  options.threads = 0;  // all hardware threads
  options.keep_outputs = true;

  const auto t0 = std::chrono::steady_clock::now();
  fx.prob1 = run_campaign(fx.corpus, client1, config, options);
  MctsConfig label_cfg = config;
  label_cfg.feedback = FeedbackMode::LabelOnly;
  fx.label1 = run_campaign(fx.corpus, client1, label_cfg, options);
  fx.prob01 = run_campaign(fx.corpus, client01, config, options);
  fx.campaign_seconds = elapsed_s(t0);
  return fx;
}

void criterion_1_roundtrips(const Fixture& fx) {
  const auto t0 = std::chrono::steady_clock::now();
  size_t failures = 0;
  std::mt19937_64 rng(0xACC1);
  for (int i = 0; i < 10000; ++i) {
    const Instruction ins = random_instruction(rng);
    const auto bytes = encode(ins);
    if (!(decode(bytes, 0, ins.address) == ins)) ++failures;
  }
  size_t checked = 0;
  for (const auto& s : fx.corpus) {
    if (checked == 200) break;
    ++checked;
    const auto bytes = serialize_image(s.image);
    if (!(serialize_image(parse_image(bytes)) == bytes)) ++failures;
  }
  const double secs = elapsed_s(t0);
  char detail[128];
  std::snprintf(detail, sizeof detail,
                "10000 instructions + %zu binaries, %zu failures, %.1fs", checked, failures, secs);
  report(1, "codec and format round-trips", failures == 0 && secs < 30.0, detail);
}

void criterion_2_ucb_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(0xACC2);
  size_t mismatches = 0;
  for (int t = 0; t < 1000; ++t) {
    const double lambda = (t % 5 == 0) ? 0.0 : static_cast<double>(rng() % 300) / 100.0;
    const size_t n_children = 1 + rng() % 8;
    MctsNode parent;
    std::vector<double> oracle_scores;
    uint64_t parent_visits = 0;
    std::vector<std::pair<uint64_t, double>> kids;
    for (size_t c = 0; c < n_children; ++c) {
      const uint64_t visits = 1 + rng() % 50;
      const double reward = static_cast<double>(rng() % (visits * 100 + 1)) / 100.0;
      kids.push_back({visits, reward});
      parent_visits += visits;
    }
    parent.visits = parent_visits;
    size_t oracle_best = 0;
    double oracle_best_score = 0;
    for (size_t c = 0; c < kids.size(); ++c) {
      // independent evaluation of exploit + lambda * sqrt(2 ln v / n_c)
      const double exploit =
          kids[c].second / static_cast<double>(kids[c].first);
      const double explore = std::sqrt(2.0 * std::log(static_cast<double>(parent_visits)) /
                                       static_cast<double>(kids[c].first));
      const double score = exploit + lambda * explore;
      oracle_scores.push_back(score);
      if (c == 0 || score > oracle_best_score) {
        oracle_best = c;
        oracle_best_score = score;
      }
      auto child = std::make_unique<MctsNode>();
      child->visits = kids[c].first;
      child->reward = kids[c].second;
      child->parent = &parent;
      parent.children.push_back(std::move(child));
    }
    for (size_t c = 0; c < kids.size(); ++c) {
      const double got = ucb_score(parent.visits, kids[c].first, kids[c].second, lambda);
      if (std::fabs(got - oracle_scores[c]) > 1e-12) ++mismatches;
    }
    if (&selection(parent, lambda) != parent.children[oracle_best].get()) ++mismatches;
    if (lambda == 0.0) {
      // lambda 0 must reduce to the exploit argmax
      size_t exploit_best = 0;
      double best = -1;
      for (size_t c = 0; c < kids.size(); ++c) {
        const double exploit = kids[c].second / static_cast<double>(kids[c].first);
        if (exploit > best) {
          best = exploit;
          exploit_best = c;
        }
      }
      if (&selection(parent, 0.0) != parent.children[exploit_best].get()) ++mismatches;
    }
  }
  const double secs = elapsed_s(t0);
  char detail[96];
  std::snprintf(detail, sizeof detail, "1000 random trees, %zu mismatches, %.2fs", mismatches,
                secs);
  report(2, "ucb selection oracle at 1e-12", mismatches == 0 && secs < 5.0, detail);
}

void criterion_3_bookkeeping(const Fixture& fx) {
  size_t violations = 0;
  const LocalDetectorClient client(fx.cfg_detector_fpr1);
  MctsConfig config;
  config.keep_tree = true;
  size_t runs = 0;
  for (uint64_t seed = 0; seed < 50; ++seed) {
    const SynthBinary& sample = fx.corpus[200 + seed % 200];
    config.seed = seed;
    const SearchResult r = search(sample.image, build_cfg(sample.image), client, config);
    ++runs;
    if (!r.tree) {
      ++violations;
      continue;
    }
    if (r.tree->visits != static_cast<uint64_t>(r.rounds) * config.budget) ++violations;
    if (r.queries > static_cast<uint64_t>(config.max_length) * config.budget *
                            config.simulations +
                        config.max_length)
      ++violations;
    std::vector<const MctsNode*> stack = {r.tree.get()};
    while (!stack.empty()) {
      const MctsNode* n = stack.back();
      stack.pop_back();
      if (n->reward < 0.0 || n->reward > static_cast<double>(n->visits) + 1e-12) ++violations;
      for (const auto& c : n->children) stack.push_back(c.get());
    }
  }
  char detail[96];
  std::snprintf(detail, sizeof detail, "%zu seeded runs, %zu violations", runs, violations);
  report(3, "mcts bookkeeping laws", violations == 0, detail);
}

void criterion_4_reconstruction(const Fixture& fx) {
  size_t evasions = 0, layout_failures = 0, byte_failures = 0;
  for (size_t i = 0; i < fx.prob1.report.records.size(); ++i) {
    const SampleRecord& rec = fx.prob1.report.records[i];
    if (!rec.evaded) continue;
    ++evasions;
    if (!rec.layout_ok) ++layout_failures;

    const SynthBinary& orig = fx.corpus[200 + i];
    const auto& adv = fx.prob1.adv_images[i];
    const auto& plan = fx.prob1.plans[i];
    if (!adv || !plan) {
      ++byte_failures;
      continue;
    }
    const auto a = serialize_image(orig.image);
    const auto b = serialize_image(*adv);
    if (b.size() < a.size()) {
      ++byte_failures;
      continue;
    }
    std::vector<bool> allowed(a.size(), false);
    uint32_t first_raw = UINT32_MAX;
    for (const auto& s : orig.image.sections) first_raw = std::min(first_raw, s.raw_offset);
    for (uint32_t off = 0; off < first_raw; ++off) allowed[off] = true;  // headers
    for (const rva_t call_addr : plan->call_addrs) {
      const auto off = orig.image.rva_to_file_offset(call_addr);
      if (!off) continue;
      for (uint32_t j = *off; j < *off + 5 && j < a.size(); ++j) allowed[j] = true;
    }
    for (rva_t rva = plan->region_addr; rva < plan->region_addr + plan->delta; ++rva) {
      const auto off = orig.image.rva_to_file_offset(rva);
      if (off && *off < a.size()) allowed[*off] = true;
    }
    for (size_t j = 0; j < a.size(); ++j)
      if (a[j] != b[j] && !allowed[j]) {
        ++byte_failures;
        break;
      }
  }
  char detail[128];
  std::snprintf(detail, sizeof detail,
                "%zu patched binaries, %zu layout failures, %zu byte-conservatism failures",
                evasions, layout_failures, byte_failures);
  report(4, "reconstruction validity", evasions > 0 && layout_failures == 0 && byte_failures == 0,
         detail);
}

void criterion_5_spr(const Fixture& fx) {
  const auto t0 = std::chrono::steady_clock::now();
  size_t evasions = 0, trace_mismatches = 0;
  for (size_t i = 0; i < fx.prob1.report.records.size(); ++i) {
    const SampleRecord& rec = fx.prob1.report.records[i];
    if (!rec.evaded) continue;
    ++evasions;
    if (rec.dist_norm != 0.0 || !rec.sem_preserved) ++trace_mismatches;
  }
  const auto spr = compute_spr(fx.prob1.report.records);
  const double secs = elapsed_s(t0);
  char detail[160];
  std::snprintf(detail, sizeof detail,
                "%zu evasions, %zu trace mismatches, spr=%s, %.1fs "
                "(1.0 exceeds the published analog: overlay/junk-code causes are excluded "
                "by construction)",
                evasions, trace_mismatches, spr ? std::to_string(*spr).c_str() : "undef", secs);
  report(5, "semantic preservation oracle",
         evasions > 0 && trace_mismatches == 0 && spr && *spr == 1.0 && secs < 300.0, detail);
}

void criterion_6_edit_distance() {
  std::mt19937_64 rng(0xACC6);
  size_t mismatches = 0;
  auto random_trace = [&](size_t max_len) {
    std::vector<Event> ev;
    const size_t n = rng() % (max_len + 1);
    for (size_t i = 0; i < n; ++i) {
      if (rng() % 3 == 0) ev.push_back(make_syscall_event(static_cast<uint32_t>(rng() % 5)));
      else ev.push_back(make_call_event(static_cast<uint32_t>(rng() % 7)));
    }
    return ev;
  };
  for (int i = 0; i < 1000; ++i) {
    Trace a, b;
    a.events = random_trace(14);
    b.events = random_trace(14);
    const size_t reference = reference_edit_distance(a.events, b.events);
    if (edit_distance(a.events, b.events) != reference) ++mismatches;
    const size_t longest = std::max(a.events.size(), b.events.size());
    const double expect = longest == 0 ? 0.0 : static_cast<double>(reference) / longest;
    if (dist_norm(a, b) != expect) ++mismatches;
    if (dist_norm(a, b) != dist_norm(b, a)) ++mismatches;
    if (dist_norm(a, a) != 0.0) ++mismatches;
  }
  Trace ab, ac;
  ab.events = {make_call_event(0xA), make_call_event(0xB)};
  ac.events = {make_call_event(0xA), make_call_event(0xC)};
  if (dist_norm(ab, ac) != 0.5) ++mismatches;
  char detail[96];
  std::snprintf(detail, sizeof detail, "1000 random pairs, %zu mismatches", mismatches);
  report(6, "edit-distance oracle", mismatches == 0, detail);
}

void criterion_7_attack_effectiveness(const Fixture& fx) {
  const auto asr_prob = compute_asr(fx.prob1.report.records);
  const auto asr_label = compute_asr(fx.label1.report.records);
  const bool pass = asr_prob && *asr_prob >= 0.80 && asr_label &&
                    *asr_label >= *asr_prob - 0.10 && fx.campaign_seconds < 1800.0;
  char detail[128];
  std::snprintf(detail, sizeof detail, "ASR with-prob=%.3f, label-only=%.3f, campaigns %.0fs",
                asr_prob.value_or(-1), asr_label.value_or(-1), fx.campaign_seconds);
  report(7, "desk-scale attack effectiveness", pass, detail);
}

void criterion_8_fpr_monotonicity(const Fixture& fx) {
  const auto asr1 = compute_asr(fx.prob1.report.records);
  const auto asr01 = compute_asr(fx.prob01.report.records);
  const bool pass = asr1 && asr01 && *asr01 >= *asr1;
  char detail[96];
  std::snprintf(detail, sizeof detail, "ASR@0.1%%=%.3f vs ASR@1%%=%.3f (theta %.3f vs %.3f)",
                asr01.value_or(-1), asr1.value_or(-1), fx.cfg_detector_fpr01.theta,
                fx.cfg_detector_fpr1.theta);
  report(8, "fpr monotonicity analog", pass, detail);
}

void criterion_9_heuristics(const Fixture& fx) {
  size_t new_section = 0, r1_on_new_section = 0, r1_on_fresh = 0;
  size_t evasions = 0, r2_on_patches = 0;
  for (size_t i = 0; i < fx.prob1.report.records.size(); ++i) {
    const SampleRecord& rec = fx.prob1.report.records[i];
    if (!rec.evaded) continue;
    ++evasions;
    if (rec.patch_target == "new_section") {
      ++new_section;
      if (rec.r1_fired) ++r1_on_new_section;
    }
    if (rec.r2_fired) ++r2_on_patches;
  }
  for (const auto& s : fx.corpus)
    if (r1(s.image)) ++r1_on_fresh;

  // crafted goodware with a genuine call-then-jmp: the R2 false positive
  rediv::testing::Asm fp;
  const rva_t target = 0x1000 + 5 + 5;
  fp.put(make_call_to(fp.here(), target));
  fp.put(make_jmp_to(fp.here(), target));
  fp.put(make_ret(fp.here()));
  const bool r2_false_positive = r2(rediv::testing::image_from_code(fp.bytes));

  const bool pass = evasions > 0 && new_section > 0 && r1_on_new_section == new_section &&
                    r1_on_fresh == 0 && r2_on_patches == evasions && r2_false_positive;
  char detail[160];
  std::snprintf(detail, sizeof detail,
                "r1 %zu/%zu new-section patches, %zu/400 fresh; r2 %zu/%zu patches, "
                "false-positive fixture fired=%d",
                r1_on_new_section, new_section, r1_on_fresh, r2_on_patches, evasions,
                static_cast<int>(r2_false_positive));
  report(9, "heuristic defenses", pass, detail);
}

void criterion_10_nop_identity() {
  std::mt19937_64 rng(0xACCA);
  size_t violations = 0;
  for (int i = 0; i < 1000; ++i) {
    const uint32_t budget = 1 + rng() % 32;
    const NopSequence seq = generate_nops(rng, budget);
    if (seq.byte_len > budget) ++violations;

    std::mt19937_64 state_rng(5000 + i);
    MachineState before;
    for (int r = 0; r < 8; ++r)
      if (static_cast<Reg>(r) != Reg::ESP)
        before.regs[r] = static_cast<uint32_t>(state_rng());
    before.reg(Reg::ESP) = kStackTop - 64 - static_cast<uint32_t>(state_rng() % 512) * 4;
    const BufferRun run = execute_buffer(seq.bytes(), 0x1000, before);
    if (run.state.regs != before.regs) ++violations;
  }
  char detail[64];
  std::snprintf(detail, sizeof detail, "1000 sequences, %zu violations", violations);
  report(10, "nop identity under isolated emulation", violations == 0, detail);
}

}  // namespace

int main() {
  std::printf("building the 200+200 corpus and running the three campaigns...\n");
  const Fixture fx = build_fixture();

  criterion_1_roundtrips(fx);
  criterion_2_ucb_oracle();
  criterion_3_bookkeeping(fx);
  criterion_4_reconstruction(fx);
  criterion_5_spr(fx);
  criterion_6_edit_distance();
  criterion_7_attack_effectiveness(fx);
  criterion_8_fpr_monotonicity(fx);
  criterion_9_heuristics(fx);
  criterion_10_nop_identity();

  if (g_failures == 0) {
    std::printf("acceptance: all 10 criteria PASS\n");
    return 0;
  }
  std::printf("acceptance: %d criteria FAILED\n", g_failures);
  return 1;
}
