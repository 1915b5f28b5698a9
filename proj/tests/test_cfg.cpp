#include "doctest.h"
#include "helpers.hpp"
#include "rediv/cfg.hpp"
#include "rediv/error.hpp"
#include "rediv/harness.hpp"

using namespace rediv;
using rediv::testing::Asm;
using rediv::testing::image_from_code;

TEST_SUITE_BEGIN("cfg");

TEST_CASE("straight-line body is one block with no edges") {
  Asm a;
  a.put(make_push(a.here(), Reg::EAX));
  a.put(make_mov_ri(a.here(), Reg::EAX, 3));
  a.put(make_pop(a.here(), Reg::EAX));
  a.put(make_ret(a.here()));
  const Cfg cfg = build_cfg(image_from_code(a.bytes));
  CHECK(cfg.blocks.size() == 1);
  CHECK(cfg.edges.empty());
  CHECK(cfg.blocks.at(cfg.entry).terminator == TerminatorKind::Return);
}

TEST_CASE("a conditional jump over one instruction yields three blocks") {
  // enumerated by hand:
  //   0x1000: cmp eax, eax     block 0
  //   0x1002: je 0x1009        block 0 (CondJump)
  //   0x1008: inc eax          block 1
  //   0x1009: ret              block 2
  Asm a;
  a.put(make_alu_rr(a.here(), Mnemonic::CMP_RR, Reg::EAX, Reg::EAX));
  a.put(make_jcc_to(a.here(), Cond::E, 0x1009));
  a.put(make_inc(a.here(), Reg::EAX));
  a.put(make_ret(a.here()));
  const Cfg cfg = build_cfg(image_from_code(a.bytes));
  REQUIRE(cfg.blocks.size() == 3);
  CHECK(cfg.edges.size() == 3);
  CHECK(cfg.edges.count({0, 2, EdgeKind::Branch}) == 1);  // taken
  CHECK(cfg.edges.count({0, 1, EdgeKind::Flow}) == 1);    // fall through
  CHECK(cfg.edges.count({1, 2, EdgeKind::Flow}) == 1);
  CHECK(cfg.blocks.at(0).terminator == TerminatorKind::CondJump);
}

TEST_CASE("calls do not end blocks and produce CallTo edges") {
  // entry: mov; call f; ret    f: ret
  Asm a;
  const rva_t f = 0x1000 + 5 + 5 + 1;
  a.put(make_mov_ri(a.here(), Reg::EAX, 1));
  a.put(make_call_to(a.here(), f));
  a.put(make_ret(a.here()));
  a.put(make_ret(a.here()));
  const Cfg cfg = build_cfg(image_from_code(a.bytes));
  REQUIRE(cfg.blocks.size() == 2);
  CHECK(cfg.blocks.at(0).instructions.size() == 3);
  CHECK(cfg.edges.size() == 1);
  CHECK(cfg.edges.count({0, 1, EdgeKind::CallTo}) == 1);
  REQUIRE(cfg.call_sites.size() == 1);
  CHECK(cfg.call_sites[0].block == 0);
  CHECK(cfg.call_sites[0].index == 1);
}

TEST_CASE("a block ending in a call gets a ReturnTo edge") {
  // jcc targets the instruction right after the call, so the call ends a block
  Asm a;
  a.put(make_alu_rr(a.here(), Mnemonic::CMP_RR, Reg::EAX, Reg::EAX));
  const rva_t after_call = 0x1000 + 2 + 6 + 5;
  a.put(make_jcc_to(a.here(), Cond::NE, after_call));
  a.put(make_call_to(a.here(), after_call + 1));
  a.put(make_ret(a.here()));
  a.put(make_ret(a.here()));  // callee
  const Cfg cfg = build_cfg(image_from_code(a.bytes));
  REQUIRE(cfg.blocks.size() == 4);
  CHECK(cfg.blocks.at(1).terminator == TerminatorKind::Call);
  CHECK(cfg.edges.count({1, 2, EdgeKind::ReturnTo}) == 1);
}

TEST_CASE("a jump into the middle of a decoded run splits the run") {
  Asm a;
  // 0x1000: cmp ; 0x1002: je 0x100a ; 0x1008: inc ; 0x1009: inc ;
  // 0x100a: inc (branch target, mid-run) ; 0x100b: ret
  a.put(make_alu_rr(a.here(), Mnemonic::CMP_RR, Reg::EAX, Reg::EAX));
  a.put(make_jcc_to(a.here(), Cond::E, 0x100A));
  a.put(make_inc(a.here(), Reg::EAX));
  a.put(make_inc(a.here(), Reg::EBX));
  a.put(make_inc(a.here(), Reg::EDX));
  a.put(make_ret(a.here()));
  const Cfg cfg = build_cfg(image_from_code(a.bytes));
  REQUIRE(cfg.blocks.size() == 3);
  CHECK(cfg.blocks.at(1).start == 0x1008);
  CHECK(cfg.blocks.at(1).instructions.size() == 2);  // run cut at the target
  CHECK(cfg.blocks.at(2).start == 0x100A);
  CHECK(cfg.edges.count({0, 2, EdgeKind::Branch}) == 1);
  CHECK(cfg.edges.count({1, 2, EdgeKind::Flow}) == 1);
}

TEST_CASE("entry outside executable space is rejected") {
  BinaryImage img = image_from_code({0x90, 0xC3});
  img.sections[0].perms.execute = false;
  img.entry_point_rva = 0x1000;
  CHECK_THROWS_AS(build_cfg(img), Error);
}

TEST_CASE("synthesized call counts match the layout record") {
  for (uint64_t seed : {11ull, 22ull, 33ull}) {
    const SynthBinary sb = synth_binary(CorpusSpec().malicious, 1, seed, false, "c0");
    const Cfg cfg = build_cfg(sb.image);
    CHECK(cfg.blocks.size() >= sb.layout.function_addrs.size());
    REQUIRE(cfg.call_sites.size() == sb.layout.call_site_addrs.size());
    for (size_t i = 0; i < cfg.call_sites.size(); ++i)
      CHECK(cfg.call_at(cfg.call_sites[i]).address == sb.layout.call_site_addrs[i]);
  }
}

TEST_CASE("call sites are strictly address sorted") {
  const SynthBinary sb = synth_binary(CorpusSpec().benign, 0, 5, false, "c1");
  const Cfg cfg = build_cfg(sb.image);
  for (size_t i = 1; i < cfg.call_sites.size(); ++i)
    CHECK(cfg.call_at(cfg.call_sites[i - 1]).address < cfg.call_at(cfg.call_sites[i]).address);
}

TEST_CASE("construction is deterministic") {
  const SynthBinary sb = synth_binary(CorpusSpec().malicious, 1, 77, true, "c2");
  CHECK(build_cfg(sb.image) == build_cfg(sb.image));
}

TEST_CASE("block bytes reproduce the section bytes") {
  const SynthBinary sb = synth_binary(CorpusSpec().benign, 0, 88, false, "c3");
  const Cfg cfg = build_cfg(sb.image);
  const Section& text = sb.image.sections[0];
  for (const auto& [id, b] : cfg.blocks) {
    std::vector<uint8_t> assembled;
    for (const auto& ins : b.instructions)
      assembled.insert(assembled.end(), ins.raw.begin(), ins.raw.end());
    const uint32_t off = b.start - text.virtual_address;
    REQUIRE(off + assembled.size() <= text.data.size());
    CHECK(std::equal(assembled.begin(), assembled.end(), text.data.begin() + off));
  }
}

TEST_CASE("CallTo edges land on the callee block start") {
  const SynthBinary sb = synth_binary(CorpusSpec().malicious, 1, 99, false, "c4");
  const Cfg cfg = build_cfg(sb.image);
  for (const auto& e : cfg.edges) {
    if (e.kind != EdgeKind::CallTo) continue;
    bool matched = false;
    for (const auto& site : cfg.call_sites) {
      const Instruction& call = cfg.call_at(site);
      if (site.block == e.from && call.branch_target() == cfg.blocks.at(e.to).start)
        matched = true;
    }
    CHECK(matched);
  }
}

TEST_CASE("feature vectors") {
  Asm a;
  a.put(make_nop(a.here()));
  a.put(make_ret(a.here()));
  const Cfg single = build_cfg(image_from_code(a.bytes));
  const FeatureVector fv = extract_features(single);
  REQUIRE(fv.values.size() == kFeatureDim);
  CHECK(fv.values[0] == 1.0);  // block count
  CHECK(fv.values[1] == 0.0);  // edge count
  for (double v : fv.values) {
    CHECK(v >= 0.0);
    CHECK(std::isfinite(v));
  }

  SUBCASE("dimension is fixed across inputs") {
    const SynthBinary sb = synth_binary(CorpusSpec().benign, 0, 3, false, "c5");
    CHECK(extract_features(build_cfg(sb.image)).values.size() == kFeatureDim);
  }
  SUBCASE("structurally identical code at different seeds gives equal vectors") {
    const Cfg again = build_cfg(image_from_code(a.bytes));
    CHECK(extract_features(again) == fv);
  }
}

TEST_CASE("dot export names every block") {
  const SynthBinary sb = synth_binary(CorpusSpec().benign, 0, 4, false, "c6");
  const Cfg cfg = build_cfg(sb.image);
  const std::string dot = to_dot(cfg);
  CHECK(dot.find("digraph") != std::string::npos);
  for (const auto& [id, b] : cfg.blocks)
    CHECK(dot.find("b" + std::to_string(id) + " [label=") != std::string::npos);
}

TEST_SUITE_END();
