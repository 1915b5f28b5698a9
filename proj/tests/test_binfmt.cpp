#include "doctest.h"
#include "helpers.hpp"
#include "rediv/binfmt.hpp"
#include "rediv/error.hpp"
#include "rediv/harness.hpp"

using namespace rediv;
using rediv::testing::image_from_code;

TEST_SUITE_BEGIN("binfmt");

TEST_CASE("round_up") {
  CHECK(round_up(5000, 4096) == 8192);
  CHECK(round_up(4096, 4096) == 4096);
  CHECK(round_up(0, 512) == 0);
  // the reconstruction arithmetic: A_last 0x3000, S_last 0x800 -> 0x4000
  CHECK(0x3000 + round_up(0x800, 0x1000) == 0x4000);
  CHECK_THROWS_AS(round_up(5, 0), Error);
  CHECK_THROWS_AS(round_up(5, 3), Error);
}

TEST_CASE("round_up is idempotent") {
  for (uint64_t v : {0ull, 1ull, 511ull, 512ull, 513ull, 123456ull})
    for (uint64_t a : {1ull, 2ull, 512ull, 4096ull})
      CHECK(round_up(round_up(v, a), a) == round_up(v, a));
}

TEST_CASE("serialize then parse is identity on a one-section image") {
  const BinaryImage img = image_from_code({0x90, 0xC3});
  const auto bytes = serialize_image(img);
  CHECK(parse_image(bytes) == img);
}

TEST_CASE("truncated input is a malformed header") {
  const std::vector<uint8_t> tiny = {'M', 'Z', 0x00};
  CHECK_THROWS_AS(parse_image(tiny), Error);
  try {
    parse_image(tiny);
  } catch (const Error& e) {
    CHECK(e.code() == errc::malformed_header);
  }
}

TEST_CASE("synthesized binary parses with two sections and entry in .text") {
  const SynthBinary sb = synth_binary(CorpusSpec().malicious, 1, 42, false, "t0");
  const auto bytes = serialize_image(sb.image);
  const BinaryImage parsed = parse_image(bytes);
  REQUIRE(parsed.sections.size() == sb.layout.section_count);
  CHECK(parsed.sections[0].name == ".text");
  CHECK(parsed.sections[1].name == ".data");
  const Section* entry_sec = parsed.section_at_rva(parsed.entry_point_rva);
  REQUIRE(entry_sec != nullptr);
  CHECK(entry_sec->name == ".text");
  CHECK(entry_sec->perms.execute);
}

TEST_CASE("serialized length ends at the last section's raw extent") {
  const SynthBinary sb = synth_binary(CorpusSpec().benign, 0, 7, true, "t1");
  const auto bytes = serialize_image(sb.image);
  const Section& last = sb.image.sections.back();
  CHECK(bytes.size() == last.raw_offset + last.raw_size);
  CHECK(bytes.size() == sb.layout.file_size);
}

TEST_CASE("inconsistent size_of_image fails serialization") {
  BinaryImage img = image_from_code({0x90, 0xC3});
  img.size_of_image += 0x1000;
  CHECK_THROWS_AS(serialize_image(img), Error);
  try {
    serialize_image(img);
  } catch (const Error& e) {
    CHECK(e.code() == errc::invariant_violation);
  }
}

TEST_CASE("slack space from the layout record") {
  // 0x700 meaningful bytes padded to a 0x800 raw extent leaves 0x100
  std::vector<uint8_t> code(0x700, 0x90);
  code[0x6FF] = 0xC3;
  BinaryImage img = image_from_code(std::move(code));
  const SlackSpace s = slack_space(img, ".text");
  CHECK(s.addr == 0x1700);
  CHECK(s.size == 0x100);
}

TEST_CASE("fully packed section has no slack") {
  std::vector<uint8_t> code(0x800, 0x90);
  code[0x7FF] = 0xC3;
  BinaryImage img = image_from_code(std::move(code));
  CHECK(slack_space(img, ".text").size == 0);
  CHECK_THROWS_AS(slack_space(img, ".nope"), Error);
}

TEST_CASE("add_section appends at the rounded virtual end") {
  // last section at VA 0x3000 with virtual_size 0x800 -> new VA 0x4000
  BinaryImage img = image_from_code({0x90, 0xC3});
  img.sections[0].virtual_address = 0x3000;
  img.sections[0].virtual_size = 0x800;
  img.sections[0].data.resize(0x800, 0);
  img.sections[0].raw_size = 0x800;
  img.entry_point_rva = 0x3000;
  img.size_of_image = 0x4000;

  const std::vector<uint8_t> payload = {0xAA};
  const BinaryImage grown =
      add_section(img, ".guis", payload, {.read = true, .write = false, .execute = true});
  REQUIRE(grown.sections.size() == 2);
  CHECK(grown.sections.back().virtual_address == 0x4000);
  CHECK(grown.size_of_image == 0x4000 + round_up(1, 0x1000));
  CHECK(check_invariants(grown) == std::nullopt);
  CHECK(parse_image(serialize_image(grown)) == grown);

  SUBCASE("pre-existing sections are byte-identical") {
    CHECK(grown.sections[0].virtual_address == img.sections[0].virtual_address);
    CHECK(grown.sections[0].raw_offset == img.sections[0].raw_offset);
    CHECK(grown.sections[0].data == img.sections[0].data);
  }
  SUBCASE("executable permission is visible on the new section") {
    CHECK(grown.sections.back().perms.execute);
  }
  SUBCASE("duplicate names are rejected") {
    CHECK_THROWS_AS(add_section(grown, ".guis", payload, {}), Error);
  }
}

TEST_CASE("emitted corpus images satisfy the alignment invariants") {
  CorpusSpec spec;
  spec.count_per_class = 5;
  spec.seed = 99;
  for (const auto& sb : synth_corpus(spec)) {
    CHECK(check_invariants(sb.image) == std::nullopt);
    const BinaryImage reparsed = parse_image(serialize_image(sb.image));
    for (const auto& s : reparsed.sections) {
      CHECK(s.virtual_address % reparsed.section_alignment == 0);
      CHECK(s.raw_offset % reparsed.file_alignment == 0);
    }
  }
}

TEST_SUITE_END();
