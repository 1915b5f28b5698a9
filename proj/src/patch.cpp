#include "rediv/patch.hpp"

#include <algorithm>

#include "json.hpp"
#include "rediv/cfg.hpp"
#include "rediv/error.hpp"

namespace rediv {

namespace {

constexpr uint32_t kJmpLen = 5;
constexpr uint32_t kCallLen = 5;

uint32_t stub_len(const Transformation& t) { return kCallLen + t.nops.byte_len + kJmpLen; }

// Location of the relocated call inside its stub.
rva_t call_pos_in_stub(rva_t stub_addr, const Transformation& t, StubOrder order) {
  return order == StubOrder::CallFirst ? stub_addr : stub_addr + t.nops.byte_len;
}

class ImageWriter {
 public:
  explicit ImageWriter(BinaryImage& img) : img_(img) {}

  void write(rva_t rva, std::span<const uint8_t> bytes) {
    for (auto& s : img_.sections) {
      if (rva < s.virtual_address || rva - s.virtual_address >= s.raw_size) continue;
      const uint32_t off = rva - s.virtual_address;
      if (off + bytes.size() > s.raw_size)
        fail(errc::plan_mismatch, "stub write crosses section raw end");
      std::copy(bytes.begin(), bytes.end(), s.data.begin() + off);
      return;
    }
    fail(errc::plan_mismatch, "stub write outside any section: rva " + std::to_string(rva));
  }

 private:
  BinaryImage& img_;
};

}  // namespace

PatchPlan plan_patch(const BinaryImage& image, const TransformationSequence& seq) {
  if (seq.steps.empty()) fail(errc::plan_mismatch, "empty transformation sequence");

  PatchPlan plan;
  plan.order = seq.order;
  for (const auto& t : seq.steps) plan.delta += stub_len(t);

  const SlackSpace slack = slack_space(image, ".text");
  if (plan.delta < slack.size) {
    plan.target = PatchTarget::Slack;
    plan.region_addr = slack.addr;
  } else {
    plan.target = PatchTarget::NewSection;
    const Section& last = image.sections.back();
    plan.region_addr = static_cast<rva_t>(
        last.virtual_address + round_up(last.virtual_size, image.section_alignment));
  }

  rva_t inj = plan.region_addr;
  for (const auto& t : seq.steps) {
    plan.injection_addrs.push_back(inj);

    rva_t call_addr;
    if (t.call_addr >= kVirtCallBase && t.call_addr < kVirtSynthBase) {
      // The call was relocated by an earlier step; it lives in that stub now.
      const uint32_t j = t.call_addr - kVirtCallBase;
      if (j == 0 || j >= t.seq_index)
        fail(errc::unresolvable_call_site, "relocated call refers to a later step");
      call_addr = call_pos_in_stub(plan.injection_addrs[j - 1], seq.steps[j - 1], seq.order);
    } else {
      if (!image.rva_to_file_offset(t.call_addr))
        fail(errc::unresolvable_call_site,
             "call site rva " + std::to_string(t.call_addr) + " has no file offset");
      call_addr = t.call_addr;
    }
    plan.call_addrs.push_back(call_addr);
    plan.back_edges.push_back(call_addr + kCallLen);
    inj += stub_len(t);
  }
  return plan;
}

BinaryImage adv_patch(const BinaryImage& image, const TransformationSequence& seq,
                      const PatchPlan& plan) {
  if (plan.injection_addrs.size() != seq.steps.size() ||
      plan.call_addrs.size() != seq.steps.size())
    fail(errc::plan_mismatch, "plan does not cover the sequence");
  {
    uint32_t delta = 0;
    for (const auto& t : seq.steps) delta += stub_len(t);
    if (delta != plan.delta) fail(errc::plan_mismatch, "plan delta differs from sequence");
  }

  BinaryImage out = image;
  if (plan.target == PatchTarget::NewSection) {
    const std::vector<uint8_t> zero(plan.delta, 0);
    out = add_section(out, kInjectedSectionName, zero,
                      SectionPerms{.read = true, .write = false, .execute = true});
    if (out.sections.back().virtual_address != plan.region_addr)
      fail(errc::plan_mismatch, "new section address differs from plan");
  } else {
    // Keep the grown stub area inside the declared extent of ".text".
    for (auto& s : out.sections) {
      if (s.name != ".text") continue;
      const uint32_t end = plan.region_addr + plan.delta - s.virtual_address;
      if (end > s.raw_size) fail(errc::plan_mismatch, "stubs exceed slack space");
      s.virtual_size = std::max(s.virtual_size, end);
    }
  }

  ImageWriter writer(out);
  for (size_t k = 0; k < seq.steps.size(); ++k) {
    const Transformation& t = seq.steps[k];
    const rva_t inj = plan.injection_addrs[k];
    const rva_t call_addr = plan.call_addrs[k];

    // (a) trampoline: the original call bytes become a jump to the stub
    writer.write(call_addr, make_jmp_to(call_addr, inj).raw);

    // (b) stub: relocated call (displacement recomputed), nops, jump back
    const rva_t call_pos = call_pos_in_stub(inj, t, plan.order);
    const rva_t nop_pos = plan.order == StubOrder::CallFirst ? inj + kCallLen : inj;
    const rva_t jmp_pos = inj + kCallLen + t.nops.byte_len;
    writer.write(call_pos, make_call_to(call_pos, t.callee_rva).raw);
    writer.write(nop_pos, t.nops.bytes());
    writer.write(jmp_pos, make_jmp_to(jmp_pos, plan.back_edges[k]).raw);
  }

  if (auto why = check_invariants(out)) fail(errc::encoding_error, *why);
  return out;
}

std::vector<std::string> verify_layout(const BinaryImage& image) {
  std::vector<std::string> violations;

  if (auto why = check_invariants(image)) violations.push_back(*why);

  try {
    const auto bytes = serialize_image(image);
    const BinaryImage reparsed = parse_image(bytes);
    if (!(reparsed == image)) violations.push_back("image does not survive a re-parse round trip");
  } catch (const Error& e) {
    violations.push_back(std::string("re-parse failed: ") + e.what());
  }

  if (!violations.empty()) return violations;  // structural audit needs a sane image

  try {
    const Cfg cfg = build_cfg(image);
    for (const auto& [id, b] : cfg.blocks) {
      for (const auto& ins : b.instructions) {
        if (ins.mnemonic != Mnemonic::CALL_REL32 && ins.mnemonic != Mnemonic::JMP_REL32 &&
            ins.mnemonic != Mnemonic::JCC_REL32)
          continue;
        const rva_t target = ins.branch_target();
        const Section* s = image.section_at_rva(target);
        if (!s || !s->perms.execute) {
          char buf[64];
          std::snprintf(buf, sizeof buf, "transfer at 0x%x targets non-code rva 0x%x", ins.address,
                        target);
          violations.push_back(buf);
        }
      }
    }
  } catch (const Error& e) {
    violations.push_back(std::string("disassembly failed: ") + e.what());
  }
  return violations;
}

std::string plan_to_json(const PatchPlan& plan) {
  nlohmann::json j;
  j["delta"] = plan.delta;
  j["target"] = plan.target == PatchTarget::Slack ? "slack" : "new_section";
  j["region_addr"] = plan.region_addr;
  j["order"] = stub_order_name(plan.order);
  j["injection_addrs"] = plan.injection_addrs;
  j["call_addrs"] = plan.call_addrs;
  j["back_edges"] = plan.back_edges;
  return j.dump(2);
}

}  // namespace rediv
