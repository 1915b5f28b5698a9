#ifndef REDIV_PATCH_HPP
#define REDIV_PATCH_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "rediv/binfmt.hpp"
#include "rediv/transform.hpp"

namespace rediv {

// Name given to the appended stub section when the slack space cannot hold
// the stubs.
constexpr const char* kInjectedSectionName = ".guis";

enum class PatchTarget : uint8_t { Slack, NewSection };

struct PatchPlan {
  uint32_t delta = 0;  // total stub bytes: per step, call + nops + jmp
  PatchTarget target = PatchTarget::Slack;
  rva_t region_addr = 0;
  StubOrder order = StubOrder::CallFirst;
  std::vector<rva_t> injection_addrs;  // per-step stub start A_inj_k
  std::vector<rva_t> call_addrs;       // per-step patched call location A_call_k
  std::vector<rva_t> back_edges;       // per-step return target A_call_k + 5
};

// Computes the stub space requirement and decides between the ".text" slack
// and a fresh section at A_last + round_up(S_last, page_size); page size is
// the image's section alignment. Throws UnresolvableCallSite.
PatchPlan plan_patch(const BinaryImage& image, const TransformationSequence& seq);

// Rewrites the binary: per step, the call site becomes a jump to its stub and
// the stub holds the relocated call, the nop bytes, and the jump back.
// The result re-parses and satisfies every format invariant.
BinaryImage adv_patch(const BinaryImage& image, const TransformationSequence& seq,
                      const PatchPlan& plan);

// Structural audit: re-parse, alignment, control-transfer targets inside
// executable sections, size_of_image consistency. Violations are data.
std::vector<std::string> verify_layout(const BinaryImage& image);

std::string plan_to_json(const PatchPlan& plan);

}  // namespace rediv

#endif  // REDIV_PATCH_HPP
