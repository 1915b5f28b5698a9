#ifndef REDIV_TRANSFORM_HPP
#define REDIV_TRANSFORM_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rediv/cfg.hpp"
#include "rediv/nopgen.hpp"

namespace rediv {

// Relocated calls and other synthesized stub instructions live at virtual
// addresses above any real section, so ordering and later patch resolution
// stay deterministic. The relocated call of step k sits at kVirtCallBase + k.
constexpr rva_t kVirtCallBase = 0xE0000000;
constexpr rva_t kVirtSynthBase = 0xF0000000;

enum class StubOrder : uint8_t { CallFirst, NopsFirst };

const char* stub_order_name(StubOrder o);

// One call-based redividing step: which call to relocate and which nop
// sequence to inject next to it.
struct Transformation {
  CallSite call_site;
  NopSequence nops;
  uint32_t seq_index = 0;  // 1-based position in the sequence

  // Filled when the step is applied: identity of the call in the address
  // space of the state it was applied to, and its (stable) callee.
  rva_t call_addr = 0;
  rva_t callee_rva = 0;
};

struct TransformationSequence {
  std::vector<Transformation> steps;
  StubOrder order = StubOrder::CallFirst;

  size_t length() const { return steps.size(); }
  uint32_t total_nop_bytes() const;
};

// A CFG with the transformations replayed onto it; immutable value, every
// application returns a new state.
struct CfgState {
  Cfg cfg;
  TransformationSequence applied;
  uint32_t nop_bytes_used = 0;
  uint32_t origin_size = 0;   // original file byte length
  uint32_t budget_bytes = 0;  // nop byte budget derived from origin_size
  rva_t next_virt = kVirtSynthBase;
};

CfgState make_base_state(const Cfg& cfg, uint32_t origin_file_size, double budget_fraction,
                         StubOrder order = StubOrder::CallFirst);

// Splits the call-bearing block into fore/mid/post, rewiring edges; node and
// edge counts each grow by exactly 2. Throws InvalidCallSite / BudgetExceeded.
CfgState apply_redividing(const CfgState& state, const Transformation& t);

// All currently transformable call sites in address order (the relocated
// calls sort after every original site).
std::vector<CallSite> enumerate_actions(const CfgState& state);

// Replayable JSON form: call site addresses, callees, nop byte strings, and
// the stub order.
std::string sequence_to_json(const TransformationSequence& seq);
TransformationSequence sequence_from_json(const std::string& json_text);

// Re-applies a serialized sequence onto a fresh base state.
CfgState replay_sequence(const CfgState& base, const TransformationSequence& seq);

}  // namespace rediv

#endif  // REDIV_TRANSFORM_HPP
