#ifndef REDIV_CFG_HPP
#define REDIV_CFG_HPP

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "rediv/binfmt.hpp"
#include "rediv/isa.hpp"

namespace rediv {

using BlockId = uint32_t;

enum class TerminatorKind : uint8_t { FallThrough, Jump, CondJump, Call, Return };

enum class EdgeKind : uint8_t { Flow, Branch, CallTo, ReturnTo };

struct BasicBlock {
  BlockId id = 0;
  rva_t start = 0;
  std::vector<Instruction> instructions;
  TerminatorKind terminator = TerminatorKind::FallThrough;

  uint32_t byte_len() const;
  rva_t end() const { return start + byte_len(); }

  bool operator==(const BasicBlock&) const = default;
};

struct Edge {
  BlockId from = 0;
  BlockId to = 0;
  EdgeKind kind = EdgeKind::Flow;

  auto operator<=>(const Edge&) const = default;
};

struct CallSite {
  BlockId block = 0;
  uint32_t index = 0;  // instruction index within the block

  auto operator<=>(const CallSite&) const = default;
};

struct Cfg {
  std::map<BlockId, BasicBlock> blocks;
  std::multiset<Edge> edges;
  BlockId entry = 0;
  std::vector<CallSite> call_sites;  // address-ordered transformable calls

  const BasicBlock& block(BlockId id) const { return blocks.at(id); }
  const Instruction& call_at(const CallSite& site) const {
    return blocks.at(site.block).instructions.at(site.index);
  }

  bool operator==(const Cfg&) const = default;
};

// Fixed feature layout: [block count, edge count, in-degree buckets 0..4+,
// out-degree buckets 0..4+, per-mnemonic frequency, mean block length].
constexpr size_t kFeatureDim = 2 + 5 + 5 + kMnemonicCount + 1;

struct FeatureVector {
  std::vector<double> values;

  bool operator==(const FeatureVector&) const = default;
};

// Disassembles the image by recursive traversal from the entry point and all
// static call targets, splitting blocks at every branch target. Deterministic:
// ids are assigned in address order. Throws DecodeFailure / EntryOutsideCode.
Cfg build_cfg(const BinaryImage& image);

// Builds a CFG directly from a code buffer (single executable region); used
// by tests and the corpus synthesizer.
Cfg build_cfg_from_bytes(std::span<const uint8_t> code, rva_t base, rva_t entry);

// The cfg's call sites in address order.
std::vector<CallSite> get_all_calls(const Cfg& cfg);

// Deterministic structural feature vector of fixed dimension kFeatureDim.
FeatureVector extract_features(const Cfg& cfg);

// Graphviz rendering for debugging.
std::string to_dot(const Cfg& cfg);

// Recomputes call_sites from the block contents (address-ordered); exposed
// for transformation code that edits blocks.
std::vector<CallSite> annotate_call_sites(const std::map<BlockId, BasicBlock>& blocks);

}  // namespace rediv

#endif  // REDIV_CFG_HPP
