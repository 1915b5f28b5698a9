#include "rediv/cfg.hpp"

#include <algorithm>
#include <deque>

#include "rediv/error.hpp"

namespace rediv {

namespace {

struct CodeView {
  rva_t base = 0;
  std::span<const uint8_t> bytes;

  bool contains(rva_t rva) const { return rva >= base && rva - base < bytes.size(); }
};

std::vector<CodeView> code_views(const BinaryImage& image) {
  std::vector<CodeView> views;
  for (const auto& s : image.sections) {
    if (!s.perms.execute) continue;
    const uint64_t mapped =
        std::min<uint64_t>(s.raw_size, round_up(s.virtual_size, image.section_alignment));
    views.push_back({s.virtual_address, std::span<const uint8_t>(s.data.data(), mapped)});
  }
  return views;
}

class Builder {
 public:
  Builder(std::vector<CodeView> views, rva_t entry) : views_(std::move(views)), entry_(entry) {}

  Cfg build() {
    enqueue(entry_, true);
    while (!worklist_.empty()) {
      const rva_t start = worklist_.front();
      worklist_.pop_front();
      decode_run(start);
    }
    check_overlaps();
    return form_blocks();
  }

 private:
  const CodeView* view_of(rva_t rva) const {
    for (const auto& v : views_)
      if (v.contains(rva)) return &v;
    return nullptr;
  }

  void enqueue(rva_t rva, bool leader) {
    if (leader) leaders_.insert(rva);
    if (!decoded_.count(rva)) worklist_.push_back(rva);
  }

  void decode_run(rva_t at) {
    while (!decoded_.count(at)) {
      const CodeView* view = view_of(at);
      if (!view)
        fail(errc::decode_failure, "address outside executable sections: " + std::to_string(at));
      Instruction ins;
      try {
        ins = decode(view->bytes, at - view->base, at);
      } catch (const Error& e) {
        fail(errc::decode_failure, std::string(e.what()) + " at rva " + std::to_string(at));
      }
      const rva_t next = at + ins.length;
      const Mnemonic m = ins.mnemonic;
      const rva_t target = ins.branch_target();
      decoded_.emplace(at, std::move(ins));

      if (m == Mnemonic::CALL_REL32) {
        enqueue(target, true);
      } else if (m == Mnemonic::JMP_REL32) {
        enqueue(target, true);
        return;
      } else if (m == Mnemonic::JCC_REL32) {
        enqueue(target, true);
      } else if (m == Mnemonic::RET) {
        return;
      }
      at = next;
    }
  }

  void check_overlaps() const {
    rva_t prev_end = 0;
    bool first = true;
    for (const auto& [addr, ins] : decoded_) {
      if (!first && addr < prev_end)
        fail(errc::decode_failure, "overlapping decode at rva " + std::to_string(addr));
      prev_end = addr + ins.length;
      first = false;
    }
  }

  Cfg form_blocks() {
    Cfg cfg;
    std::map<rva_t, BlockId> block_of_start;

    // Pass 1: cut the decoded runs into blocks.
    std::vector<BasicBlock> blocks;
    BasicBlock cur;
    bool open = false;
    rva_t expected = 0;
    auto close = [&] {
      if (!open) return;
      blocks.push_back(std::move(cur));
      cur = BasicBlock{};
      open = false;
    };
    for (auto& [addr, ins] : decoded_) {
      const bool gap = open && addr != expected;
      if (gap || leaders_.count(addr)) close();
      if (!open) {
        cur.start = addr;
        open = true;
      }
      expected = addr + ins.length;
      const Mnemonic m = ins.mnemonic;
      cur.instructions.push_back(std::move(ins));
      if (m == Mnemonic::JMP_REL32 || m == Mnemonic::JCC_REL32 || m == Mnemonic::RET) close();
    }
    close();

    for (size_t i = 0; i < blocks.size(); ++i) {
      blocks[i].id = static_cast<BlockId>(i);
      block_of_start[blocks[i].start] = blocks[i].id;
    }

    auto target_block = [&](rva_t rva) {
      auto it = block_of_start.find(rva);
      if (it == block_of_start.end())
        fail(errc::decode_failure, "control transfer into unmapped rva " + std::to_string(rva));
      return it->second;
    };

    // Pass 2: terminators and edges.
    for (size_t i = 0; i < blocks.size(); ++i) {
      BasicBlock& b = blocks[i];
      const Instruction& lastins = b.instructions.back();
      const bool has_next = i + 1 < blocks.size() && blocks[i + 1].start == b.end();
      switch (lastins.mnemonic) {
        case Mnemonic::JMP_REL32:
          b.terminator = TerminatorKind::Jump;
          cfg.edges.insert({b.id, target_block(lastins.branch_target()), EdgeKind::Branch});
          break;
        case Mnemonic::JCC_REL32:
          b.terminator = TerminatorKind::CondJump;
          cfg.edges.insert({b.id, target_block(lastins.branch_target()), EdgeKind::Branch});
          if (has_next) cfg.edges.insert({b.id, blocks[i + 1].id, EdgeKind::Flow});
          break;
        case Mnemonic::RET: b.terminator = TerminatorKind::Return; break;
        case Mnemonic::CALL_REL32:
          b.terminator = TerminatorKind::Call;
          if (has_next) cfg.edges.insert({b.id, blocks[i + 1].id, EdgeKind::ReturnTo});
          break;
        default:
          b.terminator = TerminatorKind::FallThrough;
          if (has_next) cfg.edges.insert({b.id, blocks[i + 1].id, EdgeKind::Flow});
          break;
      }
      for (const auto& ins : b.instructions)
        if (is_transformable_call(ins))
          cfg.edges.insert({b.id, target_block(ins.branch_target()), EdgeKind::CallTo});
    }

    for (auto& b : blocks) cfg.blocks.emplace(b.id, std::move(b));
    cfg.entry = target_block(entry_);
    cfg.call_sites = annotate_call_sites(cfg.blocks);
    return cfg;
  }

  std::vector<CodeView> views_;
  rva_t entry_;
  std::deque<rva_t> worklist_;
  std::set<rva_t> leaders_;
  std::map<rva_t, Instruction> decoded_;
};

}  // namespace

uint32_t BasicBlock::byte_len() const {
  uint32_t n = 0;
  for (const auto& i : instructions) n += i.length;
  return n;
}

Cfg build_cfg(const BinaryImage& image) {
  const Section* s = image.section_at_rva(image.entry_point_rva);
  if (!s || !s->perms.execute)
    fail(errc::entry_outside_code, "entry point not inside an executable section");
  return Builder(code_views(image), image.entry_point_rva).build();
}

Cfg build_cfg_from_bytes(std::span<const uint8_t> code, rva_t base, rva_t entry) {
  return Builder({{base, code}}, entry).build();
}

std::vector<CallSite> get_all_calls(const Cfg& cfg) { return cfg.call_sites; }

std::vector<CallSite> annotate_call_sites(const std::map<BlockId, BasicBlock>& blocks) {
  std::vector<CallSite> sites;
  for (const auto& [id, b] : blocks)
    for (uint32_t i = 0; i < b.instructions.size(); ++i)
      if (is_transformable_call(b.instructions[i])) sites.push_back({id, i});
  // Blocks are id-ordered by start address, so this is address order already;
  // keep the sort as the contract, not an assumption.
  std::stable_sort(sites.begin(), sites.end(), [&](const CallSite& a, const CallSite& b2) {
    const rva_t aa = blocks.at(a.block).instructions[a.index].address;
    const rva_t bb = blocks.at(b2.block).instructions[b2.index].address;
    return aa < bb;
  });
  return sites;
}

FeatureVector extract_features(const Cfg& cfg) {
  FeatureVector fv;
  fv.values.assign(kFeatureDim, 0.0);
  const size_t nblocks = cfg.blocks.size();
  fv.values[0] = static_cast<double>(nblocks);
  fv.values[1] = static_cast<double>(cfg.edges.size());

  std::map<BlockId, uint32_t> indeg, outdeg;
  for (const auto& e : cfg.edges) {
    ++outdeg[e.from];
    ++indeg[e.to];
  }
  size_t total_instructions = 0;
  for (const auto& [id, b] : cfg.blocks) {
    const uint32_t in_bucket = std::min<uint32_t>(indeg.count(id) ? indeg[id] : 0, 4);
    const uint32_t out_bucket = std::min<uint32_t>(outdeg.count(id) ? outdeg[id] : 0, 4);
    fv.values[2 + in_bucket] += 1.0;
    fv.values[7 + out_bucket] += 1.0;
    for (const auto& ins : b.instructions) {
      fv.values[12 + static_cast<size_t>(ins.mnemonic)] += 1.0;
      ++total_instructions;
    }
  }
  if (total_instructions > 0)
    for (size_t m = 0; m < kMnemonicCount; ++m)
      fv.values[12 + m] /= static_cast<double>(total_instructions);
  if (nblocks > 0)
    fv.values[12 + kMnemonicCount] =
        static_cast<double>(total_instructions) / static_cast<double>(nblocks);
  return fv;
}

std::string to_dot(const Cfg& cfg) {
  std::string out = "digraph cfg {\n  node [shape=box, fontname=\"monospace\"];\n";
  for (const auto& [id, b] : cfg.blocks) {
    out += "  b" + std::to_string(id) + " [label=\"";
    char addr[16];
    std::snprintf(addr, sizeof addr, "0x%x", b.start);
    out += std::string(addr) + ":\\l";
    for (const auto& ins : b.instructions) out += ins.to_string() + "\\l";
    out += "\"];\n";
  }
  for (const auto& e : cfg.edges) {
    const char* style = e.kind == EdgeKind::CallTo     ? " [style=dashed, color=blue]"
                        : e.kind == EdgeKind::ReturnTo ? " [style=dotted]"
                        : e.kind == EdgeKind::Branch   ? " [color=red]"
                                                       : "";
    out += "  b" + std::to_string(e.from) + " -> b" + std::to_string(e.to) + style + ";\n";
  }
  out += "}\n";
  return out;
}

}  // namespace rediv
