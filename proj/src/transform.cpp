#include "rediv/transform.hpp"

#include <algorithm>

#include "json.hpp"
#include "rediv/error.hpp"

namespace rediv {

namespace {

std::string hex_encode(std::span<const uint8_t> bytes) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (uint8_t b : bytes) {
    out.push_back(digits[b >> 4]);
    out.push_back(digits[b & 0xF]);
  }
  return out;
}

std::vector<uint8_t> hex_decode(const std::string& s) {
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
  };
  if (s.size() % 2 != 0) fail(errc::invalid_call_site, "odd hex string");
  std::vector<uint8_t> out(s.size() / 2);
  for (size_t i = 0; i < out.size(); ++i) {
    const int hi = nibble(s[2 * i]), lo = nibble(s[2 * i + 1]);
    if (hi < 0 || lo < 0) fail(errc::invalid_call_site, "bad hex digit");
    out[i] = static_cast<uint8_t>((hi << 4) | lo);
  }
  return out;
}

// Renumbers blocks by start address and remaps the edge set.
void renumber(Cfg& cfg) {
  std::vector<const BasicBlock*> order;
  order.reserve(cfg.blocks.size());
  for (const auto& [id, b] : cfg.blocks) order.push_back(&b);
  std::sort(order.begin(), order.end(),
            [](const BasicBlock* a, const BasicBlock* b) { return a->start < b->start; });

  std::map<BlockId, BlockId> remap;
  for (size_t i = 0; i < order.size(); ++i) remap[order[i]->id] = static_cast<BlockId>(i);

  std::map<BlockId, BasicBlock> blocks;
  for (auto& [id, b] : cfg.blocks) {
    BasicBlock nb = std::move(b);
    nb.id = remap[id];
    blocks.emplace(nb.id, std::move(nb));
  }
  std::multiset<Edge> edges;
  for (const auto& e : cfg.edges) edges.insert({remap.at(e.from), remap.at(e.to), e.kind});
  cfg.blocks = std::move(blocks);
  cfg.edges = std::move(edges);
  cfg.entry = remap.at(cfg.entry);
}

}  // namespace

const char* stub_order_name(StubOrder o) {
  return o == StubOrder::CallFirst ? "call_first" : "nops_first";
}

uint32_t TransformationSequence::total_nop_bytes() const {
  uint32_t n = 0;
  for (const auto& s : steps) n += s.nops.byte_len;
  return n;
}

CfgState make_base_state(const Cfg& cfg, uint32_t origin_file_size, double budget_fraction,
                         StubOrder order) {
  CfgState st;
  st.cfg = cfg;
  st.applied.order = order;
  st.origin_size = origin_file_size;
  st.budget_bytes = static_cast<uint32_t>(static_cast<double>(origin_file_size) * budget_fraction);
  return st;
}

CfgState apply_redividing(const CfgState& state, const Transformation& t) {
  const auto bit = state.cfg.blocks.find(t.call_site.block);
  if (bit == state.cfg.blocks.end())
    fail(errc::invalid_call_site, "no such block " + std::to_string(t.call_site.block));
  const BasicBlock& v = bit->second;
  if (t.call_site.index >= v.instructions.size() ||
      !is_transformable_call(v.instructions[t.call_site.index]))
    fail(errc::invalid_call_site, "instruction is not a transformable call");
  if (state.nop_bytes_used + t.nops.byte_len > state.budget_bytes)
    fail(errc::budget_exceeded, "nop budget exhausted");

  CfgState out = state;
  Cfg& cfg = out.cfg;
  const uint32_t k = static_cast<uint32_t>(state.applied.steps.size()) + 1;
  const Instruction call = v.instructions[t.call_site.index];
  // A relocated call's displacement is stale; its callee comes from the step
  // that placed it there.
  rva_t callee;
  if (call.address >= kVirtCallBase && call.address < kVirtSynthBase) {
    const uint32_t j = call.address - kVirtCallBase;
    callee = state.applied.steps.at(j - 1).callee_rva;
  } else {
    callee = call.branch_target();
  }

  auto fresh_virt = [&](uint8_t len) {
    const rva_t a = out.next_virt;
    out.next_virt += len;
    return a;
  };

  // v_fore: the prefix ending in a jump that stands where the call stood.
  BasicBlock fore;
  fore.instructions.assign(v.instructions.begin(), v.instructions.begin() + t.call_site.index);
  Instruction fore_jmp = make_jmp(call.address, 0);
  fore.instructions.push_back(fore_jmp);
  fore.start = fore.instructions.front().address;
  fore.terminator = TerminatorKind::Jump;

  // v_mid: the relocated call plus the injected nops, closed by the
  // back-jump. Instruction order follows the configured stub layout.
  BasicBlock mid;
  Instruction reloc_call = call;
  reloc_call.address = kVirtCallBase + k;
  std::vector<Instruction> nops = t.nops.instructions;
  for (auto& n : nops) n.address = fresh_virt(n.length);
  Instruction back_jmp = make_jmp(fresh_virt(5), 0);
  if (state.applied.order == StubOrder::CallFirst) {
    mid.instructions.push_back(reloc_call);
    mid.instructions.insert(mid.instructions.end(), nops.begin(), nops.end());
  } else {
    mid.instructions = std::move(nops);
    mid.instructions.push_back(reloc_call);
  }
  mid.instructions.push_back(back_jmp);
  mid.start = mid.instructions.front().address;
  mid.terminator = TerminatorKind::Jump;

  // v_post: the suffix after the call; when the call ended the block this
  // degenerates to a bare pass-through jump, mirroring the empty-prefix case.
  BasicBlock post;
  post.instructions.assign(v.instructions.begin() + t.call_site.index + 1, v.instructions.end());
  const bool degenerate_post = post.instructions.empty();
  if (degenerate_post) {
    post.instructions.push_back(make_jmp(fresh_virt(5), 0));
    post.terminator = TerminatorKind::Jump;
  } else {
    post.terminator = v.terminator;
  }
  post.start = post.instructions.front().address;

  fore.id = v.id;  // reuse; renumbering fixes everything below
  BlockId next_id = 0;
  for (const auto& [id, b] : cfg.blocks) next_id = std::max(next_id, id);
  mid.id = next_id + 1;
  post.id = next_id + 2;
  const BlockId fore_id = fore.id, mid_id = mid.id, post_id = post.id;

  // Rewire: in-edges enter v_fore; terminator out-edges leave v_post; CallTo
  // edges are rebuilt from instruction contents below.
  const BlockId old_id = v.id;
  std::multiset<Edge> edges;
  for (const auto& e : cfg.edges) {
    if (e.kind == EdgeKind::CallTo && (e.from == old_id)) continue;  // rebuilt
    Edge ne = e;
    if (ne.from == old_id) ne.from = post_id;
    if (ne.to == old_id) ne.to = fore_id;
    edges.insert(ne);
  }
  edges.insert({fore_id, mid_id, EdgeKind::Branch});
  edges.insert({mid_id, post_id, EdgeKind::Branch});

  cfg.blocks.erase(old_id);
  cfg.blocks.emplace(fore_id, std::move(fore));
  cfg.blocks.emplace(mid_id, std::move(mid));
  cfg.blocks.emplace(post_id, std::move(post));

  // CallTo edges of the three new blocks, from content.
  std::map<rva_t, BlockId> start_of;
  for (const auto& [id, b] : cfg.blocks) start_of[b.start] = id;
  for (BlockId id : {fore_id, mid_id, post_id}) {
    const auto it = cfg.blocks.find(id);
    if (it == cfg.blocks.end()) continue;
    for (const auto& ins : it->second.instructions) {
      if (!is_transformable_call(ins)) continue;
      const rva_t target = ins.mnemonic == Mnemonic::CALL_REL32 && ins.address >= kVirtCallBase
                               ? callee
                               : ins.branch_target();
      auto tb = start_of.find(target);
      if (tb == start_of.end())
        fail(errc::invalid_call_site, "call target block missing after redividing");
      edges.insert({id, tb->second, EdgeKind::CallTo});
    }
  }
  cfg.edges = std::move(edges);
  renumber(cfg);
  cfg.call_sites = annotate_call_sites(cfg.blocks);

  Transformation applied = t;
  applied.seq_index = k;
  applied.call_addr = call.address;
  applied.callee_rva = callee;
  out.applied.steps.push_back(std::move(applied));
  out.nop_bytes_used += t.nops.byte_len;
  return out;
}

std::vector<CallSite> enumerate_actions(const CfgState& state) { return state.cfg.call_sites; }

std::string sequence_to_json(const TransformationSequence& seq) {
  nlohmann::json j;
  j["order"] = stub_order_name(seq.order);
  j["steps"] = nlohmann::json::array();
  for (const auto& s : seq.steps) {
    nlohmann::json step;
    step["seq_index"] = s.seq_index;
    step["call_addr"] = s.call_addr;
    step["callee_rva"] = s.callee_rva;
    step["nop_bytes"] = hex_encode(s.nops.bytes());
    j["steps"].push_back(std::move(step));
  }
  return j.dump(2);
}

TransformationSequence sequence_from_json(const std::string& json_text) {
  const auto j = nlohmann::json::parse(json_text);
  TransformationSequence seq;
  seq.order = j.at("order").get<std::string>() == "nops_first" ? StubOrder::NopsFirst
                                                               : StubOrder::CallFirst;
  for (const auto& step : j.at("steps")) {
    Transformation t;
    t.seq_index = step.at("seq_index").get<uint32_t>();
    t.call_addr = step.at("call_addr").get<rva_t>();
    t.callee_rva = step.at("callee_rva").get<rva_t>();
    const auto bytes = hex_decode(step.at("nop_bytes").get<std::string>());
    size_t at = 0;
    while (at < bytes.size()) {
      Instruction ins = decode(bytes, at, 0);
      at += ins.length;
      t.nops.byte_len += ins.length;
      t.nops.instructions.push_back(std::move(ins));
    }
    seq.steps.push_back(std::move(t));
  }
  return seq;
}

CfgState replay_sequence(const CfgState& base, const TransformationSequence& seq) {
  CfgState state = base;
  state.applied.order = seq.order;
  for (const auto& step : seq.steps) {
    Transformation t = step;
    bool found = false;
    for (const auto& site : state.cfg.call_sites) {
      if (state.cfg.call_at(site).address == step.call_addr) {
        t.call_site = site;
        found = true;
        break;
      }
    }
    if (!found)
      fail(errc::invalid_call_site,
           "no call at recorded address " + std::to_string(step.call_addr));
    state = apply_redividing(state, t);
  }
  return state;
}

}  // namespace rediv
