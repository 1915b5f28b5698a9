#include "rediv/nopgen.hpp"

#include <algorithm>

#include "rediv/error.hpp"

namespace rediv {

namespace {

// Registers eligible for mutation inside a production. ESP is excluded so a
// half-applied pair can never move the stack pointer outside its region.
constexpr std::array<Reg, 7> kNopRegs = {Reg::EAX, Reg::ECX, Reg::EDX, Reg::EBX,
                                         Reg::EBP, Reg::ESI, Reg::EDI};

enum class Prod : size_t {
  Nop = 0,
  AddSubImm,
  SubAddImm,
  IncDec,
  DecInc,
  OrSelf,
  AndSelf,
  PushXorPop,
  CmpRR,
  TestRR,
  PushPop,
  MovSelf,
  kCount,
};

Reg pick_reg(std::mt19937_64& rng) {
  return kNopRegs[rng() % kNopRegs.size()];
}

// Expands one production at address 0; addresses are assigned by callers.
std::vector<Instruction> expand(Prod p, std::mt19937_64& rng) {
  const Reg r = pick_reg(rng);
  switch (p) {
    case Prod::Nop: return {make_nop(0)};
    case Prod::AddSubImm: {
      const uint32_t k = static_cast<uint32_t>(rng() % 0x10000);
      return {make_alu_ri(0, Mnemonic::ADD_RI, r, k), make_alu_ri(0, Mnemonic::SUB_RI, r, k)};
    }
    case Prod::SubAddImm: {
      const uint32_t k = static_cast<uint32_t>(rng() % 0x10000);
      return {make_alu_ri(0, Mnemonic::SUB_RI, r, k), make_alu_ri(0, Mnemonic::ADD_RI, r, k)};
    }
    case Prod::IncDec: return {make_inc(0, r), make_dec(0, r)};
    case Prod::DecInc: return {make_dec(0, r), make_inc(0, r)};
    case Prod::OrSelf: return {make_alu_rr(0, Mnemonic::OR_RR, r, r)};
    case Prod::AndSelf: return {make_alu_rr(0, Mnemonic::AND_RR, r, r)};
    case Prod::PushXorPop:
      return {make_push(0, r), make_alu_rr(0, Mnemonic::XOR_RR, r, r), make_pop(0, r)};
    case Prod::CmpRR: return {make_alu_rr(0, Mnemonic::CMP_RR, r, pick_reg(rng))};
    case Prod::TestRR: return {make_alu_rr(0, Mnemonic::TEST_RR, r, pick_reg(rng))};
    case Prod::PushPop: return {make_push(0, r), make_pop(0, r)};
    case Prod::MovSelf: return {make_mov_rr(0, r, r)};
    case Prod::kCount: break;
  }
  return {};
}

struct ProdInfo {
  NopProduction decl;
  Prod id;
};

const std::vector<ProdInfo>& production_table() {
  static const std::vector<ProdInfo> table = {
      {{"nop", NopCategory::DataTransfer, 1, {Mnemonic::NOP}}, Prod::Nop},
      {{"add-sub-imm", NopCategory::Arithmetic, 12, {Mnemonic::ADD_RI, Mnemonic::SUB_RI}},
       Prod::AddSubImm},
      {{"sub-add-imm", NopCategory::Arithmetic, 12, {Mnemonic::SUB_RI, Mnemonic::ADD_RI}},
       Prod::SubAddImm},
      {{"inc-dec", NopCategory::Arithmetic, 2, {Mnemonic::INC_R, Mnemonic::DEC_R}}, Prod::IncDec},
      {{"dec-inc", NopCategory::Arithmetic, 2, {Mnemonic::DEC_R, Mnemonic::INC_R}}, Prod::DecInc},
      {{"or-self", NopCategory::Logical, 2, {Mnemonic::OR_RR}}, Prod::OrSelf},
      {{"and-self", NopCategory::Logical, 2, {Mnemonic::AND_RR}}, Prod::AndSelf},
      {{"push-xor-pop", NopCategory::Logical, 4,
        {Mnemonic::PUSH_R, Mnemonic::XOR_RR, Mnemonic::POP_R}},
       Prod::PushXorPop},
      {{"cmp", NopCategory::Comparison, 2, {Mnemonic::CMP_RR}}, Prod::CmpRR},
      {{"test", NopCategory::Comparison, 2, {Mnemonic::TEST_RR}}, Prod::TestRR},
      {{"push-pop", NopCategory::DataTransfer, 2, {Mnemonic::PUSH_R, Mnemonic::POP_R}},
       Prod::PushPop},
      {{"mov-self", NopCategory::DataTransfer, 2, {Mnemonic::MOV_RR}}, Prod::MovSelf},
  };
  return table;
}

bool prod_allowed(const ProdInfo& p, const std::optional<MnemonicSet>& whitelist) {
  if (!whitelist) return true;
  return std::all_of(p.decl.mnemonics_used.begin(), p.decl.mnemonics_used.end(),
                     [&](Mnemonic m) { return whitelist->count(m) != 0; });
}

}  // namespace

const char* nop_category_name(NopCategory c) {
  switch (c) {
    case NopCategory::Arithmetic: return "arithmetic";
    case NopCategory::Logical: return "logical";
    case NopCategory::Comparison: return "comparison";
    case NopCategory::DataTransfer: return "data_transfer";
  }
  return "?";
}

std::vector<uint8_t> NopSequence::bytes() const {
  std::vector<uint8_t> out;
  out.reserve(byte_len);
  for (const auto& ins : instructions) out.insert(out.end(), ins.raw.begin(), ins.raw.end());
  return out;
}

const std::vector<NopProduction>& nop_grammar_productions() {
  static const std::vector<NopProduction> decls = [] {
    std::vector<NopProduction> out;
    for (const auto& p : production_table()) out.push_back(p.decl);
    return out;
  }();
  return decls;
}

NopSequence generate_nops(std::mt19937_64& rng, uint32_t max_bytes,
                          const std::optional<MnemonicSet>& whitelist) {
  if (whitelist && whitelist->empty()) fail(errc::empty_whitelist, "whitelist has no mnemonics");

  const auto& table = production_table();
  std::vector<const ProdInfo*> allowed;
  for (const auto& p : table)
    if (prod_allowed(p, whitelist)) allowed.push_back(&p);
  if (allowed.empty()) fail(errc::empty_whitelist, "whitelist excludes every production");

  const uint32_t smallest =
      (*std::min_element(allowed.begin(), allowed.end(),
                         [](auto* a, auto* b) { return a->decl.byte_len < b->decl.byte_len; }))
          ->decl.byte_len;
  if (max_bytes < smallest)
    fail(errc::budget_too_small,
         "budget " + std::to_string(max_bytes) + " below smallest production");

  NopSequence seq;
  // S -> P S | eps, uniform over the productions that still fit; geometric
  // stop after the first expansion.
  for (;;) {
    std::vector<const ProdInfo*> fitting;
    for (auto* p : allowed)
      if (seq.byte_len + p->decl.byte_len <= max_bytes) fitting.push_back(p);
    if (fitting.empty()) break;
    if (!seq.instructions.empty() && rng() % 4 == 0) break;

    const ProdInfo* chosen = fitting[rng() % fitting.size()];
    auto expansion = expand(chosen->id, rng);
    for (auto& ins : expansion) {
      seq.byte_len += ins.length;
      seq.instructions.push_back(std::move(ins));
    }
    seq.category_tags.push_back(chosen->decl.category);
  }
  return seq;
}

bool matches_nop_grammar(const Instruction& ins) {
  switch (ins.mnemonic) {
    case Mnemonic::NOP:
    case Mnemonic::PUSH_R:
    case Mnemonic::POP_R:
    case Mnemonic::INC_R:
    case Mnemonic::DEC_R:
    case Mnemonic::ADD_RI:
    case Mnemonic::SUB_RI:
    case Mnemonic::CMP_RR:
    case Mnemonic::TEST_RR: return true;
    case Mnemonic::MOV_RR:
    case Mnemonic::OR_RR:
    case Mnemonic::AND_RR:
    case Mnemonic::XOR_RR: return ins.dst == ins.src;
    default: return false;
  }
}

MnemonicSet parse_nop_whitelist(const std::string& csv) {
  MnemonicSet out;
  std::string token;
  auto flush = [&] {
    if (token.empty()) return;
    if (token == "nop") out.insert(Mnemonic::NOP);
    else if (token == "push") out.insert(Mnemonic::PUSH_R);
    else if (token == "pop") out.insert(Mnemonic::POP_R);
    else if (token == "mov") out.insert(Mnemonic::MOV_RR);
    else if (token == "add") { out.insert(Mnemonic::ADD_RI); out.insert(Mnemonic::ADD_RR); }
    else if (token == "sub") { out.insert(Mnemonic::SUB_RI); out.insert(Mnemonic::SUB_RR); }
    else if (token == "inc") out.insert(Mnemonic::INC_R);
    else if (token == "dec") out.insert(Mnemonic::DEC_R);
    else if (token == "xor") out.insert(Mnemonic::XOR_RR);
    else if (token == "and") out.insert(Mnemonic::AND_RR);
    else if (token == "or") out.insert(Mnemonic::OR_RR);
    else if (token == "cmp") out.insert(Mnemonic::CMP_RR);
    else if (token == "test") out.insert(Mnemonic::TEST_RR);
    else fail(errc::empty_whitelist, "unknown opcode name: " + token);
    token.clear();
  };
  for (char c : csv) {
    if (c == ',') flush();
    else if (!std::isspace(static_cast<unsigned char>(c))) token.push_back(c);
  }
  flush();
  return out;
}

}  // namespace rediv
