#ifndef REDIV_NOPGEN_HPP
#define REDIV_NOPGEN_HPP

#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "rediv/isa.hpp"

namespace rediv {

enum class NopCategory : uint8_t { Arithmetic, Logical, Comparison, DataTransfer };

const char* nop_category_name(NopCategory c);

// An instruction run whose net effect on the general registers and the stack
// pointer is identity; flags may be clobbered. Never contains a control
// transfer.
struct NopSequence {
  std::vector<Instruction> instructions;
  uint32_t byte_len = 0;
  std::vector<NopCategory> category_tags;  // one tag per chosen production

  std::vector<uint8_t> bytes() const;
};

// One expandable grammar production: a register-parametric template together
// with its category and minimum encoded size.
struct NopProduction {
  std::string name;
  NopCategory category;
  uint32_t byte_len = 0;                // fixed encoded size of the expansion
  std::vector<Mnemonic> mnemonics_used;
};

// The fixed production set of the generator grammar.
const std::vector<NopProduction>& nop_grammar_productions();

using MnemonicSet = std::set<Mnemonic>;

// Draws a random nop sequence no longer than max_bytes, restricted to the
// whitelisted mnemonics when given. Deterministic for a fixed generator
// state. Throws EmptyWhitelist or BudgetTooSmall.
NopSequence generate_nops(std::mt19937_64& rng, uint32_t max_bytes,
                          const std::optional<MnemonicSet>& whitelist = std::nullopt);

// Syntactic membership test against the grammar's terminal forms (used by the
// call-then-jmp heuristic scan): nop, push/pop, inc/dec, add/sub immediate,
// cmp/test, and the self-operand register forms.
bool matches_nop_grammar(const Instruction& ins);

// Parses a comma-separated opcode list ("add,sub,xor,...") into a whitelist.
MnemonicSet parse_nop_whitelist(const std::string& csv);

}  // namespace rediv

#endif  // REDIV_NOPGEN_HPP
