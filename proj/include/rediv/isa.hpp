#ifndef REDIV_ISA_HPP
#define REDIV_ISA_HPP

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace rediv {

using rva_t = uint32_t;

// x86-32 general-purpose register ids (ModRM order).
enum class Reg : uint8_t {
  EAX = 0,
  ECX = 1,
  EDX = 2,
  EBX = 3,
  ESP = 4,
  EBP = 5,
  ESI = 6,
  EDI = 7,
};

const char* reg_name(Reg r);

enum class Cond : uint8_t {
  E = 0,   // 0F 84
  NE = 1,  // 0F 85
  L = 2,   // 0F 8C
  GE = 3,  // 0F 8D
  LE = 4,  // 0F 8E
  G = 5,   // 0F 8F
};

const char* cond_name(Cond c);

enum class Mnemonic : uint8_t {
  MOV_RI,          // B8+r imm32
  MOV_RR,          // 89 /r (mod=11)
  PUSH_R,          // 50+r
  POP_R,           // 58+r
  ADD_RI,          // 81 /0 imm32
  SUB_RI,          // 81 /5 imm32
  ADD_RR,          // 01 /r
  SUB_RR,          // 29 /r
  XOR_RR,          // 31 /r
  AND_RR,          // 21 /r
  OR_RR,           // 09 /r
  CMP_RR,          // 39 /r
  TEST_RR,         // 85 /r
  INC_R,           // 40+r
  DEC_R,           // 48+r
  CALL_REL32,      // E8 rel32
  JMP_REL32,       // E9 rel32
  JCC_REL32,       // 0F 8x rel32
  RET,             // C3
  NOP,             // 90
  SYSCALL_MARKER,  // CD 80, observable event carrying EAX
};

constexpr int kMnemonicCount = 21;

const char* mnemonic_name(Mnemonic m);

// One decoded instruction. Operand fields are meaningful per mnemonic:
// `dst`/`src` for register forms, `imm` for immediates, `disp` for the
// signed rel32 of CALL/JMP/JCC, `cc` for JCC only.
struct Instruction {
  rva_t address = 0;
  Mnemonic mnemonic = Mnemonic::NOP;
  Reg dst = Reg::EAX;
  Reg src = Reg::EAX;
  uint32_t imm = 0;
  int32_t disp = 0;
  Cond cc = Cond::E;
  uint8_t length = 0;
  std::vector<uint8_t> raw;

  // Target of a relative control transfer: address + length + disp.
  rva_t branch_target() const { return address + length + static_cast<int64_t>(disp); }

  bool is_control_transfer() const {
    return mnemonic == Mnemonic::JMP_REL32 || mnemonic == Mnemonic::JCC_REL32 ||
           mnemonic == Mnemonic::RET;
  }

  bool operator==(const Instruction& o) const;

  std::string to_string() const;
};

// Decodes the unique instruction starting at `at`. Throws UnknownOpcode or
// TruncatedInstruction.
Instruction decode(std::span<const uint8_t> bytes, size_t at, rva_t address);

// Encodes an instruction to its bit-exact byte form. Throws OperandOutOfRange.
std::vector<uint8_t> encode(const Instruction& instr);

// Fixed byte length of a mnemonic's encoding.
uint8_t encoded_length(Mnemonic m);

// True iff the instruction is a relocatable direct call (CALL_REL32; the
// 5-byte length matches JMP_REL32 so in-place replacement preserves layout).
bool is_transformable_call(const Instruction& instr);

// Convenience constructors.
Instruction make_mov_ri(rva_t addr, Reg dst, uint32_t imm);
Instruction make_mov_rr(rva_t addr, Reg dst, Reg src);
Instruction make_push(rva_t addr, Reg r);
Instruction make_pop(rva_t addr, Reg r);
Instruction make_alu_ri(rva_t addr, Mnemonic m, Reg dst, uint32_t imm);
Instruction make_alu_rr(rva_t addr, Mnemonic m, Reg dst, Reg src);
Instruction make_inc(rva_t addr, Reg r);
Instruction make_dec(rva_t addr, Reg r);
Instruction make_call(rva_t addr, int32_t disp);
Instruction make_jmp(rva_t addr, int32_t disp);
Instruction make_jcc(rva_t addr, Cond cc, int32_t disp);
Instruction make_ret(rva_t addr);
Instruction make_nop(rva_t addr);
Instruction make_syscall_marker(rva_t addr);

// Call/jmp with an absolute target; the displacement is computed from `addr`.
Instruction make_call_to(rva_t addr, rva_t target);
Instruction make_jmp_to(rva_t addr, rva_t target);
Instruction make_jcc_to(rva_t addr, Cond cc, rva_t target);

}  // namespace rediv

#endif  // REDIV_ISA_HPP
