#include "rediv/isa.hpp"

#include <array>
#include <cstdio>

#include "rediv/error.hpp"

namespace rediv {

namespace {

constexpr uint8_t kModRegReg = 0xC0;

uint8_t modrm(Reg reg_field, Reg rm_field) {
  return kModRegReg | (static_cast<uint8_t>(reg_field) << 3) | static_cast<uint8_t>(rm_field);
}

uint32_t read_le32(std::span<const uint8_t> b, size_t at) {
  return static_cast<uint32_t>(b[at]) | (static_cast<uint32_t>(b[at + 1]) << 8) |
         (static_cast<uint32_t>(b[at + 2]) << 16) | (static_cast<uint32_t>(b[at + 3]) << 24);
}

void push_le32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(v & 0xFF);
  out.push_back((v >> 8) & 0xFF);
  out.push_back((v >> 16) & 0xFF);
  out.push_back((v >> 24) & 0xFF);
}

// Second opcode byte of 0F 8x for each Cond, in Cond order.
constexpr std::array<uint8_t, 6> kJccByte = {0x84, 0x85, 0x8C, 0x8D, 0x8E, 0x8F};

// Two-byte ALU register-register forms: opcode -> mnemonic.
bool alu_rr_opcode(uint8_t op, Mnemonic& m) {
  switch (op) {
    case 0x01: m = Mnemonic::ADD_RR; return true;
    case 0x29: m = Mnemonic::SUB_RR; return true;
    case 0x31: m = Mnemonic::XOR_RR; return true;
    case 0x21: m = Mnemonic::AND_RR; return true;
    case 0x09: m = Mnemonic::OR_RR; return true;
    case 0x39: m = Mnemonic::CMP_RR; return true;
    case 0x85: m = Mnemonic::TEST_RR; return true;
    case 0x89: m = Mnemonic::MOV_RR; return true;
    default: return false;
  }
}

uint8_t alu_rr_byte(Mnemonic m) {
  switch (m) {
    case Mnemonic::ADD_RR: return 0x01;
    case Mnemonic::SUB_RR: return 0x29;
    case Mnemonic::XOR_RR: return 0x31;
    case Mnemonic::AND_RR: return 0x21;
    case Mnemonic::OR_RR: return 0x09;
    case Mnemonic::CMP_RR: return 0x39;
    case Mnemonic::TEST_RR: return 0x85;
    case Mnemonic::MOV_RR: return 0x89;
    default: fail(errc::operand_out_of_range, "not an rr mnemonic");
  }
}

}  // namespace

const char* reg_name(Reg r) {
  static constexpr std::array<const char*, 8> names = {"eax", "ecx", "edx", "ebx",
                                                       "esp", "ebp", "esi", "edi"};
  return names[static_cast<uint8_t>(r)];
}

const char* cond_name(Cond c) {
  static constexpr std::array<const char*, 6> names = {"e", "ne", "l", "ge", "le", "g"};
  return names[static_cast<uint8_t>(c)];
}

const char* mnemonic_name(Mnemonic m) {
  switch (m) {
    case Mnemonic::MOV_RI: return "mov_ri";
    case Mnemonic::MOV_RR: return "mov_rr";
    case Mnemonic::PUSH_R: return "push";
    case Mnemonic::POP_R: return "pop";
    case Mnemonic::ADD_RI: return "add_ri";
    case Mnemonic::SUB_RI: return "sub_ri";
    case Mnemonic::ADD_RR: return "add_rr";
    case Mnemonic::SUB_RR: return "sub_rr";
    case Mnemonic::XOR_RR: return "xor_rr";
    case Mnemonic::AND_RR: return "and_rr";
    case Mnemonic::OR_RR: return "or_rr";
    case Mnemonic::CMP_RR: return "cmp_rr";
    case Mnemonic::TEST_RR: return "test_rr";
    case Mnemonic::INC_R: return "inc";
    case Mnemonic::DEC_R: return "dec";
    case Mnemonic::CALL_REL32: return "call";
    case Mnemonic::JMP_REL32: return "jmp";
    case Mnemonic::JCC_REL32: return "jcc";
    case Mnemonic::RET: return "ret";
    case Mnemonic::NOP: return "nop";
    case Mnemonic::SYSCALL_MARKER: return "int80";
  }
  return "?";
}

bool Instruction::operator==(const Instruction& o) const {
  return address == o.address && mnemonic == o.mnemonic && dst == o.dst && src == o.src &&
         imm == o.imm && disp == o.disp && cc == o.cc && length == o.length && raw == o.raw;
}

std::string Instruction::to_string() const {
  char buf[96];
  switch (mnemonic) {
    case Mnemonic::MOV_RI:
      std::snprintf(buf, sizeof buf, "mov %s, 0x%x", reg_name(dst), imm);
      break;
    case Mnemonic::MOV_RR:
      std::snprintf(buf, sizeof buf, "mov %s, %s", reg_name(dst), reg_name(src));
      break;
    case Mnemonic::PUSH_R:
      std::snprintf(buf, sizeof buf, "push %s", reg_name(dst));
      break;
    case Mnemonic::POP_R:
      std::snprintf(buf, sizeof buf, "pop %s", reg_name(dst));
      break;
    case Mnemonic::ADD_RI:
      std::snprintf(buf, sizeof buf, "add %s, 0x%x", reg_name(dst), imm);
      break;
    case Mnemonic::SUB_RI:
      std::snprintf(buf, sizeof buf, "sub %s, 0x%x", reg_name(dst), imm);
      break;
    case Mnemonic::ADD_RR:
    case Mnemonic::SUB_RR:
    case Mnemonic::XOR_RR:
    case Mnemonic::AND_RR:
    case Mnemonic::OR_RR:
    case Mnemonic::CMP_RR:
    case Mnemonic::TEST_RR: {
      const char* op = mnemonic == Mnemonic::ADD_RR   ? "add"
                       : mnemonic == Mnemonic::SUB_RR ? "sub"
                       : mnemonic == Mnemonic::XOR_RR ? "xor"
                       : mnemonic == Mnemonic::AND_RR ? "and"
                       : mnemonic == Mnemonic::OR_RR  ? "or"
                       : mnemonic == Mnemonic::CMP_RR ? "cmp"
                                                      : "test";
      std::snprintf(buf, sizeof buf, "%s %s, %s", op, reg_name(dst), reg_name(src));
      break;
    }
    case Mnemonic::INC_R:
      std::snprintf(buf, sizeof buf, "inc %s", reg_name(dst));
      break;
    case Mnemonic::DEC_R:
      std::snprintf(buf, sizeof buf, "dec %s", reg_name(dst));
      break;
    case Mnemonic::CALL_REL32:
      std::snprintf(buf, sizeof buf, "call 0x%x", branch_target());
      break;
    case Mnemonic::JMP_REL32:
      std::snprintf(buf, sizeof buf, "jmp 0x%x", branch_target());
      break;
    case Mnemonic::JCC_REL32:
      std::snprintf(buf, sizeof buf, "j%s 0x%x", cond_name(cc), branch_target());
      break;
    case Mnemonic::RET:
      std::snprintf(buf, sizeof buf, "ret");
      break;
    case Mnemonic::NOP:
      std::snprintf(buf, sizeof buf, "nop");
      break;
    case Mnemonic::SYSCALL_MARKER:
      std::snprintf(buf, sizeof buf, "int 0x80");
      break;
  }
  return buf;
}

uint8_t encoded_length(Mnemonic m) {
  switch (m) {
    case Mnemonic::PUSH_R:
    case Mnemonic::POP_R:
    case Mnemonic::INC_R:
    case Mnemonic::DEC_R:
    case Mnemonic::RET:
    case Mnemonic::NOP: return 1;
    case Mnemonic::MOV_RR:
    case Mnemonic::ADD_RR:
    case Mnemonic::SUB_RR:
    case Mnemonic::XOR_RR:
    case Mnemonic::AND_RR:
    case Mnemonic::OR_RR:
    case Mnemonic::CMP_RR:
    case Mnemonic::TEST_RR:
    case Mnemonic::SYSCALL_MARKER: return 2;
    case Mnemonic::MOV_RI:
    case Mnemonic::CALL_REL32:
    case Mnemonic::JMP_REL32: return 5;
    case Mnemonic::ADD_RI:
    case Mnemonic::SUB_RI:
    case Mnemonic::JCC_REL32: return 6;
  }
  return 0;
}

Instruction decode(std::span<const uint8_t> bytes, size_t at, rva_t address) {
  if (at >= bytes.size()) fail(errc::truncated_instruction, "offset past end of buffer");

  auto need = [&](size_t n) {
    if (at + n > bytes.size())
      fail(errc::truncated_instruction, "need " + std::to_string(n) + " bytes at offset " +
                                            std::to_string(at));
  };

  Instruction ins;
  ins.address = address;
  const uint8_t op = bytes[at];

  if (op == 0x90) {
    ins.mnemonic = Mnemonic::NOP;
    ins.length = 1;
  } else if (op == 0xC3) {
    ins.mnemonic = Mnemonic::RET;
    ins.length = 1;
  } else if (op >= 0x50 && op <= 0x57) {
    ins.mnemonic = Mnemonic::PUSH_R;
    ins.dst = static_cast<Reg>(op - 0x50);
    ins.length = 1;
  } else if (op >= 0x58 && op <= 0x5F) {
    ins.mnemonic = Mnemonic::POP_R;
    ins.dst = static_cast<Reg>(op - 0x58);
    ins.length = 1;
  } else if (op >= 0x40 && op <= 0x47) {
    ins.mnemonic = Mnemonic::INC_R;
    ins.dst = static_cast<Reg>(op - 0x40);
    ins.length = 1;
  } else if (op >= 0x48 && op <= 0x4F) {
    ins.mnemonic = Mnemonic::DEC_R;
    ins.dst = static_cast<Reg>(op - 0x48);
    ins.length = 1;
  } else if (op >= 0xB8 && op <= 0xBF) {
    need(5);
    ins.mnemonic = Mnemonic::MOV_RI;
    ins.dst = static_cast<Reg>(op - 0xB8);
    ins.imm = read_le32(bytes, at + 1);
    ins.length = 5;
  } else if (Mnemonic rr; alu_rr_opcode(op, rr)) {
    need(2);
    const uint8_t mrm = bytes[at + 1];
    if ((mrm & 0xC0) != kModRegReg)
      fail(errc::unknown_opcode, "non register-register ModRM " + std::to_string(mrm));
    ins.mnemonic = rr;
    ins.src = static_cast<Reg>((mrm >> 3) & 7);
    ins.dst = static_cast<Reg>(mrm & 7);
    ins.length = 2;
  } else if (op == 0x81) {
    need(6);
    const uint8_t mrm = bytes[at + 1];
    if ((mrm & 0xC0) != kModRegReg)
      fail(errc::unknown_opcode, "non register-register ModRM for 81");
    const uint8_t ext = (mrm >> 3) & 7;
    if (ext == 0)
      ins.mnemonic = Mnemonic::ADD_RI;
    else if (ext == 5)
      ins.mnemonic = Mnemonic::SUB_RI;
    else
      fail(errc::unknown_opcode, "81 /" + std::to_string(ext));
    ins.dst = static_cast<Reg>(mrm & 7);
    ins.imm = read_le32(bytes, at + 2);
    ins.length = 6;
  } else if (op == 0xE8 || op == 0xE9) {
    need(5);
    ins.mnemonic = op == 0xE8 ? Mnemonic::CALL_REL32 : Mnemonic::JMP_REL32;
    ins.disp = static_cast<int32_t>(read_le32(bytes, at + 1));
    ins.length = 5;
  } else if (op == 0x0F) {
    need(6);
    const uint8_t sub = bytes[at + 1];
    bool found = false;
    for (size_t i = 0; i < kJccByte.size(); ++i) {
      if (kJccByte[i] == sub) {
        ins.cc = static_cast<Cond>(i);
        found = true;
        break;
      }
    }
    if (!found) fail(errc::unknown_opcode, "0F " + std::to_string(sub));
    ins.mnemonic = Mnemonic::JCC_REL32;
    ins.disp = static_cast<int32_t>(read_le32(bytes, at + 2));
    ins.length = 6;
  } else if (op == 0xCD) {
    need(2);
    if (bytes[at + 1] != 0x80) fail(errc::unknown_opcode, "CD without 80");
    ins.mnemonic = Mnemonic::SYSCALL_MARKER;
    ins.length = 2;
  } else {
    fail(errc::unknown_opcode, "byte " + std::to_string(op) + " at offset " + std::to_string(at));
  }

  ins.raw.assign(bytes.begin() + at, bytes.begin() + at + ins.length);
  return ins;
}

std::vector<uint8_t> encode(const Instruction& instr) {
  std::vector<uint8_t> out;
  const uint8_t dst = static_cast<uint8_t>(instr.dst);
  const uint8_t src = static_cast<uint8_t>(instr.src);
  if (dst > 7 || src > 7) fail(errc::operand_out_of_range, "register id out of range");

  switch (instr.mnemonic) {
    case Mnemonic::NOP: out.push_back(0x90); break;
    case Mnemonic::RET: out.push_back(0xC3); break;
    case Mnemonic::PUSH_R: out.push_back(0x50 + dst); break;
    case Mnemonic::POP_R: out.push_back(0x58 + dst); break;
    case Mnemonic::INC_R: out.push_back(0x40 + dst); break;
    case Mnemonic::DEC_R: out.push_back(0x48 + dst); break;
    case Mnemonic::MOV_RI:
      out.push_back(0xB8 + dst);
      push_le32(out, instr.imm);
      break;
    case Mnemonic::MOV_RR:
    case Mnemonic::ADD_RR:
    case Mnemonic::SUB_RR:
    case Mnemonic::XOR_RR:
    case Mnemonic::AND_RR:
    case Mnemonic::OR_RR:
    case Mnemonic::CMP_RR:
    case Mnemonic::TEST_RR:
      out.push_back(alu_rr_byte(instr.mnemonic));
      out.push_back(modrm(instr.src, instr.dst));
      break;
    case Mnemonic::ADD_RI:
      out.push_back(0x81);
      out.push_back(modrm(static_cast<Reg>(0), instr.dst));
      push_le32(out, instr.imm);
      break;
    case Mnemonic::SUB_RI:
      out.push_back(0x81);
      out.push_back(modrm(static_cast<Reg>(5), instr.dst));
      push_le32(out, instr.imm);
      break;
    case Mnemonic::CALL_REL32:
      out.push_back(0xE8);
      push_le32(out, static_cast<uint32_t>(instr.disp));
      break;
    case Mnemonic::JMP_REL32:
      out.push_back(0xE9);
      push_le32(out, static_cast<uint32_t>(instr.disp));
      break;
    case Mnemonic::JCC_REL32:
      out.push_back(0x0F);
      out.push_back(kJccByte[static_cast<uint8_t>(instr.cc)]);
      push_le32(out, static_cast<uint32_t>(instr.disp));
      break;
    case Mnemonic::SYSCALL_MARKER:
      out.push_back(0xCD);
      out.push_back(0x80);
      break;
  }
  return out;
}

bool is_transformable_call(const Instruction& instr) {
  return instr.mnemonic == Mnemonic::CALL_REL32;
}

namespace {

Instruction finish(Instruction ins) {
  ins.raw = encode(ins);
  ins.length = static_cast<uint8_t>(ins.raw.size());
  return ins;
}

}  // namespace

Instruction make_mov_ri(rva_t addr, Reg dst, uint32_t imm) {
  Instruction i;
  i.address = addr;
  i.mnemonic = Mnemonic::MOV_RI;
  i.dst = dst;
  i.imm = imm;
  return finish(i);
}

Instruction make_mov_rr(rva_t addr, Reg dst, Reg src) {
  return make_alu_rr(addr, Mnemonic::MOV_RR, dst, src);
}

Instruction make_push(rva_t addr, Reg r) {
  Instruction i;
  i.address = addr;
  i.mnemonic = Mnemonic::PUSH_R;
  i.dst = r;
  return finish(i);
}

Instruction make_pop(rva_t addr, Reg r) {
  Instruction i;
  i.address = addr;
  i.mnemonic = Mnemonic::POP_R;
  i.dst = r;
  return finish(i);
}

Instruction make_alu_ri(rva_t addr, Mnemonic m, Reg dst, uint32_t imm) {
  Instruction i;
  i.address = addr;
  i.mnemonic = m;
  i.dst = dst;
  i.imm = imm;
  return finish(i);
}

Instruction make_alu_rr(rva_t addr, Mnemonic m, Reg dst, Reg src) {
  Instruction i;
  i.address = addr;
  i.mnemonic = m;
  i.dst = dst;
  i.src = src;
  return finish(i);
}

Instruction make_inc(rva_t addr, Reg r) {
  Instruction i;
  i.address = addr;
  i.mnemonic = Mnemonic::INC_R;
  i.dst = r;
  return finish(i);
}

Instruction make_dec(rva_t addr, Reg r) {
  Instruction i;
  i.address = addr;
  i.mnemonic = Mnemonic::DEC_R;
  i.dst = r;
  return finish(i);
}

Instruction make_call(rva_t addr, int32_t disp) {
  Instruction i;
  i.address = addr;
  i.mnemonic = Mnemonic::CALL_REL32;
  i.disp = disp;
  return finish(i);
}

Instruction make_jmp(rva_t addr, int32_t disp) {
  Instruction i;
  i.address = addr;
  i.mnemonic = Mnemonic::JMP_REL32;
  i.disp = disp;
  return finish(i);
}

Instruction make_jcc(rva_t addr, Cond cc, int32_t disp) {
  Instruction i;
  i.address = addr;
  i.mnemonic = Mnemonic::JCC_REL32;
  i.cc = cc;
  i.disp = disp;
  return finish(i);
}

Instruction make_ret(rva_t addr) {
  Instruction i;
  i.address = addr;
  i.mnemonic = Mnemonic::RET;
  return finish(i);
}

Instruction make_nop(rva_t addr) {
  Instruction i;
  i.address = addr;
  i.mnemonic = Mnemonic::NOP;
  return finish(i);
}

Instruction make_syscall_marker(rva_t addr) {
  Instruction i;
  i.address = addr;
  i.mnemonic = Mnemonic::SYSCALL_MARKER;
  return finish(i);
}

Instruction make_call_to(rva_t addr, rva_t target) {
  return make_call(addr, static_cast<int32_t>(target - (addr + 5)));
}

Instruction make_jmp_to(rva_t addr, rva_t target) {
  return make_jmp(addr, static_cast<int32_t>(target - (addr + 5)));
}

Instruction make_jcc_to(rva_t addr, Cond cc, rva_t target) {
  return make_jcc(addr, cc, static_cast<int32_t>(target - (addr + 6)));
}

}  // namespace rediv
