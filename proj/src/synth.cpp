#include <algorithm>
#include <random>

#include "rediv/cfg.hpp"
#include "rediv/emu.hpp"
#include "rediv/error.hpp"
#include "rediv/harness.hpp"

namespace rediv {

namespace {

constexpr rva_t kTextVa = 0x1000;
constexpr uint32_t kTextRawOffset = 0x200;
constexpr uint32_t kImageBase = 0x400000;
constexpr uint32_t kSectionAlign = 0x1000;
constexpr uint32_t kFileAlign = 0x200;

// Registers statements may scribble on. ECX is reserved for loop counters,
// EBP for the frame, ESP for the stack.
constexpr std::array<Reg, 5> kWorkRegs = {Reg::EAX, Reg::EDX, Reg::EBX, Reg::ESI, Reg::EDI};

struct CallFixup {
  size_t offset;         // E8 byte position within the function
  uint32_t target_func;  // callee index
};

struct FuncCode {
  std::vector<uint8_t> bytes;
  std::vector<CallFixup> calls;
  size_t body_end = 0;  // offset of the epilogue; reachability stitching inserts here
};

class FuncGen {
 public:
  FuncGen(std::mt19937_64& rng, const ClassProfile& profile, uint32_t func_index,
          uint32_t func_count)
      : rng_(rng), profile_(profile), func_index_(func_index), func_count_(func_count) {}

  FuncCode generate() {
    emit(make_push(0, Reg::EBP));
    emit(make_mov_rr(0, Reg::EBP, Reg::ESP));

    const uint32_t n =
        profile_.body_min + rng_() % (profile_.body_max - profile_.body_min + 1);
    uint32_t calls_emitted = 0;
    for (uint32_t i = 0; i < n; ++i) {
      if (emit_stmt(/*depth=*/0, /*allow_calls=*/true)) ++calls_emitted;
    }
    uint32_t want_calls =
        profile_.calls_min + rng_() % (profile_.calls_max - profile_.calls_min + 1);
    if (!can_call()) want_calls = 0;
    while (calls_emitted < want_calls) {
      emit_call();
      ++calls_emitted;
    }

    code_.body_end = code_.bytes.size();
    emit(make_pop(0, Reg::EBP));
    emit(make_ret(0));
    return std::move(code_);
  }

 private:
  bool can_call() const { return func_index_ + 1 < func_count_; }

  Reg work_reg() { return kWorkRegs[rng_() % kWorkRegs.size()]; }

  uint32_t flavored_imm() {
    return (static_cast<uint32_t>(rng_() % 0x10000)) |
           (static_cast<uint32_t>(profile_.data_byte_bias) << 24);
  }

  void emit(const Instruction& ins) {
    code_.bytes.insert(code_.bytes.end(), ins.raw.begin(), ins.raw.end());
  }

  void patch_rel32(size_t disp_at, size_t target_offset) {
    const int32_t disp =
        static_cast<int32_t>(target_offset) - static_cast<int32_t>(disp_at + 4);
    code_.bytes[disp_at] = disp & 0xFF;
    code_.bytes[disp_at + 1] = (disp >> 8) & 0xFF;
    code_.bytes[disp_at + 2] = (disp >> 16) & 0xFF;
    code_.bytes[disp_at + 3] = (disp >> 24) & 0xFF;
  }

  void emit_assign() { emit(make_mov_ri(0, work_reg(), flavored_imm())); }

  void emit_alu() {
    switch (rng_() % 7) {
      case 0: emit(make_alu_rr(0, Mnemonic::ADD_RR, work_reg(), work_reg())); break;
      case 1: emit(make_alu_rr(0, Mnemonic::SUB_RR, work_reg(), work_reg())); break;
      case 2: emit(make_alu_rr(0, Mnemonic::XOR_RR, work_reg(), work_reg())); break;
      case 3: emit(make_alu_rr(0, Mnemonic::AND_RR, work_reg(), work_reg())); break;
      case 4: emit(make_alu_rr(0, Mnemonic::OR_RR, work_reg(), work_reg())); break;
      case 5: emit(make_alu_ri(0, Mnemonic::ADD_RI, work_reg(), flavored_imm() & 0xFFFF)); break;
      default: emit(make_alu_ri(0, Mnemonic::SUB_RI, work_reg(), flavored_imm() & 0xFFFF)); break;
    }
  }

  void emit_syscall() {
    emit(make_mov_ri(0, Reg::EAX, static_cast<uint32_t>(rng_() % 64)));
    emit(make_syscall_marker(0));
  }

  // call f_j; a mov follows every call so no call ever directly precedes an
  // unconditional jump through grammar-shaped filler.
  void emit_call() {
    const uint32_t lo = func_index_ + 1;
    const uint32_t target = lo + static_cast<uint32_t>(rng_() % (func_count_ - lo));
    code_.bytes.push_back(0xE8);
    code_.calls.push_back({code_.bytes.size(), target});
    for (int i = 0; i < 4; ++i) code_.bytes.push_back(0);
    emit(make_mov_ri(0, work_reg(), flavored_imm()));
  }

  void emit_simple(bool allow_calls) {
    switch (rng_() % (allow_calls && can_call() ? 4 : 3)) {
      case 0: emit_assign(); break;
      case 1: emit_alu(); break;
      case 2: emit_syscall(); break;
      default: emit_call(); break;
    }
  }

  void emit_branch(int depth) {
    const Cond cc = static_cast<Cond>(rng_() % 6);
    emit(make_alu_rr(0, Mnemonic::CMP_RR, work_reg(), work_reg()));
    code_.bytes.push_back(0x0F);
    code_.bytes.push_back(static_cast<uint8_t>(
        encode(make_jcc(0, cc, 0))[1]));
    const size_t jcc_disp = code_.bytes.size();
    for (int i = 0; i < 4; ++i) code_.bytes.push_back(0);

    const uint32_t body = 1 + rng_() % 2;
    for (uint32_t i = 0; i < body; ++i) emit_stmt(depth + 1, true);

    if (rng_() % 2 == 0) {
      patch_rel32(jcc_disp, code_.bytes.size());
      return;
    }
    // else-form: the taken arm jumps over an alternative body
    code_.bytes.push_back(0xE9);
    const size_t jmp_disp = code_.bytes.size();
    for (int i = 0; i < 4; ++i) code_.bytes.push_back(0);
    patch_rel32(jcc_disp, code_.bytes.size());
    const uint32_t body2 = 1 + rng_() % 2;
    for (uint32_t i = 0; i < body2; ++i) emit_stmt(depth + 1, true);
    patch_rel32(jmp_disp, code_.bytes.size());
  }

  // an unconditional hop to the next statement; splits the block in two
  void emit_jmp_chain() {
    code_.bytes.push_back(0xE9);
    const size_t disp_at = code_.bytes.size();
    for (int i = 0; i < 4; ++i) code_.bytes.push_back(0);
    patch_rel32(disp_at, code_.bytes.size());
  }

  void emit_loop() {
    const uint32_t iters = 1 + rng_() % 3;
    emit(make_mov_ri(0, Reg::ECX, iters));
    const size_t top = code_.bytes.size();
    const uint32_t body = 1 + rng_() % 2;
    for (uint32_t i = 0; i < body; ++i) emit_simple(/*allow_calls=*/false);
    emit(make_dec(0, Reg::ECX));
    code_.bytes.push_back(0x0F);
    code_.bytes.push_back(0x85);  // jne
    const size_t disp_at = code_.bytes.size();
    for (int i = 0; i < 4; ++i) code_.bytes.push_back(0);
    patch_rel32(disp_at, top);
  }

  // Returns true when the statement emitted a call.
  bool emit_stmt(int depth, bool allow_calls) {
    double w_total = 0.0;
    for (double w : profile_.stmt_weights) w_total += w;
    double draw = (static_cast<double>(rng_() >> 11) / 9007199254740992.0) * w_total;
    int kind = 0;
    for (; kind < 6; ++kind) {
      if (draw < profile_.stmt_weights[kind]) break;
      draw -= profile_.stmt_weights[kind];
    }
    if (depth >= 2 && (kind == 2 || kind == 3)) kind = 1;  // no deep nesting
    switch (kind) {
      case 0: emit_assign(); return false;
      case 1: emit_alu(); return false;
      case 2: emit_branch(depth); return false;
      case 3: emit_loop(); return false;
      case 4:
        if (allow_calls && can_call()) {
          emit_call();
          return true;
        }
        emit_alu();
        return false;
      case 5: emit_syscall(); return false;
      default: emit_jmp_chain(); return false;
    }
  }

  std::mt19937_64& rng_;
  const ClassProfile& profile_;
  uint32_t func_index_;
  uint32_t func_count_;
  FuncCode code_;
};

std::vector<uint8_t> default_optional_header() {
  std::vector<uint8_t> opt(224, 0);
  opt[60] = 0x00;  // size_of_headers
  opt[61] = 0x02;
  opt[68] = 0x03;  // console subsystem
  opt[92] = 0x10;  // 16 data directory entries, all empty
  return opt;
}

BinaryImage assemble_image(const std::vector<uint8_t>& text, uint32_t text_vsize,
                           const std::vector<uint8_t>& data_payload, uint64_t seed) {
  BinaryImage img;
  img.dos_stub.assign(0x40, 0);
  img.dos_stub[0] = 'M';
  img.dos_stub[1] = 'Z';
  img.e_lfanew = 0x40;
  img.machine = 0x014C;
  img.image_base = kImageBase;
  img.section_alignment = kSectionAlign;
  img.file_alignment = kFileAlign;
  img.entry_point_rva = kTextVa;

  img.coff_rest.assign(14, 0);
  const uint32_t timestamp = 0x5E000000u + static_cast<uint32_t>(seed & 0xFFFFFF);
  img.coff_rest[0] = timestamp & 0xFF;
  img.coff_rest[1] = (timestamp >> 8) & 0xFF;
  img.coff_rest[2] = (timestamp >> 16) & 0xFF;
  img.coff_rest[3] = (timestamp >> 24) & 0xFF;
  img.coff_rest[12] = 0x02;  // executable image
  img.coff_rest[13] = 0x01;  // 32-bit machine

  img.optional_header = default_optional_header();

  Section text_sec;
  text_sec.name = ".text";
  text_sec.virtual_address = kTextVa;
  text_sec.virtual_size = text_vsize;
  text_sec.raw_offset = kTextRawOffset;
  text_sec.raw_size = static_cast<uint32_t>(round_up(text_vsize, kFileAlign));
  text_sec.perms = {.read = true, .write = false, .execute = true};
  text_sec.data = text;
  text_sec.data.resize(text_sec.raw_size, 0);
  img.sections.push_back(std::move(text_sec));

  Section data_sec;
  data_sec.name = ".data";
  data_sec.virtual_address =
      kTextVa + static_cast<rva_t>(round_up(text_vsize, kSectionAlign));
  data_sec.virtual_size = static_cast<uint32_t>(data_payload.size());
  data_sec.raw_offset = kTextRawOffset + img.sections[0].raw_size;
  data_sec.raw_size = static_cast<uint32_t>(round_up(data_payload.size(), kFileAlign));
  data_sec.perms = {.read = true, .write = true, .execute = false};
  data_sec.data = data_payload;
  data_sec.data.resize(data_sec.raw_size, 0);
  img.sections.push_back(std::move(data_sec));

  img.size_of_image = static_cast<uint32_t>(round_up(
      img.sections.back().virtual_address + img.sections.back().virtual_size, kSectionAlign));
  return img;
}

}  // namespace

CorpusSpec::CorpusSpec() {
  benign.stmt_weights = {0.20, 0.20, 0.08, 0.05, 0.14, 0.10, 0.20};
  benign.body_min = 4;
  benign.body_max = 7;
  benign.func_min = 4;
  benign.func_max = 7;
  benign.calls_min = 1;
  benign.calls_max = 2;
  benign.data_byte_bias = 0x20;

  malicious.stmt_weights = {0.26, 0.26, 0.08, 0.05, 0.14, 0.10, 0.10};
  malicious.body_min = 6;
  malicious.body_max = 10;
  malicious.func_min = 2;
  malicious.func_max = 3;
  malicious.calls_min = 1;
  malicious.calls_max = 2;
  malicious.data_byte_bias = 0xC8;
}

uint64_t mix_seed(uint64_t seed, uint64_t index) {
  uint64_t z = seed + 0x9E3779B97F4A7C15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

SynthBinary synth_binary(const ClassProfile& profile, int label, uint64_t seed, bool tight_slack,
                         const std::string& name) {
  std::mt19937_64 rng(seed);
  const uint32_t func_count =
      profile.func_min + rng() % (profile.func_max - profile.func_min + 1);

  std::vector<FuncCode> funcs;
  funcs.reserve(func_count);
  for (uint32_t f = 0; f < func_count; ++f)
    funcs.push_back(FuncGen(rng, profile, f, func_count).generate());

  // Every function must be reachable from the entry or its call sites would
  // be invisible to recursive-descent disassembly. Stitch direct calls to
  // uncovered functions into the entry body.
  std::vector<bool> reachable(func_count, false);
  auto mark = [&](auto&& self, uint32_t f) -> void {
    if (reachable[f]) return;
    reachable[f] = true;
    for (const auto& fix : funcs[f].calls) self(self, fix.target_func);
  };
  mark(mark, 0);
  for (uint32_t j = 1; j < func_count; ++j) {
    if (reachable[j]) continue;
    FuncCode& entry = funcs[0];
    std::vector<uint8_t> stitch;
    stitch.push_back(0xE8);
    entry.calls.push_back({entry.body_end + 1, j});
    for (int i = 0; i < 4; ++i) stitch.push_back(0);
    const Instruction follower =
        make_mov_ri(0, kWorkRegs[rng() % kWorkRegs.size()],
                    (static_cast<uint32_t>(rng() % 0x10000)) |
                        (static_cast<uint32_t>(profile.data_byte_bias) << 24));
    stitch.insert(stitch.end(), follower.raw.begin(), follower.raw.end());
    entry.bytes.insert(entry.bytes.begin() + entry.body_end, stitch.begin(), stitch.end());
    entry.body_end += stitch.size();
    mark(mark, j);
  }

  std::vector<rva_t> func_addrs(func_count);
  uint32_t offset = 0;
  for (uint32_t f = 0; f < func_count; ++f) {
    func_addrs[f] = kTextVa + offset;
    offset += static_cast<uint32_t>(funcs[f].bytes.size());
  }

  std::vector<uint8_t> text;
  text.reserve(offset);
  std::vector<rva_t> call_addrs;
  for (uint32_t f = 0; f < func_count; ++f) {
    const uint32_t base = static_cast<uint32_t>(text.size());
    text.insert(text.end(), funcs[f].bytes.begin(), funcs[f].bytes.end());
    for (const auto& fix : funcs[f].calls) {
      const rva_t call_rva = kTextVa + base + static_cast<rva_t>(fix.offset) - 1;
      call_addrs.push_back(call_rva);
      const int32_t disp =
          static_cast<int32_t>(func_addrs[fix.target_func]) - static_cast<int32_t>(call_rva + 5);
      const size_t at = base + fix.offset;
      text[at] = disp & 0xFF;
      text[at + 1] = (disp >> 8) & 0xFF;
      text[at + 2] = (disp >> 16) & 0xFF;
      text[at + 3] = (disp >> 24) & 0xFF;
    }
  }
  std::sort(call_addrs.begin(), call_addrs.end());

  // Shape the ".text" slack: tight images leave too little padding for any
  // stub, roomy ones fit the whole worst-case stub chain.
  const uint32_t rem = tight_slack ? kFileAlign - 8 : kFileAlign - 384;
  uint32_t vsize = static_cast<uint32_t>(text.size());
  while (vsize % kFileAlign != rem) ++vsize;
  while (text.size() < vsize)
    text.push_back(static_cast<uint8_t>((rng() & 0x7F) | profile.data_byte_bias));

  const uint32_t data_len = 64 + static_cast<uint32_t>(rng() % 128);
  std::vector<uint8_t> data_payload(data_len);
  for (auto& b : data_payload)
    b = static_cast<uint8_t>((rng() & 0x3F) + profile.data_byte_bias);

  SynthBinary out;
  out.name = name;
  out.label = label;
  out.image = assemble_image(text, vsize, data_payload, seed);
  out.layout.text_va = kTextVa;
  out.layout.text_meaningful = vsize;
  out.layout.slack_bytes = slack_space(out.image, ".text").size;
  out.layout.file_size = static_cast<uint32_t>(serialize_image(out.image).size());
  out.layout.function_addrs = std::move(func_addrs);
  out.layout.call_site_addrs = std::move(call_addrs);
  out.layout.section_count = 2;
  return out;
}

std::vector<SynthBinary> synth_corpus(const CorpusSpec& spec) {
  if (spec.count_per_class == 0) fail(errc::empty_corpus, "count_per_class must be >= 1");
  std::vector<SynthBinary> corpus;
  corpus.reserve(2 * spec.count_per_class);

  for (int label = 0; label <= 1; ++label) {
    const ClassProfile& profile = label ? spec.malicious : spec.benign;
    const char prefix = label ? 'm' : 'b';
    for (uint32_t i = 0; i < spec.count_per_class; ++i) {
      char name[16];
      std::snprintf(name, sizeof name, "%c%04u", prefix, i);
      bool ok = false;
      for (uint32_t attempt = 0; attempt < 20 && !ok; ++attempt) {
        const uint64_t seed =
            mix_seed(spec.seed, (static_cast<uint64_t>(label) << 40) | (i * 64ull + attempt));
        SynthBinary sb = synth_binary(profile, label, seed, i % 2 == 0, name);

        const auto bytes = serialize_image(sb.image);
        if (!(parse_image(bytes) == sb.image)) continue;
        if (!verify_layout(sb.image).empty()) continue;
        const Trace t = execute(sb.image);
        if (t.events.empty() || t.events.back().kind != Event::Kind::Halt ||
            t.events.back().halt != HaltReason::Clean)
          continue;
        if (label == 1 && build_cfg(sb.image).call_sites.empty()) continue;
        corpus.push_back(std::move(sb));
        ok = true;
      }
      if (!ok)
        fail(errc::generation_exhausted,
             std::string("could not synthesize a valid binary for ") + name);
    }
  }
  return corpus;
}

}  // namespace rediv
