#include "rediv/emu.hpp"

#include <algorithm>
#include <cmath>

#include "rediv/error.hpp"

namespace rediv {

namespace {

struct CodeRegion {
  rva_t base = 0;
  std::span<const uint8_t> bytes;
};

class Machine {
 public:
  Machine(std::vector<CodeRegion> code, MachineState state, uint64_t max_steps,
          std::optional<rva_t> fall_off_end)
      : code_(std::move(code)),
        st_(std::move(state)),
        max_steps_(max_steps),
        fall_off_end_(fall_off_end) {}

  BufferRun run() {
    for (;;) {
      if (fall_off_end_ && st_.ip == *fall_off_end_) {
        halt(HaltReason::Clean);
        break;
      }
      if (st_.steps >= max_steps_) {
        halt(HaltReason::StepLimit);
        break;
      }
      const CodeRegion* region = region_of(st_.ip);
      if (!region) {
        halt(HaltReason::Fault, st_.ip);
        break;
      }
      Instruction ins;
      try {
        ins = decode(region->bytes, st_.ip - region->base, st_.ip);
      } catch (const Error&) {
        halt(HaltReason::Fault, st_.ip);
        break;
      }
      ++st_.steps;
      if (!step(ins)) break;
    }
    return BufferRun{std::move(st_), std::move(trace_)};
  }

 private:
  const CodeRegion* region_of(rva_t rva) const {
    for (const auto& r : code_)
      if (rva >= r.base && rva - r.base < r.bytes.size()) return &r;
    return nullptr;
  }

  void halt(HaltReason r, uint32_t addr = 0) { trace_.events.push_back(make_halt_event(r, addr)); }

  bool stack_ok(uint32_t addr, uint32_t len) const {
    return addr >= kStackTop - kStackBytes && addr + len <= kStackTop && addr + len > addr;
  }

  bool push32(uint32_t v) {
    uint32_t& esp = st_.reg(Reg::ESP);
    const uint32_t target = esp - 4;
    if (!stack_ok(target, 4)) {
      halt(HaltReason::Fault, target);
      return false;
    }
    esp = target;
    const uint32_t off = target - (kStackTop - kStackBytes);
    st_.stack[off] = v & 0xFF;
    st_.stack[off + 1] = (v >> 8) & 0xFF;
    st_.stack[off + 2] = (v >> 16) & 0xFF;
    st_.stack[off + 3] = (v >> 24) & 0xFF;
    return true;
  }

  std::optional<uint32_t> pop32() {
    uint32_t& esp = st_.reg(Reg::ESP);
    if (!stack_ok(esp, 4)) {
      halt(HaltReason::Fault, esp);
      return std::nullopt;
    }
    const uint32_t off = esp - (kStackTop - kStackBytes);
    const uint32_t v = static_cast<uint32_t>(st_.stack[off]) |
                       (static_cast<uint32_t>(st_.stack[off + 1]) << 8) |
                       (static_cast<uint32_t>(st_.stack[off + 2]) << 16) |
                       (static_cast<uint32_t>(st_.stack[off + 3]) << 24);
    esp += 4;
    return v;
  }

  void set_zs(uint32_t r) {
    st_.zf = r == 0;
    st_.sf = (r >> 31) & 1;
  }

  uint32_t do_add(uint32_t a, uint32_t b, bool touch_cf) {
    const uint32_t r = a + b;
    if (touch_cf) st_.cf = r < a;
    st_.of = (~(a ^ b) & (a ^ r)) >> 31;
    set_zs(r);
    return r;
  }

  uint32_t do_sub(uint32_t a, uint32_t b, bool touch_cf) {
    const uint32_t r = a - b;
    if (touch_cf) st_.cf = a < b;
    st_.of = ((a ^ b) & (a ^ r)) >> 31;
    set_zs(r);
    return r;
  }

  void do_logic(uint32_t r) {
    st_.cf = false;
    st_.of = false;
    set_zs(r);
  }

  bool cond_holds(Cond c) const {
    switch (c) {
      case Cond::E: return st_.zf;
      case Cond::NE: return !st_.zf;
      case Cond::L: return st_.sf != st_.of;
      case Cond::GE: return st_.sf == st_.of;
      case Cond::LE: return st_.zf || st_.sf != st_.of;
      case Cond::G: return !st_.zf && st_.sf == st_.of;
    }
    return false;
  }

  // Executes one instruction; returns false when the run has halted.
  bool step(const Instruction& ins) {
    const rva_t next = ins.address + ins.length;
    switch (ins.mnemonic) {
      case Mnemonic::NOP: break;
      case Mnemonic::MOV_RI: st_.reg(ins.dst) = ins.imm; break;
      case Mnemonic::MOV_RR: st_.reg(ins.dst) = st_.reg(ins.src); break;
      case Mnemonic::PUSH_R:
        if (!push32(st_.reg(ins.dst))) return false;
        break;
      case Mnemonic::POP_R: {
        auto v = pop32();
        if (!v) return false;
        st_.reg(ins.dst) = *v;
        break;
      }
      case Mnemonic::ADD_RI:
        st_.reg(ins.dst) = do_add(st_.reg(ins.dst), ins.imm, true);
        break;
      case Mnemonic::SUB_RI:
        st_.reg(ins.dst) = do_sub(st_.reg(ins.dst), ins.imm, true);
        break;
      case Mnemonic::ADD_RR:
        st_.reg(ins.dst) = do_add(st_.reg(ins.dst), st_.reg(ins.src), true);
        break;
      case Mnemonic::SUB_RR:
        st_.reg(ins.dst) = do_sub(st_.reg(ins.dst), st_.reg(ins.src), true);
        break;
      case Mnemonic::XOR_RR:
        st_.reg(ins.dst) ^= st_.reg(ins.src);
        do_logic(st_.reg(ins.dst));
        break;
      case Mnemonic::AND_RR:
        st_.reg(ins.dst) &= st_.reg(ins.src);
        do_logic(st_.reg(ins.dst));
        break;
      case Mnemonic::OR_RR:
        st_.reg(ins.dst) |= st_.reg(ins.src);
        do_logic(st_.reg(ins.dst));
        break;
      case Mnemonic::CMP_RR: do_sub(st_.reg(ins.dst), st_.reg(ins.src), true); break;
      case Mnemonic::TEST_RR: do_logic(st_.reg(ins.dst) & st_.reg(ins.src)); break;
      case Mnemonic::INC_R: st_.reg(ins.dst) = do_add(st_.reg(ins.dst), 1, false); break;
      case Mnemonic::DEC_R: st_.reg(ins.dst) = do_sub(st_.reg(ins.dst), 1, false); break;
      case Mnemonic::CALL_REL32: {
        const rva_t callee = ins.branch_target();
        if (!push32(next)) return false;
        trace_.events.push_back(make_call_event(callee));
        st_.ip = callee;
        return true;
      }
      case Mnemonic::JMP_REL32: st_.ip = ins.branch_target(); return true;
      case Mnemonic::JCC_REL32:
        st_.ip = cond_holds(ins.cc) ? ins.branch_target() : next;
        return true;
      case Mnemonic::RET: {
        auto v = pop32();
        if (!v) return false;
        if (*v == kReturnSentinel) {
          halt(HaltReason::Clean);
          return false;
        }
        st_.ip = *v;
        return true;
      }
      case Mnemonic::SYSCALL_MARKER:
        trace_.events.push_back(make_syscall_event(st_.reg(Reg::EAX)));
        break;
    }
    st_.ip = next;
    return true;
  }

  std::vector<CodeRegion> code_;
  MachineState st_;
  uint64_t max_steps_;
  std::optional<rva_t> fall_off_end_;
  Trace trace_;
};

}  // namespace

Event make_call_event(rva_t callee) { return Event{Event::Kind::CallTo, callee, HaltReason::Clean}; }
Event make_syscall_event(uint32_t eax) { return Event{Event::Kind::Syscall, eax, HaltReason::Clean}; }
Event make_halt_event(HaltReason r, uint32_t addr) { return Event{Event::Kind::Halt, addr, r}; }

std::string format_event(const Event& e) {
  char buf[48];
  switch (e.kind) {
    case Event::Kind::CallTo: std::snprintf(buf, sizeof buf, "CALL 0x%x", e.value); break;
    case Event::Kind::Syscall: std::snprintf(buf, sizeof buf, "SYS %u", e.value); break;
    case Event::Kind::Halt:
      switch (e.halt) {
        case HaltReason::Clean: return "HALT clean";
        case HaltReason::StepLimit: return "HALT steplimit";
        case HaltReason::Fault: std::snprintf(buf, sizeof buf, "HALT fault 0x%x", e.value); break;
      }
      break;
  }
  return buf;
}

std::string format_trace(const Trace& t) {
  std::string out;
  for (const auto& e : t.events) {
    out += format_event(e);
    out += '\n';
  }
  return out;
}

MachineState::MachineState() : stack(kStackBytes, 0) {
  regs[static_cast<uint8_t>(Reg::ESP)] = kStackTop - 16;
}

Trace execute(const BinaryImage& image, uint64_t max_steps) {
  std::vector<CodeRegion> code;
  for (const auto& s : image.sections) {
    if (!s.perms.execute) continue;
    const uint64_t mapped =
        std::min<uint64_t>(s.raw_size, round_up(s.virtual_size, image.section_alignment));
    code.push_back({s.virtual_address, std::span<const uint8_t>(s.data.data(), mapped)});
  }
  MachineState st;
  st.ip = image.entry_point_rva;
  // Entry frame: returning to the sentinel ends the run cleanly.
  st.reg(Reg::ESP) -= 4;
  const uint32_t off = st.esp() - (kStackTop - kStackBytes);
  st.stack[off] = kReturnSentinel & 0xFF;
  st.stack[off + 1] = (kReturnSentinel >> 8) & 0xFF;
  st.stack[off + 2] = (kReturnSentinel >> 16) & 0xFF;
  st.stack[off + 3] = (kReturnSentinel >> 24) & 0xFF;
  return Machine(std::move(code), std::move(st), max_steps, std::nullopt).run().trace;
}

BufferRun execute_buffer(std::span<const uint8_t> code, rva_t base, const MachineState& initial,
                         uint64_t max_steps) {
  std::vector<CodeRegion> regions{{base, code}};
  MachineState st = initial;
  st.ip = base;
  return Machine(std::move(regions), std::move(st), max_steps,
                 base + static_cast<rva_t>(code.size()))
      .run();
}

size_t edit_distance(std::span<const Event> a, std::span<const Event> b) {
  const size_t n = a.size(), m = b.size();
  if (n == 0) return m;
  if (m == 0) return n;
  std::vector<size_t> prev(m + 1), cur(m + 1);
  for (size_t j = 0; j <= m; ++j) prev[j] = j;
  for (size_t i = 1; i <= n; ++i) {
    cur[0] = i;
    for (size_t j = 1; j <= m; ++j) {
      const size_t sub_cost = a[i - 1] == b[j - 1] ? 0 : 1;
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + sub_cost});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

double dist_norm(const Trace& a, const Trace& b) {
  const size_t longest = std::max(a.events.size(), b.events.size());
  if (longest == 0) return 0.0;
  return static_cast<double>(edit_distance(a.events, b.events)) / static_cast<double>(longest);
}

double calibrate_threshold(const std::vector<BinaryImage>& corpus, double percentile,
                           const TraceNoise& noise, uint64_t noise_seed) {
  if (corpus.empty()) fail(errc::empty_corpus, "calibration corpus is empty");
  std::vector<double> self_dists;
  self_dists.reserve(corpus.size());
  for (size_t i = 0; i < corpus.size(); ++i) {
    Trace a = execute(corpus[i]);
    Trace b = execute(corpus[i]);
    if (noise) {
      std::mt19937_64 rng(noise_seed + i);
      a = noise(a, rng);
      b = noise(b, rng);
    }
    self_dists.push_back(dist_norm(a, b));
  }
  std::sort(self_dists.begin(), self_dists.end());
  const size_t n = self_dists.size();
  size_t rank = static_cast<size_t>(std::ceil(percentile / 100.0 * static_cast<double>(n)));
  rank = std::clamp<size_t>(rank, 1, n);
  return std::max(self_dists[rank - 1], kDistDeltaEpsilon);
}

TraceComparison sem_equal(const BinaryImage& z, const BinaryImage& z_adv, double dist_delta,
                          uint64_t max_steps) {
  TraceComparison out;
  out.dist_delta = dist_delta;
  out.dist_norm = dist_norm(execute(z, max_steps), execute(z_adv, max_steps));
  out.sem_equal = out.dist_norm < dist_delta;
  return out;
}

}  // namespace rediv
