#ifndef REDIV_EMU_HPP
#define REDIV_EMU_HPP

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rediv/binfmt.hpp"
#include "rediv/isa.hpp"

namespace rediv {

// dist_delta floor: with a fully deterministic interpreter all self-distances
// are zero and the strict-inequality semantics rule would reject identical
// traces, so the calibrated threshold never drops below this.
constexpr double kDistDeltaEpsilon = 1e-9;

constexpr uint32_t kStackTop = 0x7FFF0000;
constexpr uint32_t kStackBytes = 0x10000;
constexpr uint32_t kReturnSentinel = 0xFFFFFFFF;
constexpr uint64_t kDefaultMaxSteps = 1'000'000;

enum class HaltReason : uint8_t { Clean, StepLimit, Fault };

struct Event {
  enum class Kind : uint8_t { CallTo, Syscall, Halt } kind;
  uint32_t value = 0;  // callee rva / eax / fault address
  HaltReason halt = HaltReason::Clean;

  bool operator==(const Event&) const = default;
};

Event make_call_event(rva_t callee);
Event make_syscall_event(uint32_t eax);
Event make_halt_event(HaltReason r, uint32_t addr = 0);

struct Trace {
  std::vector<Event> events;

  bool operator==(const Trace&) const = default;
};

std::string format_event(const Event& e);
std::string format_trace(const Trace& t);

struct MachineState {
  std::array<uint32_t, 8> regs{};  // indexed by Reg
  bool zf = false, sf = false, of = false, cf = false;
  rva_t ip = 0;
  uint64_t steps = 0;
  std::vector<uint8_t> stack;  // region [kStackTop - kStackBytes, kStackTop)

  MachineState();

  uint32_t& reg(Reg r) { return regs[static_cast<uint8_t>(r)]; }
  uint32_t reg(Reg r) const { return regs[static_cast<uint8_t>(r)]; }
  uint32_t esp() const { return regs[static_cast<uint8_t>(Reg::ESP)]; }
};

// Interprets the image from its entry point and returns the observable trace.
// Deterministic; faults and step exhaustion become Halt events, never errors.
Trace execute(const BinaryImage& image, uint64_t max_steps = kDefaultMaxSteps);

// Runs a free-standing code buffer (no image) from its first byte with the
// given machine state; used to check nop sequences in isolation. Returns the
// final state and the trace. Execution stops cleanly when the instruction
// pointer reaches one past the buffer.
struct BufferRun {
  MachineState state;
  Trace trace;
};
BufferRun execute_buffer(std::span<const uint8_t> code, rva_t base, const MachineState& initial,
                         uint64_t max_steps = kDefaultMaxSteps);

// Levenshtein distance over whole events, unit costs.
size_t edit_distance(std::span<const Event> a, std::span<const Event> b);

// Normalized edit distance in [0,1]; both-empty compares to 0.
double dist_norm(const Trace& a, const Trace& b);

// Optional perturbation applied to traces during calibration (test hook).
using TraceNoise = std::function<Trace(const Trace&, std::mt19937_64&)>;

// Runs every binary twice, computes the self dist_norm of each pair, and
// returns the nearest-rank percentile of those values, floored at
// kDistDeltaEpsilon. Throws EmptyCorpus.
double calibrate_threshold(const std::vector<BinaryImage>& corpus, double percentile = 99.5,
                           const TraceNoise& noise = nullptr, uint64_t noise_seed = 0);

struct TraceComparison {
  double dist_norm = 0.0;
  double dist_delta = 0.0;
  bool sem_equal = false;
};

// Executes both images and fills the comparison; equal iff the normalized
// distance is strictly below dist_delta.
TraceComparison sem_equal(const BinaryImage& z, const BinaryImage& z_adv, double dist_delta,
                          uint64_t max_steps = kDefaultMaxSteps);

}  // namespace rediv

#endif  // REDIV_EMU_HPP
