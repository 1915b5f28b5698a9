#ifndef REDIV_ERROR_HPP
#define REDIV_ERROR_HPP

#include <stdexcept>
#include <string>

namespace rediv {

enum class errc {
  // binary format
  malformed_header,
  unsupported_machine,
  overlapping_sections,
  misaligned_section,
  invariant_violation,
  no_such_section,
  duplicate_section_name,
  address_space_exhausted,
  zero_alignment,
  // instruction codec
  unknown_opcode,
  truncated_instruction,
  operand_out_of_range,
  // cfg
  decode_failure,
  entry_outside_code,
  // nop generator
  empty_whitelist,
  budget_too_small,
  // transformation
  invalid_call_site,
  budget_exceeded,
  // search
  no_call_sites,
  no_visited_children,
  no_actions,
  detector_error,
  // patching
  unresolvable_call_site,
  plan_mismatch,
  encoding_error,
  // detectors / metrics
  single_class_corpus,
  empty_corpus,
  unachievable,
  zero_denominator,
  // corpus synthesis
  generation_exhausted,
};

const char* errc_name(errc c);

class Error : public std::runtime_error {
 public:
  Error(errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  errc code() const { return code_; }

 private:
  errc code_;
};

[[noreturn]] inline void fail(errc code, const std::string& what) { throw Error(code, what); }

}  // namespace rediv

#endif  // REDIV_ERROR_HPP
