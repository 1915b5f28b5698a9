#include "rediv/error.hpp"

namespace rediv {

const char* errc_name(errc c) {
  switch (c) {
    case errc::malformed_header: return "MalformedHeader";
    case errc::unsupported_machine: return "UnsupportedMachine";
    case errc::overlapping_sections: return "OverlappingSections";
    case errc::misaligned_section: return "MisalignedSection";
    case errc::invariant_violation: return "InvariantViolation";
    case errc::no_such_section: return "NoSuchSection";
    case errc::duplicate_section_name: return "DuplicateSectionName";
    case errc::address_space_exhausted: return "AddressSpaceExhausted";
    case errc::zero_alignment: return "ZeroAlignment";
    case errc::unknown_opcode: return "UnknownOpcode";
    case errc::truncated_instruction: return "TruncatedInstruction";
    case errc::operand_out_of_range: return "OperandOutOfRange";
    case errc::decode_failure: return "DecodeFailure";
    case errc::entry_outside_code: return "EntryOutsideCode";
    case errc::empty_whitelist: return "EmptyWhitelist";
    case errc::budget_too_small: return "BudgetTooSmall";
    case errc::invalid_call_site: return "InvalidCallSite";
    case errc::budget_exceeded: return "BudgetExceeded";
    case errc::no_call_sites: return "NoCallSites";
    case errc::no_visited_children: return "NoVisitedChildren";
    case errc::no_actions: return "NoActions";
    case errc::detector_error: return "DetectorError";
    case errc::unresolvable_call_site: return "UnresolvableCallSite";
    case errc::plan_mismatch: return "PlanMismatch";
    case errc::encoding_error: return "EncodingError";
    case errc::single_class_corpus: return "SingleClassCorpus";
    case errc::empty_corpus: return "EmptyCorpus";
    case errc::unachievable: return "Unachievable";
    case errc::zero_denominator: return "ZeroDenominator";
    case errc::generation_exhausted: return "GenerationExhausted";
  }
  return "UnknownError";
}

}  // namespace rediv
