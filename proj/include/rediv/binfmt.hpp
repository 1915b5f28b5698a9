#ifndef REDIV_BINFMT_HPP
#define REDIV_BINFMT_HPP

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rediv/isa.hpp"

namespace rediv {

struct SectionPerms {
  bool read = true;
  bool write = false;
  bool execute = false;

  bool operator==(const SectionPerms&) const = default;
};

// Characteristics bits used by the on-disk form.
constexpr uint32_t kSectionMemExecute = 0x20000000;
constexpr uint32_t kSectionMemRead = 0x40000000;
constexpr uint32_t kSectionMemWrite = 0x80000000;
constexpr uint32_t kSectionCntCode = 0x00000020;

struct Section {
  std::string name;  // up to 8 bytes, NUL padded on disk
  rva_t virtual_address = 0;
  uint32_t virtual_size = 0;  // meaningful byte extent
  uint32_t raw_offset = 0;
  uint32_t raw_size = 0;
  SectionPerms perms;
  std::vector<uint8_t> data;  // length == raw_size

  bool contains_rva(rva_t rva) const {
    return rva >= virtual_address && rva - virtual_address < std::max(virtual_size, raw_size);
  }

  bool operator==(const Section&) const = default;
};

// A parsed executable in the PE32 subset: DOS stub, COFF header, optional
// header (semantically-used fields parsed, remaining bytes preserved
// verbatim), and the section table with raw data. Immutable value type; all
// operations return new images.
struct BinaryImage {
  std::vector<uint8_t> dos_stub;  // bytes [0, e_lfanew), "MZ" at 0
  uint32_t e_lfanew = 0x40;
  uint16_t machine = 0x014C;  // I386
  rva_t entry_point_rva = 0;
  uint32_t image_base = 0x400000;
  uint32_t section_alignment = 0x1000;
  uint32_t file_alignment = 0x200;
  uint32_t size_of_image = 0;
  std::vector<Section> sections;

  // Preserved verbatim between parse and serialize.
  std::vector<uint8_t> coff_rest;        // COFF header minus machine / nsections / optsize
  std::vector<uint8_t> optional_header;  // full optional header bytes

  const Section* find_section(const std::string& name) const;
  const Section* section_at_rva(rva_t rva) const;

  // File offset corresponding to an rva inside a section's raw data.
  std::optional<uint32_t> rva_to_file_offset(rva_t rva) const;

  bool operator==(const BinaryImage&) const = default;
};

// Smallest multiple of `alignment` that is >= value. Alignment must be a
// power of two; throws ZeroAlignment otherwise.
uint64_t round_up(uint64_t value, uint64_t alignment);

// Parses a PE32-subset byte image, checking all structural invariants.
// Throws MalformedHeader, UnsupportedMachine, OverlappingSections,
// MisalignedSection.
BinaryImage parse_image(std::span<const uint8_t> bytes);

// Serializes the image bit-exactly; throws InvariantViolation if the image
// does not satisfy its invariants.
std::vector<uint8_t> serialize_image(const BinaryImage& image);

// Checks the BinaryImage invariants; returns a description of the first
// violation, or nullopt when the image is well formed.
std::optional<std::string> check_invariants(const BinaryImage& image);

// Address just past the named section's meaningful bytes and the padding
// remaining up to min(raw_size, round_up(virtual_size, section_alignment)).
struct SlackSpace {
  rva_t addr = 0;
  uint32_t size = 0;
};
SlackSpace slack_space(const BinaryImage& image, const std::string& section_name);

// Appends a new section at A_last + round_up(S_last, section_alignment) with
// the given payload and recomputes size_of_image. Throws DuplicateSectionName
// or AddressSpaceExhausted.
BinaryImage add_section(const BinaryImage& image, const std::string& name,
                        std::span<const uint8_t> data, SectionPerms perms);

}  // namespace rediv

#endif  // REDIV_BINFMT_HPP
