#ifndef REDIV_TESTS_HELPERS_HPP
#define REDIV_TESTS_HELPERS_HPP

#include <cstdint>
#include <numeric>
#include <vector>

#include "rediv/binfmt.hpp"
#include "rediv/emu.hpp"
#include "rediv/isa.hpp"

namespace rediv::testing {

// Wraps hand-written code bytes into a minimal one-section image at the
// standard synthetic layout (.text at rva 0x1000, entry at its start).
inline BinaryImage image_from_code(std::vector<uint8_t> code) {
  BinaryImage img;
  img.dos_stub.assign(0x40, 0);
  img.dos_stub[0] = 'M';
  img.dos_stub[1] = 'Z';
  img.e_lfanew = 0x40;
  img.coff_rest.assign(14, 0);
  img.optional_header.assign(224, 0);
  img.entry_point_rva = 0x1000;

  Section text;
  text.name = ".text";
  text.virtual_address = 0x1000;
  text.virtual_size = static_cast<uint32_t>(code.size());
  text.raw_offset = 0x200;
  text.raw_size = static_cast<uint32_t>(round_up(code.size(), 0x200));
  text.perms = {.read = true, .write = false, .execute = true};
  text.data = std::move(code);
  text.data.resize(text.raw_size, 0);
  img.sections.push_back(std::move(text));
  img.size_of_image = static_cast<uint32_t>(round_up(0x1000 + img.sections[0].virtual_size, 0x1000));
  return img;
}

// Tiny append-only assembler for hand-built fixtures.
struct Asm {
  std::vector<uint8_t> bytes;
  rva_t base = 0x1000;

  rva_t here() const { return base + static_cast<rva_t>(bytes.size()); }
  void put(const Instruction& ins) { bytes.insert(bytes.end(), ins.raw.begin(), ins.raw.end()); }
};

// Independent reference for the edit distance: full-matrix recursion written
// against the textbook definition, kept deliberately separate from the
// two-row implementation under test.
inline size_t reference_edit_distance(const std::vector<Event>& a, const std::vector<Event>& b) {
  const size_t n = a.size(), m = b.size();
  std::vector<std::vector<size_t>> d(n + 1, std::vector<size_t>(m + 1, 0));
  for (size_t i = 0; i <= n; ++i) d[i][0] = i;
  for (size_t j = 0; j <= m; ++j) d[0][j] = j;
  for (size_t i = 1; i <= n; ++i)
    for (size_t j = 1; j <= m; ++j) {
      const size_t del = d[i - 1][j] + 1;
      const size_t ins = d[i][j - 1] + 1;
      const size_t sub = d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      d[i][j] = std::min({del, ins, sub});
    }
  return d[n][m];
}

}  // namespace rediv::testing

#endif  // REDIV_TESTS_HELPERS_HPP
