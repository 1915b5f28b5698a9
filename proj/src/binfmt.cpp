#include "rediv/binfmt.hpp"

#include <algorithm>
#include <set>

#include "rediv/error.hpp"

namespace rediv {

namespace {

constexpr uint16_t kMachineI386 = 0x014C;
constexpr uint16_t kOptionalMagicPe32 = 0x10B;
constexpr uint32_t kCoffHeaderSize = 20;
constexpr uint32_t kSectionEntrySize = 40;
constexpr uint32_t kSectionCntInitializedData = 0x00000040;

uint16_t read_le16(std::span<const uint8_t> b, size_t at) {
  return static_cast<uint16_t>(b[at]) | (static_cast<uint16_t>(b[at + 1]) << 8);
}

uint32_t read_le32(std::span<const uint8_t> b, size_t at) {
  return static_cast<uint32_t>(b[at]) | (static_cast<uint32_t>(b[at + 1]) << 8) |
         (static_cast<uint32_t>(b[at + 2]) << 16) | (static_cast<uint32_t>(b[at + 3]) << 24);
}

void write_le16(std::vector<uint8_t>& b, size_t at, uint16_t v) {
  b[at] = v & 0xFF;
  b[at + 1] = (v >> 8) & 0xFF;
}

void write_le32(std::vector<uint8_t>& b, size_t at, uint32_t v) {
  b[at] = v & 0xFF;
  b[at + 1] = (v >> 8) & 0xFF;
  b[at + 2] = (v >> 16) & 0xFF;
  b[at + 3] = (v >> 24) & 0xFF;
}

bool is_pow2(uint64_t v) { return v != 0 && (v & (v - 1)) == 0; }

uint32_t characteristics_of(const Section& s) {
  uint32_t c = 0;
  if (s.perms.execute)
    c |= kSectionCntCode | kSectionMemExecute;
  else
    c |= kSectionCntInitializedData;
  if (s.perms.read) c |= kSectionMemRead;
  if (s.perms.write) c |= kSectionMemWrite;
  return c;
}

// Virtual pages claimed by a section.
uint64_t virtual_extent(const Section& s, uint32_t salign) {
  return round_up(std::max<uint64_t>(s.virtual_size, 1), salign);
}

uint32_t headers_end(const BinaryImage& img) {
  return img.e_lfanew + 4 + kCoffHeaderSize + static_cast<uint32_t>(img.optional_header.size()) +
         kSectionEntrySize * static_cast<uint32_t>(img.sections.size());
}

}  // namespace

uint64_t round_up(uint64_t value, uint64_t alignment) {
  if (!is_pow2(alignment)) fail(errc::zero_alignment, "alignment must be a nonzero power of two");
  return (value + alignment - 1) & ~(alignment - 1);
}

const Section* BinaryImage::find_section(const std::string& name) const {
  for (const auto& s : sections)
    if (s.name == name) return &s;
  return nullptr;
}

const Section* BinaryImage::section_at_rva(rva_t rva) const {
  for (const auto& s : sections)
    if (s.contains_rva(rva)) return &s;
  return nullptr;
}

std::optional<uint32_t> BinaryImage::rva_to_file_offset(rva_t rva) const {
  const Section* s = section_at_rva(rva);
  if (!s) return std::nullopt;
  const uint32_t off = rva - s->virtual_address;
  if (off >= s->raw_size) return std::nullopt;
  return s->raw_offset + off;
}

std::optional<std::string> check_invariants(const BinaryImage& img) {
  if (img.dos_stub.size() < 0x40 || img.dos_stub.size() != img.e_lfanew)
    return "dos_stub length inconsistent with e_lfanew";
  if (img.dos_stub[0] != 'M' || img.dos_stub[1] != 'Z') return "missing MZ magic";
  if (img.machine != kMachineI386) return "unsupported machine";
  if (!is_pow2(img.section_alignment)) return "section_alignment not a power of two";
  if (!is_pow2(img.file_alignment)) return "file_alignment not a power of two";
  if (img.optional_header.size() < 64) return "optional header too short";
  if (img.sections.empty()) return "image has no sections";

  std::set<std::string> names;
  for (size_t i = 0; i < img.sections.size(); ++i) {
    const Section& s = img.sections[i];
    if (s.name.empty() || s.name.size() > 8) return "bad section name: " + s.name;
    if (!names.insert(s.name).second) return "duplicate section name: " + s.name;
    if (s.data.size() != s.raw_size) return s.name + ": data length != raw_size";
    if (s.virtual_address % img.section_alignment != 0)
      return s.name + ": virtual address not section-aligned";
    if (s.raw_offset % img.file_alignment != 0) return s.name + ": raw offset not file-aligned";
    if (s.raw_size % img.file_alignment != 0) return s.name + ": raw size not file-aligned";
    if (s.virtual_size == 0) return s.name + ": empty virtual size";
    if (i > 0) {
      const Section& p = img.sections[i - 1];
      if (s.virtual_address < p.virtual_address + virtual_extent(p, img.section_alignment))
        return "virtual overlap between " + p.name + " and " + s.name;
      if (s.raw_offset < p.raw_offset + p.raw_size)
        return "file overlap between " + p.name + " and " + s.name;
    }
  }

  const Section& last = img.sections.back();
  const uint64_t expect =
      round_up(static_cast<uint64_t>(last.virtual_address) + last.virtual_size,
               img.section_alignment);
  if (img.size_of_image != expect) return "size_of_image inconsistent with section extents";

  if (img.sections.front().raw_offset < headers_end(img)) return "headers overlap section data";

  const Section* entry_sec = nullptr;
  for (const auto& s : img.sections)
    if (img.entry_point_rva >= s.virtual_address &&
        img.entry_point_rva < s.virtual_address + s.virtual_size)
      entry_sec = &s;
  if (!entry_sec || !entry_sec->perms.execute)
    return "entry point not inside an executable section";

  return std::nullopt;
}

BinaryImage parse_image(std::span<const uint8_t> bytes) {
  if (bytes.size() < 0x40) fail(errc::malformed_header, "file too small for a DOS header");
  if (bytes[0] != 'M' || bytes[1] != 'Z') fail(errc::malformed_header, "missing MZ magic");

  const uint32_t e_lfanew = read_le32(bytes, 0x3C);
  if (e_lfanew < 0x40 || static_cast<uint64_t>(e_lfanew) + 4 + kCoffHeaderSize > bytes.size())
    fail(errc::malformed_header, "e_lfanew out of range");
  if (bytes[e_lfanew] != 'P' || bytes[e_lfanew + 1] != 'E' || bytes[e_lfanew + 2] != 0 ||
      bytes[e_lfanew + 3] != 0)
    fail(errc::malformed_header, "missing PE signature");

  BinaryImage img;
  img.dos_stub.assign(bytes.begin(), bytes.begin() + e_lfanew);
  img.e_lfanew = e_lfanew;
  // Semantic fields live in the struct; their byte positions are normalized
  // to zero in the preserved blobs so values round-trip through the fields.
  for (size_t i = 0x3C; i < 0x40; ++i) img.dos_stub[i] = 0;

  const size_t coff = e_lfanew + 4;
  img.machine = read_le16(bytes, coff);
  if (img.machine != kMachineI386) fail(errc::unsupported_machine, "machine != I386");
  const uint16_t nsections = read_le16(bytes, coff + 2);
  const uint16_t opt_size = read_le16(bytes, coff + 16);
  img.coff_rest.assign(bytes.begin() + coff + 4, bytes.begin() + coff + 16);
  img.coff_rest.insert(img.coff_rest.end(), bytes.begin() + coff + 18, bytes.begin() + coff + 20);

  const size_t opt = coff + kCoffHeaderSize;
  if (opt_size < 64 || opt + opt_size > bytes.size())
    fail(errc::malformed_header, "optional header out of range");
  if (read_le16(bytes, opt) != kOptionalMagicPe32)
    fail(errc::malformed_header, "optional header magic != PE32");
  img.optional_header.assign(bytes.begin() + opt, bytes.begin() + opt + opt_size);
  img.entry_point_rva = read_le32(bytes, opt + 16);
  img.image_base = read_le32(bytes, opt + 28);
  img.section_alignment = read_le32(bytes, opt + 32);
  img.file_alignment = read_le32(bytes, opt + 36);
  img.size_of_image = read_le32(bytes, opt + 56);
  img.optional_header[0] = 0;  // magic, 2 bytes
  img.optional_header[1] = 0;
  for (size_t at : {size_t{16}, size_t{28}, size_t{32}, size_t{36}, size_t{56}})
    for (size_t i = 0; i < 4; ++i) img.optional_header[at + i] = 0;
  if (!is_pow2(img.section_alignment) || !is_pow2(img.file_alignment))
    fail(errc::malformed_header, "alignment not a power of two");

  const size_t table = opt + opt_size;
  if (table + static_cast<size_t>(nsections) * kSectionEntrySize > bytes.size())
    fail(errc::malformed_header, "section table out of range");

  for (uint16_t i = 0; i < nsections; ++i) {
    const size_t e = table + static_cast<size_t>(i) * kSectionEntrySize;
    Section s;
    for (size_t j = 0; j < 8 && bytes[e + j] != 0; ++j) s.name.push_back(bytes[e + j]);
    s.virtual_size = read_le32(bytes, e + 8);
    s.virtual_address = read_le32(bytes, e + 12);
    s.raw_size = read_le32(bytes, e + 16);
    s.raw_offset = read_le32(bytes, e + 20);
    const uint32_t characteristics = read_le32(bytes, e + 36);
    s.perms.read = characteristics & kSectionMemRead;
    s.perms.write = characteristics & kSectionMemWrite;
    s.perms.execute = characteristics & kSectionMemExecute;
    if (static_cast<uint64_t>(s.raw_offset) + s.raw_size > bytes.size())
      fail(errc::malformed_header, s.name + ": raw data out of range");
    s.data.assign(bytes.begin() + s.raw_offset, bytes.begin() + s.raw_offset + s.raw_size);
    img.sections.push_back(std::move(s));
  }

  if (auto why = check_invariants(img)) {
    if (why->find("not section-aligned") != std::string::npos ||
        why->find("not file-aligned") != std::string::npos)
      fail(errc::misaligned_section, *why);
    if (why->find("overlap") != std::string::npos) fail(errc::overlapping_sections, *why);
    fail(errc::malformed_header, *why);
  }
  return img;
}

std::vector<uint8_t> serialize_image(const BinaryImage& img) {
  if (auto why = check_invariants(img)) fail(errc::invariant_violation, *why);

  uint64_t file_size = headers_end(img);
  for (const auto& s : img.sections)
    file_size = std::max(file_size, static_cast<uint64_t>(s.raw_offset) + s.raw_size);

  std::vector<uint8_t> out(file_size, 0);
  std::copy(img.dos_stub.begin(), img.dos_stub.end(), out.begin());
  write_le32(out, 0x3C, img.e_lfanew);

  const size_t pe = img.e_lfanew;
  out[pe] = 'P';
  out[pe + 1] = 'E';
  const size_t coff = pe + 4;
  write_le16(out, coff, img.machine);
  write_le16(out, coff + 2, static_cast<uint16_t>(img.sections.size()));
  std::copy(img.coff_rest.begin(), img.coff_rest.begin() + 12, out.begin() + coff + 4);
  write_le16(out, coff + 16, static_cast<uint16_t>(img.optional_header.size()));
  std::copy(img.coff_rest.begin() + 12, img.coff_rest.end(), out.begin() + coff + 18);

  const size_t opt = coff + kCoffHeaderSize;
  std::copy(img.optional_header.begin(), img.optional_header.end(), out.begin() + opt);
  write_le16(out, opt, kOptionalMagicPe32);
  write_le32(out, opt + 16, img.entry_point_rva);
  write_le32(out, opt + 28, img.image_base);
  write_le32(out, opt + 32, img.section_alignment);
  write_le32(out, opt + 36, img.file_alignment);
  write_le32(out, opt + 56, img.size_of_image);

  size_t e = opt + img.optional_header.size();
  for (const auto& s : img.sections) {
    for (size_t j = 0; j < 8; ++j) out[e + j] = j < s.name.size() ? s.name[j] : 0;
    write_le32(out, e + 8, s.virtual_size);
    write_le32(out, e + 12, s.virtual_address);
    write_le32(out, e + 16, s.raw_size);
    write_le32(out, e + 20, s.raw_offset);
    write_le32(out, e + 36, characteristics_of(s));
    e += kSectionEntrySize;
    std::copy(s.data.begin(), s.data.end(), out.begin() + s.raw_offset);
  }
  return out;
}

SlackSpace slack_space(const BinaryImage& img, const std::string& section_name) {
  const Section* s = img.find_section(section_name);
  if (!s) fail(errc::no_such_section, section_name);
  const uint64_t mapped =
      std::min<uint64_t>(s->raw_size, round_up(s->virtual_size, img.section_alignment));
  SlackSpace out;
  out.addr = s->virtual_address + s->virtual_size;
  out.size = mapped > s->virtual_size ? static_cast<uint32_t>(mapped - s->virtual_size) : 0;
  return out;
}

BinaryImage add_section(const BinaryImage& img, const std::string& name,
                        std::span<const uint8_t> data, SectionPerms perms) {
  if (img.find_section(name)) fail(errc::duplicate_section_name, name);
  if (data.empty()) fail(errc::invariant_violation, "new section payload is empty");

  const Section& last = img.sections.back();
  const uint64_t va = static_cast<uint64_t>(last.virtual_address) +
                      round_up(last.virtual_size, img.section_alignment);
  const uint64_t vsize = data.size();
  if (round_up(va + vsize, img.section_alignment) > 0xFFFFFFFFull)
    fail(errc::address_space_exhausted, "virtual address space exhausted");

  uint64_t raw_end = 0;
  for (const auto& s : img.sections)
    raw_end = std::max(raw_end, static_cast<uint64_t>(s.raw_offset) + s.raw_size);

  BinaryImage out = img;
  Section s;
  s.name = name;
  s.virtual_address = static_cast<rva_t>(va);
  s.virtual_size = static_cast<uint32_t>(vsize);
  s.raw_offset = static_cast<uint32_t>(round_up(raw_end, img.file_alignment));
  s.raw_size = static_cast<uint32_t>(round_up(vsize, img.file_alignment));
  s.perms = perms;
  s.data.assign(data.begin(), data.end());
  s.data.resize(s.raw_size, 0);
  out.sections.push_back(std::move(s));
  out.size_of_image = static_cast<uint32_t>(round_up(va + vsize, img.section_alignment));

  // The grown table must still fit below the first section's raw data.
  if (out.sections.front().raw_offset < headers_end(out))
    fail(errc::address_space_exhausted, "no header room for another section entry");
  return out;
}

}  // namespace rediv
