#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "drascore/common.hpp"
#include "drascore/volume.hpp"

#include <json.hpp>

namespace drascore {

// "PVOL1" volume container: 8-byte magic, u32-length-prefixed JSON header
// {extents, spacing, has_mask, dtype:"f32"}, row-major little-endian f32
// intensities, then a packed LSB-first bitmask when has_mask is set.

inline constexpr char kPvolMagic[8] = {'P', 'V', 'O', 'L', '1', '\0', '\0', '\0'};

inline void write_volume(const Volume& v, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "write_volume: cannot open ", path);
  out.write(kPvolMagic, 8);
  nlohmann::json header{{"extents", v.extents},
                        {"spacing", v.spacing},
                        {"has_mask", !v.roi_mask.empty()},
                        {"dtype", "f32"}};
  const std::string hs = header.dump();
  const std::uint32_t hlen = static_cast<std::uint32_t>(hs.size());
  out.write(reinterpret_cast<const char*>(&hlen), 4);
  out.write(hs.data(), hs.size());
  out.write(reinterpret_cast<const char*>(v.intensities.data()),
            static_cast<std::streamsize>(v.intensities.size() * sizeof(float)));
  if (!v.roi_mask.empty()) {
    std::vector<std::uint8_t> packed((v.roi_mask.size() + 7) / 8, 0);
    for (std::size_t i = 0; i < v.roi_mask.size(); ++i)
      if (v.roi_mask[i]) packed[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    out.write(reinterpret_cast<const char*>(packed.data()),
              static_cast<std::streamsize>(packed.size()));
  }
  require(out.good(), "write_volume: write failed for ", path);
}

inline Volume read_volume(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  require(in.good(), "read_volume: cannot open ", path);
  const std::int64_t file_size = static_cast<std::int64_t>(in.tellg());
  in.seekg(0);
  char magic[8];
  require(file_size >= 12, "read_volume: ", path, " too short (", file_size, " bytes)");
  in.read(magic, 8);
  require(std::memcmp(magic, kPvolMagic, 8) == 0, "read_volume: bad magic in ", path);
  std::uint32_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 4);
  require(12 + static_cast<std::int64_t>(hlen) <= file_size,
          "read_volume: truncated header in ", path);
  std::string hs(hlen, '\0');
  in.read(hs.data(), hlen);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const std::exception& e) {
    fail("read_volume: invalid header JSON in ", path, ": ", e.what());
  }
  require(header.value("dtype", "") == "f32", "read_volume: unsupported dtype in ", path);
  Volume v;
  const auto& ext = header.at("extents");
  require(ext.size() == 3, "read_volume: extents must have 3 entries in ", path);
  for (int i = 0; i < 3; ++i) {
    v.extents[i] = ext[i].get<std::int64_t>();
    require(v.extents[i] >= 1, "read_volume: non-positive extent axis ", i, " in ", path);
  }
  v.spacing = header.at("spacing").get<double>();
  const bool has_mask = header.at("has_mask").get<bool>();
  const std::int64_t n = v.numel();
  const std::int64_t expected =
      12 + hlen + n * 4 + (has_mask ? (n + 7) / 8 : 0);
  require(expected == file_size, "read_volume: ", path, " expected ", expected,
          " bytes for extents ", v.extents[0], "x", v.extents[1], "x", v.extents[2],
          " but file has ", file_size);
  v.intensities.resize(static_cast<std::size_t>(n));
  in.read(reinterpret_cast<char*>(v.intensities.data()),
          static_cast<std::streamsize>(n * 4));
  if (has_mask) {
    std::vector<std::uint8_t> packed(static_cast<std::size_t>((n + 7) / 8));
    in.read(reinterpret_cast<char*>(packed.data()),
            static_cast<std::streamsize>(packed.size()));
    v.roi_mask.assign(static_cast<std::size_t>(n), 0);
    for (std::int64_t i = 0; i < n; ++i)
      v.roi_mask[i] = (packed[i / 8] >> (i % 8)) & 1u;
  }
  require(in.good(), "read_volume: read failed for ", path);
  return v;
}

}  // namespace drascore
