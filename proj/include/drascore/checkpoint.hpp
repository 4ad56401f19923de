#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "drascore/common.hpp"
#include "drascore/tensor.hpp"

#include <json.hpp>

namespace drascore {

// "DRAS1" checkpoint container: 5-byte magic, u32-length-prefixed JSON (the
// architecture descriptor plus an ordered blob directory), then the raw
// little-endian payloads in directory order.

inline constexpr char kCheckpointMagic[5] = {'D', 'R', 'A', 'S', '1'};

struct Blob {
  std::string name;
  std::string dtype;  // f32 | i32 | i64
  Shape shape;
  std::vector<float> f32;
  std::vector<std::int32_t> i32;
  std::vector<std::int64_t> i64;

  std::int64_t numel() const { return shape_numel(shape); }
  std::size_t byte_size() const {
    return static_cast<std::size_t>(numel()) * (dtype == "f32" ? 4 : dtype == "i32" ? 4 : 8);
  }
};

class BlobFile {
 public:
  nlohmann::json meta;

  void add_f32(const std::string& name, Shape shape, std::vector<float> data) {
    Blob b;
    b.name = name;
    b.dtype = "f32";
    b.shape = std::move(shape);
    require(static_cast<std::int64_t>(data.size()) == b.numel(),
            "checkpoint blob ", name, ": size mismatch");
    b.f32 = std::move(data);
    blobs_.push_back(std::move(b));
  }

  void add_i32(const std::string& name, Shape shape, std::vector<std::int32_t> data) {
    Blob b;
    b.name = name;
    b.dtype = "i32";
    b.shape = std::move(shape);
    require(static_cast<std::int64_t>(data.size()) == b.numel(),
            "checkpoint blob ", name, ": size mismatch");
    b.i32 = std::move(data);
    blobs_.push_back(std::move(b));
  }

  void add_i64(const std::string& name, Shape shape, std::vector<std::int64_t> data) {
    Blob b;
    b.name = name;
    b.dtype = "i64";
    b.shape = std::move(shape);
    require(static_cast<std::int64_t>(data.size()) == b.numel(),
            "checkpoint blob ", name, ": size mismatch");
    b.i64 = std::move(data);
    blobs_.push_back(std::move(b));
  }

  const Blob& find(const std::string& name) const {
    for (const auto& b : blobs_)
      if (b.name == name) return b;
    fail("checkpoint: missing blob ", name);
  }

  bool has(const std::string& name) const {
    for (const auto& b : blobs_)
      if (b.name == name) return true;
    return false;
  }

  const std::vector<Blob>& blobs() const { return blobs_; }

  void write(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), "checkpoint: cannot open ", path, " for writing");
    out.write(kCheckpointMagic, 5);
    nlohmann::json dir = nlohmann::json::array();
    for (const auto& b : blobs_)
      dir.push_back({{"name", b.name}, {"dtype", b.dtype}, {"shape", b.shape}});
    nlohmann::json header{{"meta", meta}, {"blobs", dir}};
    const std::string hs = header.dump();
    const std::uint32_t hlen = static_cast<std::uint32_t>(hs.size());
    out.write(reinterpret_cast<const char*>(&hlen), 4);
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& b : blobs_) {
      if (b.dtype == "f32")
        out.write(reinterpret_cast<const char*>(b.f32.data()),
                  static_cast<std::streamsize>(b.byte_size()));
      else if (b.dtype == "i32")
        out.write(reinterpret_cast<const char*>(b.i32.data()),
                  static_cast<std::streamsize>(b.byte_size()));
      else
        out.write(reinterpret_cast<const char*>(b.i64.data()),
                  static_cast<std::streamsize>(b.byte_size()));
    }
    require(out.good(), "checkpoint: write failed for ", path);
  }

  static BlobFile read(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    require(in.good(), "checkpoint: cannot open ", path);
    const std::int64_t file_size = static_cast<std::int64_t>(in.tellg());
    in.seekg(0);
    char magic[5];
    require(file_size >= 9, "checkpoint: ", path, " too short");
    in.read(magic, 5);
    require(std::memcmp(magic, kCheckpointMagic, 5) == 0, "checkpoint: bad magic in ",
            path);
    std::uint32_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), 4);
    require(9 + static_cast<std::int64_t>(hlen) <= file_size,
            "checkpoint: truncated header in ", path);
    std::string hs(hlen, '\0');
    in.read(hs.data(), hlen);
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(hs);
    } catch (const std::exception& e) {
      fail("checkpoint: invalid header JSON in ", path, ": ", e.what());
    }
    BlobFile f;
    f.meta = header.at("meta");
    std::int64_t payload = 0;
    for (const auto& jb : header.at("blobs")) {
      Blob b;
      b.name = jb.at("name").get<std::string>();
      b.dtype = jb.at("dtype").get<std::string>();
      b.shape = jb.at("shape").get<Shape>();
      payload += static_cast<std::int64_t>(b.byte_size());
      f.blobs_.push_back(std::move(b));
    }
    require(9 + hlen + payload == file_size, "checkpoint: ", path, " expected ",
            9 + hlen + payload, " bytes but file has ", file_size);
    for (auto& b : f.blobs_) {
      if (b.dtype == "f32") {
        b.f32.resize(static_cast<std::size_t>(b.numel()));
        in.read(reinterpret_cast<char*>(b.f32.data()),
                static_cast<std::streamsize>(b.byte_size()));
      } else if (b.dtype == "i32") {
        b.i32.resize(static_cast<std::size_t>(b.numel()));
        in.read(reinterpret_cast<char*>(b.i32.data()),
                static_cast<std::streamsize>(b.byte_size()));
      } else if (b.dtype == "i64") {
        b.i64.resize(static_cast<std::size_t>(b.numel()));
        in.read(reinterpret_cast<char*>(b.i64.data()),
                static_cast<std::streamsize>(b.byte_size()));
      } else {
        fail("checkpoint: unknown dtype ", b.dtype, " for blob ", b.name);
      }
    }
    require(in.good(), "checkpoint: read failed for ", path);
    return f;
  }

 private:
  std::vector<Blob> blobs_;
};

}  // namespace drascore
