// SPDX-License-Identifier: Apache-2.0

#include "agrifuse/serialize.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "agrifuse/errors.hpp"

namespace agrifuse {

namespace {

constexpr char kMagic[4] = {'A', 'G', 'T', '1'};

void append_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>(v >> (8 * i)));
}

std::uint64_t take_u64(const std::string& in, std::size_t& pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i]))
         << (8 * i);
  }
  pos += 8;
  return v;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return data;
}

}  // namespace

void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::string buf;
  buf.reserve(4 + 8 * (1 + t.rank()) + 8 * t.size());
  buf.append(kMagic, 4);
  append_u64(buf, t.rank());
  for (std::size_t d : t.shape()) append_u64(buf, d);
  for (double v : t.values()) {
    append_u64(buf, std::bit_cast<std::uint64_t>(v));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("short write to " + path.string());
}

Tensor read_tensor(const std::filesystem::path& path) {
  const std::string data = slurp(path);
  if (data.size() < 12 || std::memcmp(data.data(), kMagic, 4) != 0) {
    throw IoError("not an AGT1 container: " + path.string());
  }
  std::size_t pos = 4;
  const std::uint64_t rank = take_u64(data, pos);
  if (rank > 8 || data.size() < pos + 8 * rank) {
    throw IoError("corrupt AGT1 header: " + path.string());
  }
  Shape shape(rank);
  std::size_t numel = 1;
  for (std::uint64_t i = 0; i < rank; ++i) {
    shape[i] = take_u64(data, pos);
    numel *= shape[i];
  }
  if (data.size() != pos + 8 * numel) {
    throw IoError("AGT1 payload size mismatch: " + path.string());
  }
  std::vector<double> values(numel);
  for (std::size_t i = 0; i < numel; ++i) {
    values[i] = std::bit_cast<double>(take_u64(data, pos));
  }
  return Tensor::from_vector(std::move(shape), std::move(values));
}

void save_checkpoint(const std::filesystem::path& dir, const ParamMap& params,
                     const nlohmann::json& hyper) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "tensors", ec);
  if (ec) throw IoError("cannot create " + (dir / "tensors").string());
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& [name, t] : params) {
    write_tensor(dir / "tensors" / (name + ".agt"), *t);
    tensors.push_back({{"name", name}, {"shape", t->shape()}});
  }
  nlohmann::json manifest = {{"format", "agrifuse-checkpoint-v1"},
                             {"tensors", tensors},
                             {"hyper", hyper}};
  write_json_file(dir / "manifest.json", manifest);
}

nlohmann::json load_checkpoint(const std::filesystem::path& dir,
                               ParamMap params) {
  const nlohmann::json manifest = read_json_file(dir / "manifest.json");
  if (manifest.value("format", "") != "agrifuse-checkpoint-v1") {
    throw IoError("unrecognized checkpoint format in " + dir.string());
  }
  const auto& listed = manifest.at("tensors");
  if (listed.size() != params.size()) {
    throw IoError("checkpoint lists " + std::to_string(listed.size()) +
                  " tensors, model has " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string name = listed[i].at("name");
    if (name != params[i].first) {
      throw IoError("checkpoint tensor '" + name + "' where model expects '" +
                    params[i].first + "'");
    }
    Tensor loaded = read_tensor(dir / "tensors" / (name + ".agt"));
    Tensor* dst = params[i].second;
    if (loaded.shape() != dst->shape()) {
      throw IoError("checkpoint tensor '" + name + "' has shape " +
                    shape_str(loaded.shape()) + ", model expects " +
                    shape_str(dst->shape()));
    }
    auto out = dst->mutable_values();
    auto in = loaded.values();
    std::copy(in.begin(), in.end(), out.begin());
  }
  return manifest.at("hyper");
}

nlohmann::json read_checkpoint_hyper(const std::filesystem::path& dir) {
  return read_json_file(dir / "manifest.json").at("hyper");
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json value;
  try {
    in >> value;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
  return value;
}

void write_json_file(const std::filesystem::path& path,
                     const nlohmann::json& value) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << value.dump(2) << '\n';
  if (!out) throw IoError("short write to " + path.string());
}

std::string config_hash(const nlohmann::json& value) {
  const std::string text = value.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(h));
  return std::string(buf);
}

}  // namespace agrifuse
