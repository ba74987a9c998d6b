#pragma once

// Checkpoint file format: 8-byte magic, u64 JSON header length, JSON header
// (config, metadata, and a parameter table of name/shape/offset), u64 value
// count, then the flat little-endian float64 parameter block. Writes go
// through a temp file + rename so a crashed run never leaves a loadable
// truncated checkpoint.

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcqa/tensor.hpp"

namespace mcqa {

struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

struct Checkpoint {
  nlohmann::json meta;  // model config plus arbitrary metadata
  std::vector<std::pair<std::string, std::vector<std::size_t>>> names;  // name, shape
  std::vector<double> values;  // concatenated row-major blocks

  static constexpr char kMagic[9] = "MCQACKP1";

  static Checkpoint from_params(nlohmann::json meta,
                                const std::vector<std::pair<std::string, Tensor>>& params) {
    Checkpoint ck;
    ck.meta = std::move(meta);
    for (auto& [name, t] : params) {
      ck.names.emplace_back(name, t.shape());
      ck.values.insert(ck.values.end(), t.data().begin(), t.data().end());
    }
    return ck;
  }

  // Copies stored values into live parameter tensors; names, order, and
  // shapes must match exactly.
  void restore_into(const std::vector<std::pair<std::string, Tensor>>& params) const {
    if (params.size() != names.size())
      throw CheckpointError("checkpoint has " + std::to_string(names.size()) +
                            " parameters, model expects " + std::to_string(params.size()));
    std::size_t off = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& [name, shape] = names[i];
      const auto& [pname, t] = params[i];
      if (name != pname)
        throw CheckpointError("checkpoint parameter '" + name + "' does not match model '" + pname + "'");
      if (shape != t.shape())
        throw CheckpointError("checkpoint parameter '" + name + "' shape mismatch");
      std::copy_n(values.begin() + off, t.size(), const_cast<Tensor&>(t).data().begin());
      off += t.size();
    }
    if (off != values.size()) throw CheckpointError("checkpoint value block size mismatch");
  }

  void save(const std::string& path) const {
    nlohmann::json header = meta;
    auto& table = header["params"] = nlohmann::json::array();
    std::size_t off = 0;
    for (auto& [name, shape] : names) {
      table.push_back({{"name", name}, {"shape", shape}, {"offset", off}});
      off += shape_size(shape);
    }
    if (off != values.size()) throw CheckpointError("checkpoint table does not cover value block");
    const std::string body = header.dump();

    const std::string tmp = path + ".tmp";
    {
      std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
      if (!os) throw CheckpointError("cannot write checkpoint: " + tmp);
      os.write(kMagic, 8);
      const std::uint64_t jlen = body.size();
      os.write(reinterpret_cast<const char*>(&jlen), 8);
      os.write(body.data(), static_cast<std::streamsize>(body.size()));
      const std::uint64_t count = values.size();
      os.write(reinterpret_cast<const char*>(&count), 8);
      os.write(reinterpret_cast<const char*>(values.data()),
               static_cast<std::streamsize>(values.size() * sizeof(double)));
      if (!os) throw CheckpointError("short write on checkpoint: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
      throw CheckpointError("cannot rename checkpoint into place: " + path);
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::string(magic, 8) != std::string(kMagic, 8))
      throw CheckpointError("not a checkpoint file: " + path);
    std::uint64_t jlen = 0;
    is.read(reinterpret_cast<char*>(&jlen), 8);
    std::string body(jlen, '\0');
    is.read(body.data(), static_cast<std::streamsize>(jlen));
    std::uint64_t count = 0;
    is.read(reinterpret_cast<char*>(&count), 8);
    if (!is) throw CheckpointError("truncated checkpoint header: " + path);

    Checkpoint ck;
    nlohmann::json header = nlohmann::json::parse(body);
    std::size_t expected = 0;
    for (auto& p : header.at("params")) {
      auto shape = p.at("shape").get<std::vector<std::size_t>>();
      if (p.at("offset").get<std::size_t>() != expected)
        throw CheckpointError("checkpoint parameter table is not contiguous: " + path);
      ck.names.emplace_back(p.at("name").get<std::string>(), shape);
      expected += shape_size(shape);
    }
    if (expected != count)
      throw CheckpointError("checkpoint value count does not match table: " + path);
    header.erase("params");
    ck.meta = std::move(header);
    ck.values.resize(count);
    is.read(reinterpret_cast<char*>(ck.values.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (!is || is.gcount() != static_cast<std::streamsize>(count * sizeof(double)))
      throw CheckpointError("truncated checkpoint value block: " + path);
    return ck;
  }
};

}  // namespace mcqa
