#pragma once

// Parameter checkpoints: a directory holding one raw little-endian float32 file
// per tensor and a text manifest with names, shapes and the architecture.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "dmcs/model.hpp"

namespace dmcs {

namespace fs = std::filesystem;

namespace detail {

inline std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
}

inline std::vector<int> parse_int_list(const std::string& s, char sep, const std::string& what) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, sep)) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw DataError("bad integer '" + tok + "' in " + what);
    }
  }
  return out;
}

}  // namespace detail

/// Inverse of ArchConfig::describe().
inline ArchConfig parse_arch(const std::string& text) {
  ArchConfig a;
  std::stringstream ss(text);
  std::string field;
  bool seen[6] = {};
  while (std::getline(ss, field, ';')) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw DataError("malformed architecture field '" + field + "'");
    const std::string key = field.substr(0, eq), val = field.substr(eq + 1);
    if (key == "K") {
      a.num_classes = detail::parse_int_list(val, ',', "K").at(0);
      seen[0] = true;
    } else if (key == "in") {
      a.input_channels = detail::parse_int_list(val, ',', "in").at(0);
      seen[1] = true;
    } else if (key == "trunk") {
      std::stringstream ts(val);
      std::string st;
      int i = 0;
      while (std::getline(ts, st, ',')) {
        const auto v = detail::parse_int_list(st, 'x', "trunk");
        if (i >= kSideOutputs || v.size() != 2) throw DataError("malformed trunk plan '" + val + "'");
        a.trunk_widths[i] = v[0];
        a.convs_per_stage[i] = v[1];
        ++i;
      }
      if (i != kSideOutputs) throw DataError("trunk plan needs 5 stages: '" + val + "'");
      seen[2] = true;
    } else if (key == "fc") {
      const auto v = detail::parse_int_list(val, 'k', "fc");
      if (v.size() != 2) throw DataError("malformed fc field '" + val + "'");
      a.fc_width = v[0];
      a.fc_kernel = v[1];
      seen[3] = true;
    } else if (key == "pad") {
      a.first_pad = detail::parse_int_list(val, ',', "pad").at(0);
      seen[4] = true;
    } else if (key == "fusion") {
      const auto slash = val.find('/');
      if (slash == std::string::npos) throw DataError("malformed fusion field '" + val + "'");
      const auto c = detail::parse_int_list(val.substr(0, slash), ',', "fusion");
      const auto f = detail::parse_int_list(val.substr(slash + 1), ',', "fusion");
      if (c.size() != 4 || f.size() != 2) throw DataError("malformed fusion field '" + val + "'");
      std::copy(c.begin(), c.end(), a.fusion_widths.begin());
      std::copy(f.begin(), f.end(), a.fusion_fc.begin());
      seen[5] = true;
    } else {
      throw DataError("unknown architecture field '" + key + "'");
    }
  }
  for (bool s : seen)
    if (!s) throw DataError("incomplete architecture description '" + text + "'");
  a.validate();
  return a;
}

struct CheckpointInfo {
  ArchConfig arch;
  std::string stage;  // last completed stage, or "init"
  int stage_index = -1;
  std::uint64_t seed = 0;
};

inline constexpr const char* kCheckpointManifest = "checkpoint.txt";

template <typename T>
void save_checkpoint(const fs::path& dir, const DmcsNet<T>& net, const CheckpointInfo& info) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
  std::ofstream man(dir / kCheckpointManifest);
  if (!man) throw DataError("cannot write checkpoint manifest in " + dir.string());
  man << "format dmcs-checkpoint 1\n";
  man << "arch " << net.arch().describe() << "\n";
  man << "arch_hash " << std::hex << std::setw(16) << std::setfill('0') << net.arch().hash() << std::dec << "\n";
  man << "stage " << info.stage << " " << info.stage_index << "\n";
  man << "seed " << info.seed << "\n";
  for (const auto& p : net.params()) {
    man << "tensor " << p.name << " ";
    for (std::size_t i = 0; i < p.shape.size(); ++i) man << (i ? "x" : "") << p.shape[i];
    man << " " << p.name << ".bin\n";
    std::ofstream out(dir / (p.name + ".bin"), std::ios::binary);
    if (!out) throw DataError("cannot write tensor " + p.name + " in " + dir.string());
    std::vector<std::uint32_t> raw(p.value.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
      const float f = static_cast<float>(p.value[i]);
      std::uint32_t u;
      std::memcpy(&u, &f, 4);
      raw[i] = detail::to_le(u);
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
    if (!out) throw DataError("failed writing tensor " + p.name);
  }
  man << "end\n";
  if (!man) throw DataError("failed writing checkpoint manifest in " + dir.string());
}

/// Reads the manifest only.
inline CheckpointInfo read_checkpoint_info(const fs::path& dir) {
  std::ifstream man(dir / kCheckpointManifest);
  if (!man) throw DataError("no checkpoint at " + dir.string());
  CheckpointInfo info;
  std::string line, hash;
  bool complete = false, have_arch = false;
  while (std::getline(man, line)) {
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "arch") {
      std::string text;
      ls >> text;
      info.arch = parse_arch(text);
      have_arch = true;
    } else if (key == "arch_hash") {
      ls >> hash;
    } else if (key == "stage") {
      ls >> info.stage >> info.stage_index;
    } else if (key == "seed") {
      ls >> info.seed;
    } else if (key == "end") {
      complete = true;
    }
  }
  if (!complete || !have_arch) throw DataError("incomplete checkpoint at " + dir.string());
  std::ostringstream expect;
  expect << std::hex << std::setw(16) << std::setfill('0') << info.arch.hash();
  if (hash != expect.str()) throw DataError("checkpoint architecture hash mismatch at " + dir.string());
  return info;
}

inline bool is_checkpoint(const fs::path& dir) {
  try {
    read_checkpoint_info(dir);
    return true;
  } catch (const DataError&) {
    return false;
  }
}

/// Loads values into an existing network; the architecture must match exactly.
template <typename T>
CheckpointInfo load_checkpoint(const fs::path& dir, DmcsNet<T>& net) {
  const auto info = read_checkpoint_info(dir);
  if (info.arch.hash() != net.arch().hash())
    throw DataError("checkpoint architecture " + info.arch.describe() + " does not match network " +
                    net.arch().describe());
  std::ifstream man(dir / kCheckpointManifest);
  std::string line;
  std::size_t loaded = 0;
  while (std::getline(man, line)) {
    std::istringstream ls(line);
    std::string key, name, shape, file;
    ls >> key;
    if (key != "tensor") continue;
    ls >> name >> shape >> file;
    const int idx = net.params().find(name);
    if (idx < 0) throw DataError("checkpoint tensor '" + name + "' is not part of the network");
    auto& p = net.params()[idx];
    const auto dims = detail::parse_int_list(shape, 'x', "shape of " + name);
    if (dims != p.shape) throw ShapeError("checkpoint tensor '" + name + "' has shape " + shape);
    std::ifstream in(dir / file, std::ios::binary);
    if (!in) throw DataError("missing tensor file " + (dir / file).string());
    std::vector<std::uint32_t> raw(p.value.size());
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
    if (in.gcount() != static_cast<std::streamsize>(raw.size() * 4) || in.peek() != EOF)
      throw DataError("tensor file " + file + " has the wrong size");
    for (std::size_t i = 0; i < raw.size(); ++i) {
      const std::uint32_t u = detail::to_le(raw[i]);
      float f;
      std::memcpy(&f, &u, 4);
      p.value[i] = static_cast<T>(f);
    }
    ++loaded;
  }
  if (loaded != net.params().size())
    throw DataError("checkpoint at " + dir.string() + " holds " + std::to_string(loaded) + " of " +
                    std::to_string(net.params().size()) + " tensors");
  return info;
}

/// Builds a network from the checkpoint's own architecture.
template <typename T>
DmcsNet<T> open_checkpoint(const fs::path& dir, CheckpointInfo* info_out = nullptr) {
  const auto info = read_checkpoint_info(dir);
  DmcsNet<T> net(info.arch, 0);
  load_checkpoint(dir, net);
  if (info_out) *info_out = info;
  return net;
}

}  // namespace dmcs
