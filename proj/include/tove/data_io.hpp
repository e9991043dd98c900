// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "tove/error.hpp"
#include "tove/synth.hpp"

namespace tove {

/// Dataset file: text header (counts, grammar table, provenance), then binary
/// little-endian records (scene spec + caption ids). Files are a cache: the
/// same content regenerates from the header's seed.
struct DatasetFile {
  std::string split;  // "train" / "val"
  std::uint64_t seed = 0;
  int vocab = 64;
  std::vector<std::pair<int, int>> holdout_pairs;
  std::vector<Scene> scenes;
};

inline void save_dataset(const DatasetFile& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw io_error("cannot open dataset for writing: " + path);
  CaptionGrammar grammar;
  os << "TOVE-DATA v1\n";
  os << "split " << ds.split << "\n";
  os << "samples " << ds.scenes.size() << "\n";
  os << "vocab " << ds.vocab << "\n";
  os << "seed " << ds.seed << "\n";
  os << "holdout";
  for (const auto& [c, s] : ds.holdout_pairs) os << " " << c << ":" << s;
  os << "\n";
  for (int id = 0; id < Vocab::kUsed; ++id) os << "token " << id << " " << Vocab::name(id) << "\n";
  os << "end-header\n";
  for (const Scene& sc : ds.scenes) {
    const std::uint8_t m = static_cast<std::uint8_t>(sc.cells.size());
    os.write(reinterpret_cast<const char*>(&m), 1);
    for (const SceneCell& c : sc.cells) {
      const std::uint8_t fields[6] = {
          static_cast<std::uint8_t>(c.row),    static_cast<std::uint8_t>(c.col),
          static_cast<std::uint8_t>(c.color),  static_cast<std::uint8_t>(c.family),
          static_cast<std::uint8_t>(c.value),  static_cast<std::uint8_t>(c.boundary ? 1 : 0)};
      os.write(reinterpret_cast<const char*>(fields), 6);
      os.write(reinterpret_cast<const char*>(&c.depth_z), sizeof(double));
    }
    const std::vector<int> caption = grammar.encode(sc);
    const std::uint8_t len = static_cast<std::uint8_t>(caption.size());
    os.write(reinterpret_cast<const char*>(&len), 1);
    for (int id : caption) {
      const std::uint8_t b = static_cast<std::uint8_t>(id);
      os.write(reinterpret_cast<const char*>(&b), 1);
    }
  }
  if (!os) throw io_error("dataset write failed: " + path);
}

inline DatasetFile load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw io_error("cannot open dataset: " + path);
  DatasetFile ds;
  std::string line;
  std::size_t samples = 0;
  if (!std::getline(is, line) || line != "TOVE-DATA v1") throw io_error("bad dataset header: " + path);
  while (std::getline(is, line)) {
    if (line == "end-header") break;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "split") ls >> ds.split;
    else if (key == "samples") ls >> samples;
    else if (key == "vocab") ls >> ds.vocab;
    else if (key == "seed") ls >> ds.seed;
    else if (key == "holdout") {
      std::string pair;
      while (ls >> pair) {
        const auto colon = pair.find(':');
        if (colon == std::string::npos) throw io_error("bad holdout pair in dataset header");
        ds.holdout_pairs.emplace_back(std::stoi(pair.substr(0, colon)), std::stoi(pair.substr(colon + 1)));
      }
    } else if (key == "token") {
      // grammar table is informational; ids are pinned by the vocabulary
    } else {
      throw io_error("unknown dataset header key: " + key);
    }
  }
  CaptionGrammar grammar;
  for (std::size_t i = 0; i < samples; ++i) {
    std::uint8_t m = 0;
    is.read(reinterpret_cast<char*>(&m), 1);
    if (!is || m < 1 || m > SynthSpec::kMaxOccupied) throw io_error("corrupt dataset record");
    Scene sc;
    for (std::uint8_t c = 0; c < m; ++c) {
      std::uint8_t fields[6];
      is.read(reinterpret_cast<char*>(fields), 6);
      SceneCell cell;
      cell.row = fields[0];
      cell.col = fields[1];
      cell.color = fields[2];
      cell.family = static_cast<Family>(fields[3]);
      cell.value = fields[4];
      cell.boundary = fields[5] != 0;
      is.read(reinterpret_cast<char*>(&cell.depth_z), sizeof(double));
      if (!is) throw io_error("corrupt dataset record");
      sc.cells.push_back(cell);
    }
    std::uint8_t len = 0;
    is.read(reinterpret_cast<char*>(&len), 1);
    std::vector<int> caption(len);
    for (std::uint8_t c = 0; c < len; ++c) {
      std::uint8_t b = 0;
      is.read(reinterpret_cast<char*>(&b), 1);
      caption[c] = b;
    }
    if (!is) throw io_error("corrupt dataset record");
    // stored caption must match the grammar (defends against stale caches)
    if (caption != grammar.encode(sc)) throw io_error("dataset caption does not match its scene");
    ds.scenes.push_back(std::move(sc));
  }
  return ds;
}

}  // namespace tove
