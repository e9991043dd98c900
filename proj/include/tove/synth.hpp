// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cstring>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "tove/error.hpp"
#include "tove/random.hpp"
#include "tove/tensor.hpp"

namespace tove {

// Procedural scenes on a 4x4 cell grid over a 32x32 canvas. Each occupied
// cell carries a color (visible to the base encoder) and exactly one expert
// attribute family whose value is visible only through that expert's source
// channel. The family itself is base-visible as a value-free paint pattern,
// so routing can specialize while attribute values stay causally hidden.

enum class Family : std::uint8_t { Shape = 0, Texture = 1, Depth = 2, Edge = 3 };

struct SynthSpec {
  static constexpr int kGridCells = 4;     // 4x4 object slots
  static constexpr int kCanvas = 32;       // pixels per side
  static constexpr int kCellPx = 8;        // pixels per cell side
  static constexpr int kColors = 6;
  static constexpr int kShapes = 5;
  static constexpr int kTextures = 5;
  static constexpr int kMaxOccupied = 4;
  static constexpr int kEmbedGrid = 6;     // native grid of embedding experts
  static constexpr int kEmbedDim = 12;     // native token dim of embedding experts
  // Family sampling weights: deliberately uneven so expert contributions
  // separate and detachment order is meaningful.
  static constexpr std::array<double, 4> kFamilyWeights = {0.4, 0.3, 0.2, 0.1};
};

struct SceneCell {
  int row = 0, col = 0;     // cell coordinates in [0, 4)
  int color = 0;            // [0, kColors)
  Family family = Family::Shape;
  int value = 0;            // shape/texture id; boundary flag for Edge; near(0)/far(1) for Depth
  double depth_z = 0.0;     // continuous depth in (0,1); every occupied cell has one
  bool boundary = false;    // rendered into the edge channel (Edge family only)
};

struct Scene {
  std::vector<SceneCell> cells;  // raster order, 1..4 entries

  /// Depth ranks (0 = nearest) over occupied cells, derived from depth_z.
  std::vector<int> depth_ranks() const {
    std::vector<int> order(cells.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return cells[a].depth_z < cells[b].depth_z; });
    std::vector<int> rank(cells.size());
    for (std::size_t i = 0; i < order.size(); ++i) rank[order[i]] = static_cast<int>(i);
    return rank;
  }

  std::string canonical() const {
    std::string s;
    for (const SceneCell& c : cells) {
      s += std::to_string(c.row) + "," + std::to_string(c.col) + "," + std::to_string(c.color) +
           "," + std::to_string(static_cast<int>(c.family)) + "," + std::to_string(c.value) + "," +
           std::to_string(c.boundary ? 1 : 0) + ",";
      std::uint64_t bits;
      std::memcpy(&bits, &c.depth_z, sizeof(bits));
      s += std::to_string(bits) + ";";
    }
    return s;
  }
};

// ----- vocabulary ----------------------------------------------------------

struct Vocab {
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kTask = 3;
  static constexpr int kColor0 = 4;                       // 6 colors
  static constexpr int kShape0 = kColor0 + SynthSpec::kColors;    // 5 shapes
  static constexpr int kTexture0 = kShape0 + SynthSpec::kShapes;  // 5 textures
  static constexpr int kNear = kTexture0 + SynthSpec::kTextures;
  static constexpr int kFar = kNear + 1;
  static constexpr int kBorder = kFar + 1;
  static constexpr int kNoBorder = kBorder + 1;
  static constexpr int kNearerFirst = kNoBorder + 1;
  static constexpr int kNearerLast = kNearerFirst + 1;
  static constexpr int kUsed = kNearerLast + 1;

  /// Attribute family of a token id, or -1 for anything else. Relation
  /// tokens count toward the depth family (they encode depth ordering).
  static int family_of(int id) {
    if (id >= kShape0 && id < kTexture0) return static_cast<int>(Family::Shape);
    if (id >= kTexture0 && id < kNear) return static_cast<int>(Family::Texture);
    if (id == kNear || id == kFar) return static_cast<int>(Family::Depth);
    if (id == kBorder || id == kNoBorder) return static_cast<int>(Family::Edge);
    if (id == kNearerFirst || id == kNearerLast) return static_cast<int>(Family::Depth);
    return -1;
  }

  static bool is_color(int id) { return id >= kColor0 && id < kShape0; }
  static bool is_expert_attribute(int id) { return family_of(id) >= 0; }
  static bool is_relation(int id) { return id == kNearerFirst || id == kNearerLast; }

  static std::string name(int id) {
    if (id == kPad) return "<pad>";
    if (id == kBos) return "<bos>";
    if (id == kEos) return "<eos>";
    if (id == kTask) return "<describe>";
    if (is_color(id)) return "color" + std::to_string(id - kColor0);
    if (id >= kShape0 && id < kTexture0) return "shape" + std::to_string(id - kShape0);
    if (id >= kTexture0 && id < kNear) return "texture" + std::to_string(id - kTexture0);
    if (id == kNear) return "near";
    if (id == kFar) return "far";
    if (id == kBorder) return "border";
    if (id == kNoBorder) return "noborder";
    if (id == kNearerFirst) return "nearer-first";
    if (id == kNearerLast) return "nearer-last";
    return "tok" + std::to_string(id);
  }
};

// ----- caption grammar -------------------------------------------------------

/// Deterministic caption for a scene: per occupied cell in raster order a
/// (color, attribute-value) token pair, then one relation token comparing the
/// depth of the first and last occupied cells (scenes with >= 2 cells).
struct CaptionGrammar {
  int vocab_size = 64;

  std::vector<int> encode(const Scene& scene) const {
    std::vector<int> ids;
    for (const SceneCell& c : scene.cells) {
      ids.push_back(Vocab::kColor0 + c.color);
      switch (c.family) {
        case Family::Shape: ids.push_back(Vocab::kShape0 + c.value); break;
        case Family::Texture: ids.push_back(Vocab::kTexture0 + c.value); break;
        case Family::Depth: ids.push_back(c.depth_z < 0.5 ? Vocab::kNear : Vocab::kFar); break;
        case Family::Edge: ids.push_back(c.boundary ? Vocab::kBorder : Vocab::kNoBorder); break;
      }
    }
    if (scene.cells.size() >= 2) {
      const double zf = scene.cells.front().depth_z;
      const double zl = scene.cells.back().depth_z;
      ids.push_back(zf < zl ? Vocab::kNearerFirst : Vocab::kNearerLast);
    }
    return ids;
  }

  struct ParsedCell {
    int color = -1;
    Family family = Family::Shape;
    int value = -1;
  };
  struct Parsed {
    std::vector<ParsedCell> cells;
    int relation = -1;  // kNearerFirst / kNearerLast, or -1 when absent
  };

  /// Inverse of encode; throws on malformed captions.
  Parsed parse(const std::vector<int>& ids) const {
    Parsed out;
    std::size_t i = 0;
    while (i < ids.size()) {
      if (Vocab::is_relation(ids[i])) {
        TOVE_CHECK(i + 1 == ids.size(), "grammar: relation token must be last");
        out.relation = ids[i];
        ++i;
        continue;
      }
      TOVE_CHECK(Vocab::is_color(ids[i]), "grammar: expected color token");
      TOVE_CHECK(i + 1 < ids.size(), "grammar: dangling color token");
      ParsedCell cell;
      cell.color = ids[i] - Vocab::kColor0;
      const int v = ids[i + 1];
      const int fam = Vocab::family_of(v);
      TOVE_CHECK(fam >= 0 && !Vocab::is_relation(v), "grammar: expected attribute token");
      cell.family = static_cast<Family>(fam);
      switch (cell.family) {
        case Family::Shape: cell.value = v - Vocab::kShape0; break;
        case Family::Texture: cell.value = v - Vocab::kTexture0; break;
        case Family::Depth: cell.value = (v == Vocab::kNear) ? 0 : 1; break;
        case Family::Edge: cell.value = (v == Vocab::kBorder) ? 1 : 0; break;
      }
      out.cells.push_back(cell);
      i += 2;
    }
    return out;
  }
};

// ----- scene generation --------------------------------------------------------

inline Family sample_family(RandomSource& rng) {
  const double u = rng.uniform01();
  double acc = 0.0;
  for (std::size_t f = 0; f < SynthSpec::kFamilyWeights.size(); ++f) {
    acc += SynthSpec::kFamilyWeights[f];
    if (u < acc) return static_cast<Family>(f);
  }
  return Family::Edge;
}

inline Scene generate_scene(RandomSource& rng) {
  Scene scene;
  const int m = 1 + static_cast<int>(rng.below(SynthSpec::kMaxOccupied));
  std::vector<int> slots(SynthSpec::kGridCells * SynthSpec::kGridCells);
  for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = static_cast<int>(i);
  rng.shuffle(slots);
  slots.resize(m);
  std::sort(slots.begin(), slots.end());  // raster order
  for (int s : slots) {
    SceneCell c;
    c.row = s / SynthSpec::kGridCells;
    c.col = s % SynthSpec::kGridCells;
    c.color = static_cast<int>(rng.below(SynthSpec::kColors));
    c.family = sample_family(rng);
    c.depth_z = rng.uniform01();
    switch (c.family) {
      case Family::Shape: c.value = static_cast<int>(rng.below(SynthSpec::kShapes)); break;
      case Family::Texture: c.value = static_cast<int>(rng.below(SynthSpec::kTextures)); break;
      case Family::Depth: c.value = c.depth_z < 0.5 ? 0 : 1; break;
      case Family::Edge:
        c.boundary = rng.below(2) == 1;
        c.value = c.boundary ? 1 : 0;
        break;
    }
    scene.cells.push_back(c);
  }
  return scene;
}

// ----- rendering ------------------------------------------------------------------

struct RenderedSample {
  Tensor base;          // [32 x 32 x 3], color + family pattern only
  Tensor depth_map;     // [32 x 32 x 1], 0.5 + z on occupied cells
  Tensor edge_map;      // [32 x 32 x 1], 1 on boundary rings
  Tensor shape_grid;    // [36 x 12], native tokens of the shape expert
  Tensor texture_grid;  // [36 x 12]
  std::vector<int> caption;
};

inline const std::array<std::array<double, 3>, SynthSpec::kColors>& color_table() {
  static const std::array<std::array<double, 3>, SynthSpec::kColors> table = {{
      {1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}, {1, 0, 1}, {0, 1, 1},
  }};
  return table;
}

/// Value-free paint mask per family over the 8x8 cell block. The pattern
/// reveals which attribute family a cell carries (so routing has something
/// to key on) but nothing about the attribute's value.
inline bool family_pattern(Family f, int y, int x) {
  switch (f) {
    case Family::Shape: return true;                                     // solid
    case Family::Texture: return (x % 4) < 2;                            // stripes
    case Family::Depth: return y >= 1 && y <= 6 && x >= 1 && x <= 6;     // inset block
    case Family::Edge: return y == 0 || y == 7 || x == 0 || x == 7;      // ring
  }
  return false;
}

inline RenderedSample render(const Scene& scene, const CaptionGrammar& grammar) {
  RenderedSample s;
  s.base = zeros({32, 32, 3});
  s.depth_map = zeros({32, 32, 1});
  s.edge_map = zeros({32, 32, 1});
  s.shape_grid = zeros({36, 12});
  s.texture_grid = zeros({36, 12});

  for (const SceneCell& c : scene.cells) {
    const auto& rgb = color_table()[static_cast<std::size_t>(c.color)];
    const int oy = c.row * SynthSpec::kCellPx, ox = c.col * SynthSpec::kCellPx;
    for (int y = 0; y < SynthSpec::kCellPx; ++y)
      for (int x = 0; x < SynthSpec::kCellPx; ++x) {
        const std::size_t px = static_cast<std::size_t>((oy + y) * 32 + (ox + x));
        if (family_pattern(c.family, y, x))
          for (int ch = 0; ch < 3; ++ch) s.base.data[px * 3 + ch] = rgb[static_cast<std::size_t>(ch)];
        s.depth_map.data[px] = 0.5 + c.depth_z;
        if (c.boundary && (y == 0 || y == 7 || x == 0 || x == 7)) s.edge_map.data[px] = 1.0;
      }
  }

  // Embedding experts emit one token per native 6x6 grid cell: the one-hot
  // attribute value of the scene cell under the token's center, plus an
  // occupancy marker in the last channel.
  const int g = SynthSpec::kEmbedGrid;
  for (int gy = 0; gy < g; ++gy)
    for (int gx = 0; gx < g; ++gx) {
      const double cy = (gy + 0.5) * 32.0 / g;
      const double cx = (gx + 0.5) * 32.0 / g;
      const int row = static_cast<int>(cy) / SynthSpec::kCellPx;
      const int col = static_cast<int>(cx) / SynthSpec::kCellPx;
      for (const SceneCell& c : scene.cells) {
        if (c.row != row || c.col != col) continue;
        const std::size_t tok = static_cast<std::size_t>(gy * g + gx);
        if (c.family == Family::Shape) {
          s.shape_grid.data[tok * 12 + static_cast<std::size_t>(c.value)] = 1.0;
          s.shape_grid.data[tok * 12 + 11] = 1.0;
        } else if (c.family == Family::Texture) {
          s.texture_grid.data[tok * 12 + static_cast<std::size_t>(c.value)] = 1.0;
          s.texture_grid.data[tok * 12 + 11] = 1.0;
        }
      }
    }

  s.caption = grammar.encode(scene);
  return s;
}

// ----- splits --------------------------------------------------------------------

enum class HoldoutRule { None, NovelComposition };

struct DatasetSplits {
  std::vector<Scene> train, val;
  std::vector<std::pair<int, int>> holdout_pairs;  // (color, shape)
};

/// Held-out (color, shape) combinations; count must stay at or below half of
/// the combination space.
inline std::vector<std::pair<int, int>> choose_holdout_pairs(RandomSource& rng, int count) {
  const int space = SynthSpec::kColors * SynthSpec::kShapes;
  TOVE_CHECK(count >= 0 && count * 2 <= space,
             "holdout combinations exceed 50% of the combination space");
  std::vector<int> all(static_cast<std::size_t>(space));
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
  rng.shuffle(all);
  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < count; ++i)
    pairs.emplace_back(all[static_cast<std::size_t>(i)] / SynthSpec::kShapes,
                       all[static_cast<std::size_t>(i)] % SynthSpec::kShapes);
  return pairs;
}

inline bool scene_has_holdout_pair(const Scene& s, const std::vector<std::pair<int, int>>& pairs) {
  for (const SceneCell& c : s.cells) {
    if (c.family != Family::Shape) continue;
    for (const auto& p : pairs)
      if (c.color == p.first && c.value == p.second) return true;
  }
  return false;
}

/// Train/val split generation. Under the novel-composition rule, train never
/// contains a held-out (color, shape) pair and every shape cell in val is
/// redrawn onto a held-out pair, so val contains only novel combinations.
inline DatasetSplits make_splits(RandomSource& rng, std::size_t n_train, std::size_t n_val,
                                 HoldoutRule rule, int holdout_count = 6) {
  DatasetSplits out;
  if (rule == HoldoutRule::NovelComposition) {
    RandomSource hr = rng.child(2);
    out.holdout_pairs = choose_holdout_pairs(hr, holdout_count);
  }
  std::set<std::string> seen;
  RandomSource train_rng = rng.child(0);
  while (out.train.size() < n_train) {
    Scene s = generate_scene(train_rng);
    if (rule == HoldoutRule::NovelComposition && scene_has_holdout_pair(s, out.holdout_pairs))
      continue;
    if (!seen.insert(s.canonical()).second) continue;
    out.train.push_back(std::move(s));
  }
  RandomSource val_rng = rng.child(1);
  while (out.val.size() < n_val) {
    Scene s = generate_scene(val_rng);
    if (rule == HoldoutRule::NovelComposition) {
      for (SceneCell& c : s.cells) {
        if (c.family != Family::Shape) continue;
        const auto& p = out.holdout_pairs[val_rng.below(out.holdout_pairs.size())];
        c.color = p.first;
        c.value = p.second;
      }
    }
    if (!seen.insert(s.canonical()).second) continue;
    out.val.push_back(std::move(s));
  }
  return out;
}

}  // namespace tove
