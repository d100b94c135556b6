#pragma once

// The 16 pixel orderings (8 raster, 8 zigzag) and their materializations:
// kernel masks + shifts for convolutions, HW x HW masks for attention, rank
// reversal ("opposite") lookup, and ordering-pair sampling strategies.
//
// Id scheme (fixed for reproducibility): 1-4 row-major raster, 5-8
// column-major raster, 9-12 row-major zigzag, 13-16 column-major zigzag; each
// group of four enumerates (primary_dir, secondary_dir) in (forward, reverse)
// lexicographic order.

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "arseg/conv.hpp"
#include "arseg/rng.hpp"
#include "arseg/tensor.hpp"

namespace arseg::orderings {

enum class Kind { raster, zigzag };
enum class Axis { row_major, column_major };
enum class Dir { forward, reverse };

struct Ordering {
  int id = 0;
  Kind kind = Kind::raster;
  Axis axis = Axis::row_major;
  Dir primary = Dir::forward;    // traversal of lines
  Dir secondary = Dir::forward;  // traversal within a line (zigzag: starting direction)

  std::string name() const {
    std::string s = "o" + std::to_string(id) + " ";
    s += (kind == Kind::raster) ? "raster " : "zigzag ";
    if (axis == Axis::row_major) {
      s += (primary == Dir::forward) ? "rows top->bottom" : "rows bottom->top";
      s += (secondary == Dir::forward) ? ", left->right" : ", right->left";
    } else {
      s += (primary == Dir::forward) ? "cols left->right" : "cols right->left";
      s += (secondary == Dir::forward) ? ", top->bottom" : ", bottom->top";
    }
    return s;
  }
};

inline const std::array<Ordering, 16>& all_orderings() {
  static const std::array<Ordering, 16> table = [] {
    std::array<Ordering, 16> t{};
    int id = 1;
    for (Kind k : {Kind::raster, Kind::zigzag})
      for (Axis ax : {Axis::row_major, Axis::column_major})
        for (Dir p : {Dir::forward, Dir::reverse})
          for (Dir s : {Dir::forward, Dir::reverse}) {
            t[id - 1] = Ordering{id, k, ax, p, s};
            ++id;
          }
    return t;
  }();
  return table;
}

inline const Ordering& ordering_by_id(int id) {
  ARSG_CHECK_CFG(id >= 1 && id <= 16, "ordering id must be in 1..16, got ", id);
  return all_orderings()[id - 1];
}

// Rank of pixel (i, j) under ordering o on an H x W grid. Line-major: every
// position on an earlier line ranks strictly before everything on the current
// line, which is what makes the conservative line plan sound for zigzag.
inline int64_t rank_of(const Ordering& o, int i, int j, int H, int W) {
  ARSG_CHECK_DIM(i >= 0 && i < H && j >= 0 && j < W, "rank_of: position (", i, ",", j,
                 ") outside ", H, "x", W);
  int line, pos, line_len;
  if (o.axis == Axis::row_major) {
    line = (o.primary == Dir::forward) ? i : H - 1 - i;
    pos = (o.secondary == Dir::forward) ? j : W - 1 - j;
    line_len = W;
  } else {
    line = (o.primary == Dir::forward) ? j : W - 1 - j;
    pos = (o.secondary == Dir::forward) ? i : H - 1 - i;
    line_len = H;
  }
  if (o.kind == Kind::zigzag && (line % 2) == 1) pos = line_len - 1 - pos;
  return static_cast<int64_t>(line) * line_len + pos;
}

// Full rank table indexed by row-major pixel index: ranks[i*W + j].
inline std::vector<int> position_rank(const Ordering& o, int H, int W) {
  ARSG_CHECK_DIM(H >= 1 && W >= 1, "position_rank: H, W must be >= 1");
  std::vector<int> ranks(static_cast<size_t>(H) * W);
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j)
      ranks[static_cast<size_t>(i) * W + j] = static_cast<int>(rank_of(o, i, j, H, W));
  return ranks;
}

// ---------------------------------------------------------------------------
// Kernel masks + shifts.
// ---------------------------------------------------------------------------
struct KernelMask {
  int F = 0;
  std::vector<uint8_t> mask;  // F*F, true = weight active
  core::Shift shift_direction = core::Shift::down;
  int shift_amount = 0;

  bool active(int a, int b) const { return mask[static_cast<size_t>(a) * F + b] != 0; }
  int false_count() const {
    int n = 0;
    for (uint8_t v : mask) n += (v == 0);
    return n;
  }
};

namespace detail {
inline KernelMask plan_base(const Ordering& o, int F) {
  ARSG_CHECK_CFG(F >= 1 && F % 2 == 1, "conv plan: F must be odd and positive, got ", F);
  KernelMask km;
  km.F = F;
  km.mask.assign(static_cast<size_t>(F) * F, 1);
  km.shift_amount = F / 2;
  if (o.axis == Axis::row_major)
    km.shift_direction = (o.primary == Dir::forward) ? core::Shift::down : core::Shift::up;
  else
    km.shift_direction = (o.primary == Dir::forward) ? core::Shift::right : core::Shift::left;
  return km;
}
// Index of the kernel line that lands on the current input line after the
// shift: the trailing line in the primary direction.
inline int current_line_index(const Ordering& o, int F) {
  return (o.primary == Dir::forward) ? F - 1 : 0;
}
}  // namespace detail

// Raster plan: shift content by floor(F/2) along the primary scan direction;
// in the current-line kernel line, deactivate the floor(F/2) weights strictly
// beyond the center in the secondary scan direction. The center tap stays
// active (relaxed masks: current-pixel access allowed).
inline KernelMask raster_conv_plan(const Ordering& o, int F) {
  ARSG_CHECK_CFG(o.kind == Kind::raster,
                 "raster_conv_plan: ordering ", o.id, " is zigzag (attention-only)");
  KernelMask km = detail::plan_base(o, F);
  int k = F / 2;
  int line = detail::current_line_index(o, F);
  for (int t = 0; t < F; ++t) {
    bool beyond = (o.secondary == Dir::forward) ? (t > k) : (t < k);
    if (!beyond) continue;
    if (o.axis == Axis::row_major)
      km.mask[static_cast<size_t>(line) * F + t] = 0;  // line is a kernel row
    else
      km.mask[static_cast<size_t>(t) * F + line] = 0;  // line is a kernel column
  }
  return km;
}

// Conservative plan, sound for any ordering (used for zigzag conv layers,
// where within-line neighbors alternate between past and future by line
// parity): same shift, current-line kernel line deactivated except the
// center tap. Masks 2*floor(F/2) weights instead of floor(F/2).
inline KernelMask line_conv_plan(const Ordering& o, int F) {
  KernelMask km = detail::plan_base(o, F);
  int k = F / 2;
  int line = detail::current_line_index(o, F);
  for (int t = 0; t < F; ++t) {
    if (t == k) continue;
    if (o.axis == Axis::row_major)
      km.mask[static_cast<size_t>(line) * F + t] = 0;
    else
      km.mask[static_cast<size_t>(t) * F + line] = 0;
  }
  return km;
}

// Plan used by the model's masked conv layers for a given ordering.
inline KernelMask conv_plan(const Ordering& o, int F) {
  return (o.kind == Kind::raster) ? raster_conv_plan(o, F) : line_conv_plan(o, F);
}

// ---------------------------------------------------------------------------
// Attention masks.
// ---------------------------------------------------------------------------
struct AttentionMask {
  int ordering_id = 0;
  int H = 0, W = 0;
  std::vector<uint8_t> allowed;  // HW x HW, allowed[l*HW + m]

  bool at(int l, int m) const {
    return allowed[static_cast<size_t>(l) * H * W + m] != 0;
  }
};

inline AttentionMask attention_mask(const Ordering& o, int H, int W) {
  std::vector<int> ranks = position_rank(o, H, W);
  int hw = H * W;
  AttentionMask am;
  am.ordering_id = o.id;
  am.H = H;
  am.W = W;
  am.allowed.assign(static_cast<size_t>(hw) * hw, 0);
  for (int l = 0; l < hw; ++l)
    for (int m = 0; m < hw; ++m)
      am.allowed[static_cast<size_t>(l) * hw + m] = (ranks[m] <= ranks[l]) ? 1 : 0;
  return am;
}

// Additive form: 0 where allowed, -1e9 where disallowed (applied to logits
// before softmax).
template <typename T>
std::vector<T> additive_mask(const AttentionMask& am) {
  std::vector<T> add(am.allowed.size());
  for (size_t i = 0; i < am.allowed.size(); ++i) add[i] = am.allowed[i] ? T(0) : T(-1e9);
  return add;
}

// ---------------------------------------------------------------------------
// Opposites and pair sampling.
// ---------------------------------------------------------------------------

// Id of the ordering whose rank is the exact reversal of o's on an H x W
// grid. Found by enumeration -- for zigzag the partner depends on grid parity.
inline int opposite_of(const Ordering& o, int H, int W) {
  std::vector<int> ranks = position_rank(o, H, W);
  int hw = H * W;
  for (const Ordering& c : all_orderings()) {
    if (c.kind != o.kind) continue;
    std::vector<int> cr = position_rank(c, H, W);
    bool match = true;
    for (int p = 0; p < hw && match; ++p) match = (cr[p] == hw - 1 - ranks[p]);
    if (match) return c.id;
  }
  throw ContractError(cat("opposite_of: no rank-reversal partner for ordering ", o.id,
                                " on ", H, "x", W));
}

enum class PairStrategy { random, no_repetition, hard };

inline const char* pair_strategy_name(PairStrategy s) {
  switch (s) {
    case PairStrategy::random: return "random";
    case PairStrategy::no_repetition: return "no_repetition";
    default: return "hard";
  }
}

inline PairStrategy pair_strategy_from_string(const std::string& s) {
  if (s == "random") return PairStrategy::random;
  if (s == "no_repetition") return PairStrategy::no_repetition;
  if (s == "hard") return PairStrategy::hard;
  throw ConfigError(cat("unknown sampling strategy '", s,
                              "' (expected random | no_repetition | hard)"));
}

inline std::pair<Ordering, Ordering> sample_pair(PairStrategy strategy,
                                                 const std::vector<Ordering>& pool,
                                                 core::Rng& rng, int H, int W) {
  ARSG_CHECK_CFG(!pool.empty(), "sample_pair: empty ordering pool");
  switch (strategy) {
    case PairStrategy::random: {
      const Ordering& a = pool[rng.uniform_int(pool.size())];
      const Ordering& b = pool[rng.uniform_int(pool.size())];
      return {a, b};
    }
    case PairStrategy::no_repetition: {
      ARSG_CHECK_CFG(pool.size() >= 2, "sample_pair: no_repetition needs >= 2 orderings");
      size_t i = rng.uniform_int(pool.size());
      size_t j = rng.uniform_int(pool.size() - 1);
      if (j >= i) ++j;
      return {pool[i], pool[j]};
    }
    case PairStrategy::hard: {
      std::vector<std::pair<const Ordering*, const Ordering*>> pairs;
      for (const Ordering& o : pool) {
        int opp = opposite_of(o, H, W);
        for (const Ordering& c : pool)
          if (c.id == opp) pairs.emplace_back(&o, &c);
      }
      if (pairs.empty())
        throw ConfigError("sample_pair: hard strategy requires an opposite pair in the pool");
      auto& pr = pairs[rng.uniform_int(pairs.size())];
      return {*pr.first, *pr.second};
    }
  }
  throw ConfigError("sample_pair: unknown strategy");
}

// Convenience: orderings 1..8 (the raster family), the default training pool.
inline std::vector<Ordering> raster_pool() {
  std::vector<Ordering> v;
  for (int id = 1; id <= 8; ++id) v.push_back(ordering_by_id(id));
  return v;
}
inline std::vector<Ordering> full_pool() {
  std::vector<Ordering> v;
  for (int id = 1; id <= 16; ++id) v.push_back(ordering_by_id(id));
  return v;
}

}  // namespace arseg::orderings
