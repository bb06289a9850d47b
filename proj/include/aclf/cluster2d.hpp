#pragma once

#include <vector>

#include "aclf/cluster1d.hpp"
#include "aclf/tensor.hpp"

// 2-D clustering over a grid feature map, factorized into independent
// horizontal and vertical chains. The probability that a rectangle forms one
// cluster is the product of the 1-D chain along its top-most row and the
// 1-D chain along its left-most column; only those chains are materialized,
// which is what keeps the build at O(H^2 + W^2) merge calls instead of the
// exhaustive O(H^2 W^2) table.

namespace aclf {

struct DirectionalScorers {
  MergeScorer horizontal;
  MergeScorer vertical;

  static DirectionalScorers init(std::size_t d, SplitMix64& rng) {
    DirectionalScorers s;
    s.horizontal = MergeScorer::init(d, rng);
    s.vertical = MergeScorer::init(d, rng);
    return s;
  }
};

// Cumulative log-probability table for one line of cells. cell(a, e) holds
// the sum of merge conditionals anchored at a through e; the empty chain
// (a == e) is implicit zero.
struct ChainTable {
  std::size_t len = 0;
  std::vector<Tensor> cells;  // packed strict upper triangle

  int cell_index(std::size_t a, std::size_t e) const {
    if (a == e) return -1;
    return static_cast<int>(detail::upper_index(a, e, len));
  }
  const Tensor& cell(std::size_t a, std::size_t e) const {
    return cells[detail::upper_index(a, e, len)];
  }
};

inline ChainTable directional_chain(Tape& tape, const MergeScorer& scorer,
                                    const Tensor& line) {
  detail::require_matrix(line, "directional_chain");
  const std::size_t len = line.shape()[0];
  detail::require(len >= 1, "directional_chain: empty line");
  ChainTable table;
  table.len = len;
  table.cells.reserve(len * (len - 1) / 2);
  for (std::size_t a = 0; a < len; ++a) {
    Tensor running;
    for (std::size_t e = a + 1; e < len; ++e) {
      Tensor lp = merge_log_probability(tape, scorer, line, a, e);
      running = running.defined() ? add(tape, running, lp) : lp;
      table.cells.push_back(running);
    }
  }
  return table;
}

struct ClusterMatrix2D {
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::vector<ChainTable> horiz;  // one per row, chains over columns
  std::vector<ChainTable> vert;   // one per column, chains over rows
};

// Materialize the per-row and per-column chain tables for a row-major
// flattened feature map.
inline ClusterMatrix2D build_cluster_tables(Tape& tape,
                                            const DirectionalScorers& scorers,
                                            const Tensor& featmap,
                                            std::size_t grid_h,
                                            std::size_t grid_w) {
  detail::require_matrix(featmap, "build_cluster_tables");
  detail::require(featmap.shape()[0] == grid_h * grid_w,
                  "build_cluster_tables: feature map has " +
                      std::to_string(featmap.shape()[0]) + " cells, grid is " +
                      std::to_string(grid_h) + "x" + std::to_string(grid_w));
  ClusterMatrix2D out;
  out.grid_h = grid_h;
  out.grid_w = grid_w;
  out.horiz.reserve(grid_h);
  for (std::size_t r = 0; r < grid_h; ++r) {
    Tensor row = row_slice(tape, featmap, r * grid_w, (r + 1) * grid_w);
    out.horiz.push_back(directional_chain(tape, scorers.horizontal, row));
  }
  out.vert.reserve(grid_w);
  for (std::size_t c = 0; c < grid_w; ++c) {
    std::vector<int> idx(grid_h);
    for (std::size_t r = 0; r < grid_h; ++r)
      idx[r] = static_cast<int>(r * grid_w + c);
    Tensor col = gather_rows(tape, featmap, idx);
    out.vert.push_back(directional_chain(tape, scorers.vertical, col));
  }
  return out;
}

// Probability that the rectangle rows [r0, r1], cols [c0, c1] clusters:
// horizontal chain along its top-most row times vertical chain along its
// left-most column.
inline Tensor cluster_rectangle(Tape& tape, const ClusterMatrix2D& tables,
                                std::size_t r0, std::size_t r1, std::size_t c0,
                                std::size_t c1) {
  detail::require(r0 <= r1 && r1 < tables.grid_h && c0 <= c1 &&
                      c1 < tables.grid_w,
                  "cluster_rectangle: span out of bounds");
  const int hi = tables.horiz[r0].cell_index(c0, c1);
  const int vi = tables.vert[c0].cell_index(r0, r1);
  if (hi < 0 && vi < 0) return Tensor::scalar(1.0);
  if (hi < 0) return exp_elem(tape, tables.vert[c0].cell(r0, r1));
  if (vi < 0) return exp_elem(tape, tables.horiz[r0].cell(c0, c1));
  return exp_elem(tape, add(tape, tables.horiz[r0].cell(c0, c1),
                            tables.vert[c0].cell(r0, r1)));
}

// Pairwise modulation matrix over row-major flattened cells: the entry
// between two cells is the clustering probability of their bounding
// rectangle. Symmetric with unit diagonal by construction.
inline Tensor flatten_pairwise(Tape& tape, const ClusterMatrix2D& tables) {
  const std::size_t h = tables.grid_h, w = tables.grid_w;
  const std::size_t n = h * w;

  std::vector<Tensor> h_cells, v_cells;
  std::vector<std::size_t> h_off(h, 0), v_off(w, 0);
  for (std::size_t r = 0; r < h; ++r) {
    h_off[r] = h_cells.size();
    for (const Tensor& t : tables.horiz[r].cells) h_cells.push_back(t);
  }
  for (std::size_t c = 0; c < w; ++c) {
    v_off[c] = v_cells.size();
    for (const Tensor& t : tables.vert[c].cells) v_cells.push_back(t);
  }

  std::vector<int> h_idx(n * n, -1), v_idx(n * n, -1);
  for (std::size_t u = 0; u < n; ++u) {
    const std::size_t ru = u / w, cu = u % w;
    for (std::size_t v = 0; v < n; ++v) {
      const std::size_t rv = v / w, cv = v % w;
      const std::size_t r0 = std::min(ru, rv), r1 = std::max(ru, rv);
      const std::size_t c0 = std::min(cu, cv), c1 = std::max(cu, cv);
      const int hc = tables.horiz[r0].cell_index(c0, c1);
      if (hc >= 0) h_idx[u * n + v] = static_cast<int>(h_off[r0]) + hc;
      const int vc = tables.vert[c0].cell_index(r0, r1);
      if (vc >= 0) v_idx[u * n + v] = static_cast<int>(v_off[c0]) + vc;
    }
  }
  Tensor log_h = assemble_indexed(tape, h_cells, h_idx, n, n);
  Tensor log_v = assemble_indexed(tape, v_cells, v_idx, n, n);
  return exp_elem(tape, add(tape, log_h, log_v));
}

// 2x2 block mean pooling of a row-major grid feature map; odd axes keep a
// singleton tail row/column.
inline Tensor downsample_grid(Tape& tape, const Tensor& featmap,
                              std::size_t grid_h, std::size_t grid_w) {
  detail::require_matrix(featmap, "downsample_grid");
  detail::require(featmap.shape()[0] == grid_h * grid_w,
                  "downsample_grid: cell count mismatch");
  const std::size_t oh = (grid_h + 1) / 2, ow = (grid_w + 1) / 2;
  std::vector<std::vector<std::size_t>> groups;
  groups.reserve(oh * ow);
  for (std::size_t R = 0; R < oh; ++R)
    for (std::size_t C = 0; C < ow; ++C) {
      std::vector<std::size_t> g;
      for (std::size_t r = 2 * R; r < std::min(2 * R + 2, grid_h); ++r)
        for (std::size_t c = 2 * C; c < std::min(2 * C + 2, grid_w); ++c)
          g.push_back(r * grid_w + c);
      groups.push_back(std::move(g));
    }
  return pool_rows_groups(tape, featmap, groups);
}

// Expand a pairwise matrix built on the half-resolution grid back to the
// full grid through the block index rule on both axes.
inline Tensor upsample_pairwise(Tape& tape, const Tensor& pairwise_small,
                                std::size_t grid_h, std::size_t grid_w) {
  const std::size_t oh = (grid_h + 1) / 2, ow = (grid_w + 1) / 2;
  const std::size_t ns = oh * ow, n = grid_h * grid_w;
  detail::require_matrix(pairwise_small, "upsample_pairwise");
  detail::require(pairwise_small.shape()[0] == ns &&
                      pairwise_small.shape()[1] == ns,
                  "upsample_pairwise: expected " + std::to_string(ns) + "x" +
                      std::to_string(ns) + " input, got " +
                      detail::shape_str(pairwise_small.shape()));
  auto small_of = [&](std::size_t cell) {
    const std::size_t r = cell / grid_w, c = cell % grid_w;
    return (r / 2) * ow + (c / 2);
  };
  std::vector<std::size_t> map(n * n);
  for (std::size_t u = 0; u < n; ++u)
    for (std::size_t v = 0; v < n; ++v)
      map[u * n + v] = small_of(u) * ns + small_of(v);
  return gather_entries(tape, pairwise_small, map, n, n);
}

// Per-layer pairwise modulation for an encoder block, optionally routed
// through the down-up sampling shortcut.
inline Tensor encoder_pairwise(Tape& tape, const DirectionalScorers& scorers,
                               const Tensor& featmap, std::size_t grid_h,
                               std::size_t grid_w, bool use_downup) {
  if (use_downup && (grid_h > 1 || grid_w > 1)) {
    Tensor small = downsample_grid(tape, featmap, grid_h, grid_w);
    ClusterMatrix2D tables = build_cluster_tables(
        tape, scorers, small, (grid_h + 1) / 2, (grid_w + 1) / 2);
    Tensor pw_small = flatten_pairwise(tape, tables);
    return upsample_pairwise(tape, pw_small, grid_h, grid_w);
  }
  ClusterMatrix2D tables =
      build_cluster_tables(tape, scorers, featmap, grid_h, grid_w);
  return flatten_pairwise(tape, tables);
}

}  // namespace aclf
