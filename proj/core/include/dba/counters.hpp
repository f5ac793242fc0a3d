#pragma once

#include <cstdint>

namespace dba {

/// Per-worker tallies of the edge-proportional work items: how many edges
/// were pushed through residual/Jacobian evaluation and how many per-edge
/// coupling blocks were multiplied in sparse matrix-vector products. Used to
/// verify that per-worker work shrinks as 1/K.
struct WorkCounters {
  std::uint64_t edges_evaluated = 0;
  std::uint64_t edge_block_ops = 0;

  WorkCounters& operator+=(const WorkCounters& o) {
    edges_evaluated += o.edges_evaluated;
    edge_block_ops += o.edge_block_ops;
    return *this;
  }
  WorkCounters operator-(const WorkCounters& o) const {
    return {edges_evaluated - o.edges_evaluated,
            edge_block_ops - o.edge_block_ops};
  }
};

}  // namespace dba
