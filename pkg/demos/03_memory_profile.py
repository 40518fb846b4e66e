"""Profile the exact peak memory of a traced evoformer block.

The block is traced into a fine-grained graph; the estimator simulates
buffer liveness and predicts the peak to the byte, which an instrumented
execution then confirms.  The footprint histogram shows why chunking works:
almost every operation runs far below the peak.
"""

import numpy as np

from evoplan import (
    Allocator,
    EvoConfig,
    estimate_memory,
    execute,
    footprint_stats,
    init_block_params,
    trace_evoformer,
)


def main() -> None:
    cfg = EvoConfig(n_seq=16, n_res=64)
    params = init_block_params(cfg, seed=0)
    graph = trace_evoformer(cfg, params)
    print(f"traced block: {len(graph.nodes)} nodes "
          f"({cfg.n_seq} sequences x {cfg.n_res} residues)")

    profile = estimate_memory(graph)
    peak_node = graph.nodes[profile.peak_node_id]
    print(f"estimated peak: {profile.peak_bytes:,} bytes at node "
          f"{peak_node.id} ({peak_node.name}, shape {peak_node.shape})")

    rng = np.random.default_rng(0)
    inputs = {
        graph.runtime_inputs[0]: rng.normal(
            size=(cfg.n_seq, cfg.n_res, cfg.h_msa)),
        graph.runtime_inputs[1]: rng.normal(
            size=(cfg.n_res, cfg.n_res, cfg.h_pair)),
    }
    alloc = Allocator()
    execute(graph, inputs, alloc)
    print(f"measured peak:  {alloc.stats().peak_bytes:,} bytes "
          f"(match: {alloc.stats().peak_bytes == profile.peak_bytes})")

    print("\nfootprint distribution (fraction of nodes below each level):")
    for fraction in (0.1, 0.2, 0.5):
        stats = footprint_stats(profile, fraction)
        bar = "#" * int(stats["fraction_below"] * 40)
        print(f"  < {fraction:.0%} of peak: {stats['fraction_below']:6.1%} "
              f"{bar}")
    print("\nthe peak is a narrow spike: chunking the handful of nodes "
          "around it shrinks the whole profile")


if __name__ == "__main__":
    main()
