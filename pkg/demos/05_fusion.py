"""Shrink the traced graph with peak-safe fusion rewrites.

Merge-GEMM concatenates projections that read the same input into one wide
matmul; elementwise fusion collapses add/mul/sigmoid/relu chains into
single nodes whose intermediates are never tracked.  Both rewrites keep a
match only when the estimated peak does not grow, so stacking them is
always safe.
"""

import numpy as np

from evoplan import (
    EvoConfig,
    estimate_memory,
    execute,
    fuse_elementwise,
    fuse_merge_gemm,
    init_block_params,
    trace_evoformer,
)


def main() -> None:
    cfg = EvoConfig(n_seq=8, n_res=16)
    params = init_block_params(cfg, seed=0)
    graph = trace_evoformer(cfg, params)
    rng = np.random.default_rng(0)
    inputs = {
        graph.runtime_inputs[0]: rng.normal(
            size=(cfg.n_seq, cfg.n_res, cfg.h_msa)),
        graph.runtime_inputs[1]: rng.normal(
            size=(cfg.n_res, cfg.n_res, cfg.h_pair)),
    }
    want = execute(graph, inputs)

    stages = [("traced", graph)]
    stages.append(("merge-GEMM", fuse_merge_gemm(graph)))
    stages.append(("merge-GEMM + elementwise",
                   fuse_elementwise(stages[-1][1])))

    print(f"{'stage':28s} {'nodes':>6} {'peak bytes':>12} {'max err':>10}")
    for name, g in stages:
        got = execute(g, inputs)
        err = max(float(np.max(np.abs(got[o2] - want[o1])))
                  for o1, o2 in zip(graph.outputs, g.outputs))
        print(f"{name:28s} {len(g.nodes):>6} "
              f"{estimate_memory(g).peak_bytes:>12,} {err:>10.1e}")

    merged = stages[-1][1]
    wide = [n for n in merged.nodes if n.name == "merged.linear"]
    fused = [n for n in merged.nodes if n.op == "fused_elementwise"]
    print(f"\n{len(wide)} wide merged projections, "
          f"{len(fused)} fused elementwise chains")
    longest = max(fused, key=lambda n: len(n.attrs["steps"]))
    print(f"longest fused chain ({len(longest.attrs['steps'])} steps): "
          f"{[s['op'] for s in longest.attrs['steps']]}")


if __name__ == "__main__":
    main()
