"""Block arithmetic and parameter accounting for branched residual nets.

Walks through the big two-branch preset (66 bottleneck blocks, branch point
after block 39) and shows how the branch point trades parameters against
an ensemble of fully independent networks.

Run: python demos/topology_and_parameters.py
"""

import dataclasses

from branchnet import (block_topology, count_parameters, layer_counts,
                       mini_config, paper_scale_config)


def main():
    cfg = paper_scale_config()
    topo = block_topology(cfg)
    layers = layer_counts(cfg)
    print("big preset: stages", list(cfg.stage_blocks), "widths",
          list(cfg.stage_widths), "(bottleneck)")
    print(f"  {cfg.total_blocks} base blocks, branch after {cfg.branch_after_block}, "
          f"{cfg.num_branches} branches")
    print(f"  shared blocks:          {topo.shared_blocks}")
    print(f"  per-branch blocks:      {topo.per_branch_blocks}")
    print(f"  materialized blocks:    {topo.total_blocks_materialized}")
    print(f"  conv layers (one path): {layers.conv_layers}")
    print(f"  weighted layers:        {layers.weighted_layers}")

    report = count_parameters(cfg)
    print(f"\n  total parameters:       {report.total_params:>12,}")
    print(f"  2 independent nets:     {report.equivalent_independent_ensemble_params:>12,}")
    print(f"  sharing ratio:          {report.sharing_ratio:.4f}")

    print("\nsweeping the branch point (earlier branch = less sharing):")
    print(f"  {'B':>3} {'total params':>14} {'ratio':>8} {'blocks':>7}")
    for b in (0, 13, 26, 39, 52, 66):
        variant = dataclasses.replace(cfg, branch_after_block=b)
        r = count_parameters(variant)
        t = block_topology(variant)
        print(f"  {b:>3} {r.total_params:>14,} {r.sharing_ratio:>8.4f} "
              f"{t.total_blocks_materialized:>7}")

    mini = mini_config()
    print(f"\ndesk-scale preset: stages {list(mini.stage_blocks)}, widths "
          f"{list(mini.stage_widths)}, branch after {mini.branch_after_block} of "
          f"{mini.total_blocks}")
    print(f"  total parameters: {count_parameters(mini).total_params:,}")


if __name__ == "__main__":
    main()
