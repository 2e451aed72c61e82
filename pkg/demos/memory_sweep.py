"""Cumulative memory optimisations and the context length each one buys.

    python3 demos/memory_sweep.py
"""

from docfuse.memory import MemConfig, estimate_flops, format_breakdown, max_context, sweep

for mode in ("inference", "training"):
    cfg = MemConfig(mode=mode)
    print(f"\n{mode} (budget {cfg.budget_bytes / 2 ** 30:.0f} GiB)")
    for label, n in sweep(cfg):
        print(f"  {label:<30s} {n:>12,d}")

dense = MemConfig(mode="inference")
cfg = dense.with_toggles("sparsity")
print(f"\nsparsity gain at inference: {max_context(cfg) / max_context(dense):.1f}x")

print("\nencoder FLOPs as the context doubles (sparse grows linearly, dense quadratically)")
for C in (8192, 16384, 32768):
    s, d = estimate_flops(C, 16, cfg)["total"], estimate_flops(C, 16, dense)["total"]
    print(f"  C={C:>6d}  sparse {s:.3e}  dense {d:.3e}")

print("\n" + format_breakdown(32768, cfg))
