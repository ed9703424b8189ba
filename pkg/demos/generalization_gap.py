"""
Small versus large batches at a fixed sample budget
===================================================

Runs demos/configs/mlp_gap.yaml: constant batches 16 and 1024 against the
adaptive schedule, then prints the summary table. Takes about a minute.
"""
from pathlib import Path

from adabatch.harness import parse_config, render_table, run_experiment, summarize

spec = parse_config(Path(__file__).parent / "configs" / "mlp_gap.yaml")
results = run_experiment(spec)
print(render_table(summarize([(r.variant, r.seed, r.metrics) for r in results if r.metrics])))
for r in results:
    print(f"{r.variant:10s} seed {r.seed}: final val loss {r.metrics.final_val_loss:.5f}")
print("metrics written under", spec.out_dir)
