"""
Distilling a column-addition tutor
==================================

End to end: train a two-layer teacher on three-digit addition with
written-out carries, warm-start a one-layer student, then distil that same
student three ways (the combined objective, JSD(0.9) on every token, forward
KL) for three seeds. The full run takes a while on one core; pass ``quick``
for a shrunken version that finishes in a couple of minutes.

Run directories (metrics, checkpoints) land in ``demo_out/addition/``.
"""

import logging
import sys

from tsdkd.distill import compare_objectives, comparison_config
from tsdkd.plots import emit_plots

logging.basicConfig(level=logging.INFO, format="%(message)s")

if "quick" in sys.argv[1:]:
    cfg = comparison_config(digits_lo=2, digits_hi=2, teacher_steps=600, student_init_steps=300,
                            steps=60, eval_every=30, n_eval=100)
    seeds = (0,)
else:
    cfg = comparison_config()
    seeds = (0, 1, 2)

result = compare_objectives(cfg, seeds=seeds, out_dir="demo_out/addition")
print(f"\nteacher exact match {result.teacher_exact_match:.3f}"
      + (f" ({result.teacher_warning})" if result.teacher_warning else ""))
print(result.table())
print(f"{result.seconds / 60:.1f} minutes")

# loss curves for the combined objective, first seed
for path in emit_plots(f"demo_out/addition/tsd_kd_seed{seeds[0]}/metrics.jsonl", "metrics"):
    print(path)
