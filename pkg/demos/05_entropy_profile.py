"""
Where is the student unsure?
============================

Sample responses from a student checkpoint and average the token entropy by
position. Pass the checkpoint path as the first argument (for instance one
written by ``04_distill_addition.py``); without one, a student is
warm-started on the spot.
"""

import sys
from pathlib import Path

from tsdkd.distill import comparison_config, init_student, task_splits
from tsdkd.harness import entropy_profile
from tsdkd.lm import TaskCodec, load_params
from tsdkd.plots import plot_profile

cfg = comparison_config()
codec = TaskCodec()
if len(sys.argv) > 1:
    student = load_params(sys.argv[1])
else:
    student, _ = init_student(cfg.replace(student_init_steps=400))

prompts = [codec.encode_prompt(it.prompt) for it in task_splits(cfg)[1]]
prof = entropy_profile(student, prompts, 300, seed=0, max_len=cfg.max_len)

for pos, (m, c) in enumerate(zip(prof.mean, prof.counts)):
    print(f"{pos:>3} {m:6.3f} {'#' * int(round(20 * m))}  (n={c})")
print(f"\npeak at {prof.peak} of {prof.max_position} positions")

out = Path("demo_out")
out.mkdir(exist_ok=True)
rows = [[i, float(m), int(c)] for i, (m, c) in enumerate(zip(prof.mean, prof.counts))]
print(*plot_profile(rows, out), sep="\n")
