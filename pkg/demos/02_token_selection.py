"""
Which tokens get which signal
=============================

On a single random trace, show the three selections the combined objective
makes: the entropy opener that receives the ranking loss, the soft gate that
weights the direct loss, and the high-entropy positions whose entropy is
minimised.
"""

import numpy as np

from tsdkd.losses import ObjectiveConfig, rank_position, select_tokens, total_loss
from tsdkd.numerics import token_entropy

rng = np.random.default_rng(0)
L, V = 12, 10
# the student is unsure early on and sharpens later
student = rng.normal(0, 1, (L, V)) * np.linspace(0.3, 4.0, L)[:, None]
teacher = rng.normal(0, 3, (L, V))

cfg = ObjectiveConfig(coverage=30)
sel = select_tokens(student, teacher, cfg)
h_s, h_t = token_entropy(student), token_entropy(teacher)

print("pos  H_S    H_T    gate   opener  EM")
for t in range(L):
    print(f"{t:>3}  {h_s[t]:.3f}  {h_t[t]:.3f}  {sel.gates[t]:.3f}  "
          f"{'x' if t < sel.opener.length else ' ':^6}  {'x' if t in sel.em_indices else ''}")

# %%
# At the first position the student's top candidates are re-ordered by the
# teacher; the ranking loss is the Plackett-Luce likelihood of that order.

perm = rank_position(student[0], teacher[0], 4)
print("\nstudent top-4 :", perm.candidate_ids)
print("teacher order :", perm.ranked_ids)

bd, grad = total_loss(student, teacher, cfg, selection=sel)
print(f"\nindirect {bd.indirect:.4f}  direct {bd.direct:.4f}  entropy {bd.entropy_min:.4f}  "
      f"total {bd.total:.4f}  (alpha {bd.alpha})")
print("rows with nonzero gradient:", np.flatnonzero(np.abs(grad).sum(axis=1)))
