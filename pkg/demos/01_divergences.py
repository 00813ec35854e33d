"""
Divergences and their gradients
===============================

The distillation losses are built from a handful of closed-form kernels.
This script evaluates them on one small teacher/student pair, shows how
JSD(beta) interpolates between the two KL directions, and runs the
finite-difference gradient suite.
"""

import numpy as np

from tsdkd.checks import gradcheck_suite
from tsdkd.numerics import (
    forward_kl_value_and_grad,
    generalized_jsd,
    jsd_value_and_grad,
    kl_divergence,
    reverse_kl_value_and_grad,
    softmax,
    token_entropy,
)

teacher = np.array([0.5, 0.3, 0.2])
student_logits = np.array([1.0, -0.5, 0.25])
student = softmax(student_logits)

print("student probs  ", np.round(student, 4))
print("H(student)     ", round(float(token_entropy(student_logits)), 6))
print("KL(T||S)       ", round(kl_divergence(teacher, student), 6))
print("KL(S||T)       ", round(kl_divergence(student, teacher), 6))
for beta in (0.1, 0.5, 0.9):
    print(f"JSD({beta})       ", round(generalized_jsd(teacher, student, beta), 6))

# %%
# Near beta = 0 the JSD gradient, divided by beta, is the forward-KL gradient;
# near beta = 1, divided by 1 - beta, it is the reverse-KL gradient.

b = 1e-4
_, g_lo = jsd_value_and_grad(teacher, student_logits, b)
_, g_hi = jsd_value_and_grad(teacher, student_logits, 1 - b)
_, g_f = forward_kl_value_and_grad(teacher, student_logits)
_, g_r = reverse_kl_value_and_grad(teacher, student_logits)
print("\nJSD(1e-4)/b    ", np.round(g_lo / b, 5), "  forward KL", np.round(g_f, 5))
print("JSD(1-1e-4)/b  ", np.round(g_hi / b, 5), "  reverse KL", np.round(g_r, 5))

# %%
# Every loss gradient against central differences (selections held fixed).

report = gradcheck_suite(trials=20)
print()
print(report.table())
