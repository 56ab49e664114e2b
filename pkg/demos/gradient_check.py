"""
Checking the autodiff engine against finite differences
========================================================

Every differentiable op, and the full encoder / resampler / decoder / loss
pipeline on a miniature model, is compared with central differences in
float64.
"""
import time

from biplanar.selfcheck import key_bias_gradient, run_suite

start = time.perf_counter()
worst = run_suite(seeds=range(5), tol=1e-4)
for name, err in sorted(worst.items(), key=lambda kv: -kv[1]):
    print(f"{name:24s} worst relative error {err:.2e}")

# the attention key bias adds the same constant to every logit of a softmax
# row, so its true gradient is exactly zero
print("key-bias gradient", max(key_bias_gradient(s) for s in range(5)))
print(f"{time.perf_counter() - start:.1f} s")
