# Segmentation and synthesis metrics on toy arrays, plus the paired
# permutation test used for the significance stars in the tables.
import numpy as np

from jsynth import metrics as M

truth = np.array([[0, 1, 1, 0], [0, 1, 1, 0]])
pred = np.array([[0, 1, 1, 1], [0, 1, 0, 0]])
c = M.confusion(pred, truth)
print(c)
print("dice %.4f  fpr %.4f  fnr %.4f" % (M.dice(c), M.fpr(c), M.fnr(c)))

# PSNR gains 10*log10(2) ~ 3.01 dB each time the MSE halves
ref = np.linspace(0, 1, 100)
noise = np.random.default_rng(0).normal(size=100)
for scale in (0.1, 0.1 / np.sqrt(2), 0.05):
    print("noise %.4f  mae %.4f  psnr %.3f dB" % (scale, M.mae(ref, ref + scale * noise), M.psnr(ref, ref + scale * noise)))

# paired test: method b is a little better on most subjects
rng = np.random.default_rng(1)
a = rng.uniform(0.4, 0.6, size=12)
b = a + rng.normal(0.03, 0.02, size=12)
print("\np (b vs a, 12 pairs)  %.4f" % M.permutation_test(a, b, n_permutations=10000))
print("p (3 pairs, exact over 2^3 sign flips) %.4f" % M.permutation_test(a[:3], b[:3], n_permutations=10000))
