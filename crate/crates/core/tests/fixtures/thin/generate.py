# Regenerates thin.txt: random blob maps and their scikit-image thinning.
import numpy as np
from scipy import ndimage
from skimage.morphology import thin

rng = np.random.default_rng(7)
cases = []
for k in range(12):
    h, w = rng.integers(8, 24, size=2)
    m = rng.random((h, w)) < 0.35
    m = ndimage.binary_dilation(m, iterations=int(rng.integers(0, 2)))
    if k % 3 == 0:
        m[h // 2 - 1 : h // 2 + 2, 1 : w - 1] = True
    cases.append((m, thin(m)))

with open("thin.txt", "w") as f:
    for m, t in cases:
        f.write(f"{m.shape[0]} {m.shape[1]}\n")
        for row in m:
            f.write("".join("#" if v else "." for v in row) + "\n")
        for row in t:
            f.write("".join("#" if v else "." for v in row) + "\n")
