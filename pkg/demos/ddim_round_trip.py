"""
DDIM inversion and reconstruction
=================================

With a noise predictor that ignores its input the deterministic sampler
retraces the inversion exactly. With one that depends on the latent the
round trip is only approximate and gets better as the step count grows.
"""

import math

import numpy as np

from coordaug import ddim
from coordaug.backends import AffineDenoiser, ConstantDenoiser

rng = np.random.default_rng(0)
z0 = rng.normal(size=(4, 8, 8))

const = ConstantDenoiser(rng.normal(size=z0.shape))
s = ddim.make_schedule(50)
zT = ddim.invert(z0, const, s)[-1]
back = ddim.sample(zT, const, s, "A picture of [cat]", 7.5)
print("constant eps, T=50:", np.abs(back - z0).max())

affine = AffineDenoiser(lambda u: 0.5 * math.cos(u), lambda u: 0.1 * u)
for steps in (10, 25, 50, 100, 200):
    s = ddim.make_schedule(steps)
    back = ddim.sample(ddim.invert(z0, affine, s)[-1], affine, s, "p", 7.5)
    print(f"affine eps, T={steps:3d}: {np.abs(back - z0).max():.4f}")
