"""Compare the taped gradient of a coupled window loss with finite differences.

    python3 demos/gradient_check.py
"""

import numpy as np

from fluidctl import autodiff as ad
from fluidctl import environment as env
from fluidctl.verify import coupled_window_loss

cfg = env.make_environment("BaseNR", {"resolution": 32, "poisson_tol": 1e-12})
fn, f0 = coupled_window_loss(cfg, l=4, seed=0)

tape = ad.Tape()
x = tape.leaf(f0)
loss = fn(x)
(grad,) = tape.gradient(loss, [x])

eps = 1e-4
fd = np.array([(fn(ad.Tensor(f0 + eps * e)).value - fn(ad.Tensor(f0 - eps * e)).value) / (2 * eps)
               for e in np.eye(2)])
print(f"loss        {float(loss.value):.6f}")
print(f"tape grad   {grad}")
print(f"central FD  {fd}")
print(f"rel error   {np.max(np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-12)):.2e}")
