"""Small random structures shared by the test modules."""

from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation

from dualbind.data import Complex


def random_complex(n_lig=3, n_prot=6, seed=0, spread=3.0, cid="r0", affinity=1.0, key="K"):
    """Ligand atoms near the origin inside a loose protein shell."""
    rng = np.random.default_rng(seed)
    lig = rng.normal(size=(n_lig, 3)) * 1.2
    direc = rng.normal(size=(n_prot, 3))
    direc /= np.linalg.norm(direc, axis=1, keepdims=True)
    prot = direc * (spread + rng.uniform(0.0, 2.0, (n_prot, 1)))
    coords = np.concatenate([prot, lig])
    elements = rng.integers(0, 5, n_prot + n_lig)
    is_lig = np.r_[np.zeros(n_prot, bool), np.ones(n_lig, bool)]
    return Complex(cid, elements, is_lig, coords, affinity, key)


def random_rigid(rng):
    r = Rotation.random(random_state=rng).as_matrix()
    t = rng.uniform(-20.0, 20.0, 3)
    return r, t
