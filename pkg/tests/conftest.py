import warnings

import numpy as np
import pytest

from splatfield import synthetic

warnings.filterwarnings("ignore", message="The TBB threading layer")


@pytest.fixture(scope="session")
def small_scene():
    """200 random Gaussians, one 64x64 view."""
    return synthetic.random_scene(200, seed=7)


@pytest.fixture(scope="session")
def blob_fixture():
    """5 disjoint blobs, 12 views of 128x128, with per-Gaussian object ids."""
    return synthetic.blob_scene(n_objects=5, gaussians_per_object=120, seed=3,
                                n_views=12, width=128, height=128)


def random_raw_ply_bytes(n: int, seed: int, sh_rest: int = 45, extra=()):
    """Valid random PLY payload with moderate raw values (for round trips)."""
    rng = np.random.default_rng(seed)
    names = ["x", "y", "z"]
    names += list(extra)
    names += [f"f_dc_{i}" for i in range(3)]
    names += [f"f_rest_{i}" for i in range(sh_rest)]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    mat = rng.normal(scale=1.5, size=(n, len(names))).astype(np.float32)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    return ("\n".join(header) + "\n").encode("ascii") + mat.tobytes()
