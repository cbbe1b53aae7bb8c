import os
import subprocess
import sys

import numpy as np
import pytest

import fpq
from fpq import _backend, formats


def test_active_backend_reported():
    assert fpq.backend() in _backend.BACKENDS


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        _backend.use("fortran")


@pytest.mark.parametrize("name", ["python", "nonsense"])
def test_env_override(name):
    env = dict(os.environ, FPQ_BACKEND=name)
    r = subprocess.run([sys.executable, "-c", "import fpq; print(fpq.backend())"],
                       capture_output=True, text=True, env=env)
    if name == "nonsense":
        assert r.returncode != 0 and "FPQ_BACKEND" in r.stderr
    else:
        assert r.stdout.strip() == "python"


@pytest.mark.skipif("cython" not in _backend.BACKENDS, reason="compiled extension not built")
@pytest.mark.parametrize("fmt", [formats.E5M2, formats.E4M3, formats.E3M0, formats.E2M1], ids=str)
def test_encode_backends_identical(fmt):
    v = np.unique(formats.enumerate_values(fmt))
    x = np.concatenate([
        np.random.default_rng(0).standard_normal(50_000) * formats.max_finite(fmt) / 4,
        0.5 * (v[1:] + v[:-1]),   # exact ties
        v,
    ])
    out = {}
    previous = _backend.name
    try:
        for name in ("python", "cython"):
            _backend.use(name)
            out[name] = formats.encode_nearest(x, fmt)
    finally:
        _backend.use(previous)
    np.testing.assert_array_equal(out["python"], out["cython"])
