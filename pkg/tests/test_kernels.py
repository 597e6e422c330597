import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from l2d import _kernels
from l2d._kernels import _numpy as ref

try:
    from l2d._kernels import _ckernels
except ImportError:  # extension not built
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")


def test_backend_reported():
    import l2d
    assert l2d.KERNEL_BACKEND == _kernels.BACKEND in ("cython", "numpy")


def test_im2col_layout(rng):
    x = rng.normal(size=(1, 3, 3, 2))
    cols = ref.im2col3x3(x)
    # centre pixel's patch is the whole (unpadded) image in (dy, dx, c) order
    assert np.array_equal(cols[0, 1, 1], x[0].reshape(-1))
    assert np.all(cols[0, 0, 0].reshape(3, 3, 2)[0] == 0)


def test_col2im_is_adjoint(rng):
    x = rng.normal(size=(2, 5, 4, 3))
    c = rng.normal(size=(2, 5, 4, 27))
    lhs = np.sum(ref.im2col3x3(x) * c)
    rhs = np.sum(x * ref.col2im3x3(c, 3))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def relation_brute(t, s, mask):
    loss = 0.0
    n = 0
    for g in range(t.shape[0]):
        for i in range(t.shape[1]):
            for j in range(t.shape[1]):
                if i != j and mask[g, i] and mask[g, j]:
                    dt = np.linalg.norm(t[g, i] - t[g, j])
                    ds = np.linalg.norm(s[g, i] - s[g, j])
                    r = abs(dt - ds)
                    loss += 0.5 * r * r if r <= 1 else r - 0.5
                    n += 1
    return loss, n


def test_relation_reference_matches_brute_force(rng):
    for _ in range(20):
        t, s = rng.normal(size=(3, 4, 5)), rng.normal(size=(3, 4, 5)) * 2
        m = (rng.random((3, 4)) < 0.6).astype(np.uint8)
        loss, _, n = ref.relation_huber(t, s, m)
        want, wn = relation_brute(t, s, m)
        assert loss == pytest.approx(want, rel=1e-12, abs=1e-14) and n == wn


@needs_ext
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_compiled_matches_reference(dtype, seed):
    rng = np.random.default_rng(seed)
    b, h, w, c = (int(v) for v in rng.integers(1, 6, size=4))
    x = rng.normal(size=(b, h, w, c)).astype(dtype)
    assert np.array_equal(_ckernels.im2col3x3(x), ref.im2col3x3(x))
    cols = rng.normal(size=(b, h, w, 9 * c)).astype(dtype)
    tol = 1e-5 if dtype == np.float32 else 1e-12
    assert np.allclose(_ckernels.col2im3x3(cols, c), ref.col2im3x3(cols, c), atol=tol)
    g, n, d = (int(v) for v in rng.integers(1, 7, size=3))
    t = rng.normal(size=(g, n, d)).astype(dtype)
    s = rng.normal(size=(g, n, d)).astype(dtype)
    m = (rng.random((g, n)) < 0.7).astype(np.uint8)
    l1, g1, n1 = _ckernels.relation_huber(t, s, m)
    l2, g2, n2 = ref.relation_huber(t, s, m)
    assert n1 == n2
    assert l1 == pytest.approx(l2, rel=tol, abs=tol)
    assert g1.dtype == dtype and np.allclose(g1, g2, atol=10 * tol)


def test_relation_zero_distance_subgradient():
    t = np.array([[[0.0, 0.0], [1.0, 0.0]]])
    s = np.zeros((1, 2, 2))
    _, grad, n = _kernels.relation_huber(t, s, np.ones((1, 2)))
    assert n == 2 and np.all(grad == 0)


def _probe(env_value):
    env = dict(os.environ, L2D_PURE_PYTHON=env_value)
    out = subprocess.run([sys.executable, "-c", "import l2d; print(l2d.KERNEL_BACKEND)"],
                         capture_output=True, text=True, env=env, check=True)
    return out.stdout.strip()


def test_pure_python_fallback_selected_at_import():
    assert _probe("1") == "numpy"
    assert _probe("0") == _kernels.BACKEND


def test_fallback_training_step_matches(tmp_path):
    """One forward/backward step gives the same loss on both backends."""
    code = (
        "import numpy as np\n"
        "from l2d.model import ModelConfig, MultiLabelNet\n"
        "from l2d import losses as L\n"
        "net = MultiLabelNet(ModelConfig(dtype='float64'))\n"
        "x = np.random.default_rng(0).random((4, 32, 32, 3))\n"
        "y = np.array([[1, 1, 0, 0, 1, 0, 0, 0]] * 2 + [[0, 1, 1, 0, 0, 0, 0, 1]] * 2)\n"
        "out = net(x)\n"
        "t = out.embeddings.data * 1.5\n"
        "loss = L.bce_loss(out.predictions.probs, y) + L.cd_loss(t, out.embeddings, y) + L.id_loss(t, out.embeddings, y)\n"
        "loss.backward()\n"
        "print(repr(loss.item()), repr(float(np.abs(net.params['backbone.0.weight'].grad).sum())))\n"
    )
    vals = []
    for flag in ("1", "0"):
        env = dict(os.environ, L2D_PURE_PYTHON=flag)
        out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env, check=True)
        vals.append([float(v) for v in out.stdout.split()])
    assert vals[0] == pytest.approx(vals[1], rel=1e-10)
