import math

import numpy as np
import pytest

from graphsplat.core import DenseVolume
from graphsplat.errors import InvalidParameterError
from graphsplat.metrics import psnr_3d, ssim_slices


def test_psnr_closed_form():
    ref = np.zeros((8, 8, 8))
    ref[0, 0, 0] = 2.0
    rec = ref + 0.1
    expected = 10 * math.log10(4.0 / 0.01)
    assert psnr_3d(rec, ref) == pytest.approx(expected, rel=1e-12)
    assert psnr_3d(ref, ref) == math.inf


def test_psnr_accepts_volumes_and_checks_shapes():
    a = DenseVolume(np.ones((4, 4, 4)), [0.1] * 3, [0.0] * 3)
    assert psnr_3d(a, np.ones((4, 4, 4)) * 0.5) == pytest.approx(10 * math.log10(1 / 1))
    with pytest.raises(InvalidParameterError):
        psnr_3d(np.zeros((4, 4, 4)), np.zeros((4, 4, 3)))
    with pytest.raises(InvalidParameterError):
        psnr_3d(np.ones((4, 4, 4)), np.zeros((4, 4, 4)))


def test_ssim_slices_identity_and_noise_ordering(rng):
    ref = rng.uniform(size=(16, 16, 16))
    assert ssim_slices(ref, ref) == pytest.approx(1.0)
    mild = ssim_slices(ref + rng.normal(0, 0.05, ref.shape), ref)
    strong = ssim_slices(ref + rng.normal(0, 0.3, ref.shape), ref)
    assert 1 > mild > strong


def test_ssim_axes_average():
    rng = np.random.default_rng(4)
    ref = rng.uniform(size=(12, 14, 16))
    rec = ref + rng.normal(0, 0.1, ref.shape)
    per_axis = [ssim_slices(rec, ref, axes=(a,)) for a in range(3)]
    counts = ref.shape
    weighted = sum(p * n for p, n in zip(per_axis, counts)) / sum(counts)
    assert ssim_slices(rec, ref, axes=(0, 1, 2)) == pytest.approx(weighted, rel=1e-12)
    with pytest.raises(InvalidParameterError):
        ssim_slices(np.ones((4, 4, 4)), np.ones((4, 4, 4)))


def test_psnr_spec_values():
    ref = np.zeros((4, 4, 4))
    ref[0, 0, 0] = 1.0
    for mse, db in ((0.01, 20.0), (1e-4, 40.0)):
        assert psnr_3d(ref + math.sqrt(mse), ref) == pytest.approx(db, abs=1e-9)


def test_psnr_swap_changes_only_peak(rng):
    a, b = rng.uniform(0, 2, (6, 6, 6)), rng.uniform(0, 1, (6, 6, 6))
    shift = 20 * math.log10(a.max() / b.max())
    assert psnr_3d(b, a) - psnr_3d(a, b) == pytest.approx(shift, rel=1e-12)


def test_ssim_zero_volume_on_lattice_is_low():
    from graphsplat.phantom import PhantomSpec, make_phantom

    ref = make_phantom(PhantomSpec("cube-lattice", dims=(32, 32, 32)))
    val = ssim_slices(np.zeros(ref.dims), ref)
    assert 0 <= val < 0.5


def _ssim_direct(x, y, peak, w=11, sigma=1.5):
    """Per-pixel window sums written out, zero padding outside the image."""
    r = w // 2
    g = np.exp(-0.5 * ((np.arange(w) - r) / sigma) ** 2)
    g /= g.sum()
    win = np.outer(g, g)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    xp, yp = np.pad(x, r), np.pad(y, r)
    vals = []
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            px, py = xp[i:i + w, j:j + w], yp[i:i + w, j:j + w]
            mx, my = np.sum(win * px), np.sum(win * py)
            vx = np.sum(win * px * px) - mx * mx
            vy = np.sum(win * py * py) - my * my
            cxy = np.sum(win * px * py) - mx * my
            vals.append((2 * mx * my + c1) * (2 * cxy + c2)
                        / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_matches_direct_recomputation():
    rng = np.random.default_rng(9)
    ref = rng.uniform(size=(13, 12, 3))
    rec = ref + rng.normal(0, 0.2, ref.shape)
    direct = np.mean([_ssim_direct(rec[:, :, k], ref[:, :, k], ref.max()) for k in range(3)])
    assert abs(ssim_slices(rec, ref) - direct) < 1e-10
