import numpy as np
import pytest
import torch

from agbrecon.errors import ConfigError, DimensionError
from agbrecon.operators import (
    SamplingMask,
    adjoint_model,
    adjoint_recon,
    apply_mask,
    as_complex_image,
    check_normalized,
    coil_expand,
    fft2c,
    forward_model,
    ifft2c,
    make_mask,
    normalize_maps,
    zero_fill,
)

from conftest import crandn, random_instance


def vdot(a, b):
    return torch.sum(a.conj() * b)


@pytest.mark.parametrize("H,W,C", [(32, 32, 4), (64, 64, 8)])
def test_adjoint_dot_product(H, W, C, rng):
    worst = 0.0
    for _ in range(100):
        m, maps, mask = random_instance(rng, 1, H, W, C)
        k = crandn(rng, 1, C, H, W)
        lhs = vdot(forward_model(m, maps, mask), k)
        rhs = vdot(m, adjoint_model(k, maps, mask))
        worst = max(worst, float(abs(lhs - rhs) / abs(lhs)))
    assert worst <= 1e-6


def test_fft_unitary(rng):
    x = crandn(rng, 3, 32, 48)
    assert torch.allclose(torch.linalg.vector_norm(fft2c(x)), torch.linalg.vector_norm(x), rtol=1e-6)
    assert torch.allclose(ifft2c(fft2c(x)), x, atol=1e-12)


def test_fft_centering_matches_loop_dft(rng):
    # centered DFT written out with explicit index shifts: DC sits at (H//2, W//2)
    H, W = 8, 6
    x = (rng.standard_normal((H, W)) + 1j * rng.standard_normal((H, W)))
    out = np.zeros((H, W), complex)
    for u in range(H):
        for v in range(W):
            acc = 0j
            for y in range(H):
                for z in range(W):
                    acc += x[y, z] * np.exp(-2j * np.pi * ((u - H // 2) * (y - H // 2) / H + (v - W // 2) * (z - W // 2) / W))
            out[u, v] = acc / np.sqrt(H * W)
    np.testing.assert_allclose(fft2c(torch.from_numpy(x)).numpy(), out, atol=1e-10)


def test_full_mask_round_trip(rng):
    for H, W, C in [(32, 32, 4), (64, 64, 8)]:
        m, maps, _ = random_instance(rng, 2, H, W, C)
        full = SamplingMask(columns=np.ones(W, np.uint8), R=1.0, n_center=W)
        back = zero_fill(forward_model(m, maps, full), maps)
        rel = torch.linalg.vector_norm(back - m) / torch.linalg.vector_norm(m)
        assert rel <= 1e-6
        back2 = adjoint_recon(fft2c(coil_expand(m, maps)), maps)
        assert torch.linalg.vector_norm(back2 - m) / torch.linalg.vector_norm(m) <= 1e-6


def test_operators_linear(rng):
    m1, maps, mask = random_instance(rng, 1, 32, 32, 4)
    m2 = crandn(rng, 1, 32, 32)
    k1, k2 = crandn(rng, 1, 4, 32, 32), crandn(rng, 1, 4, 32, 32)
    a, b = 0.7 - 1.3j, -2.1 + 0.4j
    ops_img = [lambda x: forward_model(x, maps, mask), lambda x: coil_expand(x, maps), fft2c, ifft2c]
    ops_k = [lambda k: adjoint_recon(k, maps), lambda k: apply_mask(k, mask), lambda k: adjoint_model(k, maps, mask)]
    for op in ops_img:
        assert torch.allclose(op(a * m1 + b * m2), a * op(m1) + b * op(m2), atol=1e-10)
    for op in ops_k:
        assert torch.allclose(op(a * k1 + b * k2), a * op(k1) + b * op(k2), atol=1e-10)


def test_forward_model_matches_loop(rng):
    m, maps, mask = random_instance(rng, 1, 16, 16, 3)
    out = forward_model(m, maps, mask)
    cols = mask.columns
    for c in range(3):
        kc = fft2c(m[0] * maps[0, c])
        for w in range(16):
            expected = kc[:, w] * cols[w]
            assert torch.allclose(out[0, c, :, w], expected, atol=1e-12)


def test_coil_combination_loop(rng):
    _, maps, _ = random_instance(rng, 1, 16, 16, 3)
    k = crandn(rng, 1, 3, 16, 16)
    expected = sum(maps[0, c].conj() * ifft2c(k[0, c]) for c in range(3))
    assert torch.allclose(adjoint_recon(k, maps)[0], expected, atol=1e-12)


def test_normalize_maps(rng):
    raw = rng.standard_normal((4, 8, 8)) + 1j * rng.standard_normal((4, 8, 8))
    maps = normalize_maps(raw)
    assert check_normalized(maps)
    np.testing.assert_allclose(np.sum(np.abs(maps) ** 2, axis=0), 1.0, atol=1e-12)
    assert not check_normalized(raw)


def test_shape_errors(rng):
    m, maps, mask = random_instance(rng, 1, 32, 32, 4)
    with pytest.raises(DimensionError):
        forward_model(m[:, :16], maps, mask)
    with pytest.raises(DimensionError):
        apply_mask(crandn(rng, 1, 4, 32, 16), mask)


def test_as_complex_image_validation():
    with pytest.raises(DimensionError):
        as_complex_image(np.zeros((31, 32)))
    with pytest.raises(ConfigError):
        as_complex_image(np.full((32, 32), np.nan))
    assert as_complex_image(np.ones((32, 32))).dtype == np.complex128


# ---- masks -----------------------------------------------------------------


def test_mask_examples():
    mask = make_mask(256, 4, 12, seed=0)
    assert mask.n_sampled == 64
    assert mask.columns[122:134].all()
    assert mask.center_slice() == slice(122, 134)
    full = make_mask(64, 1, 12, seed=3)
    assert full.columns.all()


def test_mask_fraction_within_one_column():
    for W, R in [(64, 3), (100, 4.5), (256, 6), (128, 2.5)]:
        mask = make_mask(W, R, 4, seed=1)
        assert abs(mask.n_sampled - W / R) <= 1


def test_mask_deterministic_per_seed():
    a, b = make_mask(128, 4, 8, seed=5), make_mask(128, 4, 8, seed=5)
    assert np.array_equal(a.columns, b.columns)
    assert not np.array_equal(a.columns, make_mask(128, 4, 8, seed=6).columns)


def test_mask_density_favours_center():
    counts = np.zeros(256)
    for s in range(300):
        counts += make_mask(256, 4, 12, seed=s).columns
    inner = counts[128 - 40 : 128 - 6].mean()
    outer = np.r_[counts[:30], counts[-30:]].mean()
    assert inner > 3 * outer


def test_mask_budget_too_small():
    with pytest.raises(ConfigError):
        make_mask(32, 8, 12)
    with pytest.raises(ConfigError):
        make_mask(32, 0.5, 4)
