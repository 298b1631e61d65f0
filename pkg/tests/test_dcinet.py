import numpy as np
import pytest
import torch

from agbrecon.data import Batch, DatasetManifest, make_sample
from agbrecon.dcinet import (
    DCIConfig,
    DCINet,
    RegularizationUnit,
    count_params,
    data_consistency_unit,
    dci_forward,
    init_params,
    regularization_unit,
)
from agbrecon.errors import ConfigError, ContractError, DimensionError
from agbrecon.metrics import mean_nmse
from agbrecon.operators import SamplingMask, adjoint_recon, apply_mask, forward_model, zero_fill

from conftest import crandn, random_instance


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def zero_weights(net, lam=None):
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
        if lam is not None:
            for b in net.blocks:
                b.lam.fill_(lam)
    return net


def measured_k(rng, B=2, H=32, W=32, C=4):
    m, maps, mask = random_instance(rng, B, H, W, C)
    return m, maps, mask, forward_model(crandn(rng, B, H, W), maps, mask)


# ---- data consistency -------------------------------------------------------


def test_dc_vanishes_on_consistent_image(rng):
    m, maps, mask = random_instance(rng, 2, 32, 32, 4)
    k_u = forward_model(m, maps, mask)
    out = data_consistency_unit(m, k_u, maps, mask, torch.tensor(1.0, dtype=torch.float64))
    assert out.abs().max() <= 1e-6


def test_dc_zero_lambda(rng):
    m, maps, mask, k_u = measured_k(rng)
    out = data_consistency_unit(m, k_u, maps, mask, torch.tensor(0.0, dtype=torch.float64))
    assert torch.count_nonzero(out) == 0


def test_dc_matches_operator_composition(rng):
    m, maps, mask, k_u = measured_k(rng)
    full = SamplingMask(columns=np.ones(32, np.uint8), R=1.0, n_center=32)
    lam = 0.37
    oracle = adjoint_recon(apply_mask(forward_model(m, maps, full), mask) - k_u, maps) * lam
    out = data_consistency_unit(m, k_u, maps, mask, torch.tensor(lam, dtype=torch.float64))
    assert torch.max(torch.abs(out - oracle)) <= 1e-10


def test_dc_contract_on_unmasked_input(rng):
    m, maps, mask = random_instance(rng, 1, 32, 32, 4)
    k_full = crandn(rng, 1, 4, 32, 32)
    with pytest.raises(ContractError):
        data_consistency_unit(m, k_full, maps, mask, torch.tensor(1.0), check=True)


def test_dc_descent(rng):
    # one DC-only iteration with lambda = 1 shrinks the k-space residual
    for _ in range(10):
        m, maps, mask, k_u = measured_k(rng, B=1)
        net = zero_weights(DCINet(DCIConfig(1, 0, 4)).double(), lam=1.0)
        m_z = zero_fill(k_u, maps)
        out = net(k_u, maps, mask)
        res = lambda x: torch.linalg.vector_norm(forward_model(x, maps, mask) - k_u)
        assert res(out) < res(m_z)


# ---- regularization unit ------------------------------------------------------


def test_reg_unit_zero_weights(rng):
    unit = RegularizationUnit(3, 8).double()
    with torch.no_grad():
        for p in unit.parameters():
            p.zero_()
    out = regularization_unit(crandn(rng, 2, 3, 32, 32), unit)
    assert torch.count_nonzero(out) == 0


@pytest.mark.parametrize("H,W", [(32, 32), (48, 48), (64, 64), (32, 48)])
def test_reg_unit_shape(H, W, rng):
    unit = RegularizationUnit(2, 4).double()
    out = unit(crandn(rng, 1, 2, H, W))
    assert out.shape == (1, H, W) and out.is_complex()


def test_reg_unit_connection_count(rng):
    unit = RegularizationUnit(3, 4).double()
    with pytest.raises(DimensionError):
        unit(crandn(rng, 1, 2, 32, 32))


def test_reg_unit_input_gradient_fd(rng):
    torch.manual_seed(0)
    unit = RegularizationUnit(2, 4).double()
    x = crandn(rng, 1, 2, 32, 32).requires_grad_(True)
    weights = crandn(rng, 1, 32, 32)
    f = lambda z: torch.sum((unit(z) * weights).real)
    f(x).backward()
    h = 1e-6
    for c, i, j in [(0, 5, 7), (1, 16, 16), (0, 31, 0)]:
        for part, unit_step in (("real", 1.0), ("imag", 1j)):
            xp, xm = x.detach().clone(), x.detach().clone()
            xp[0, c, i, j] += h * unit_step
            xm[0, c, i, j] -= h * unit_step
            fd = (f(xp) - f(xm)).item() / (2 * h)
            g = x.grad[0, c, i, j]
            ad = g.real.item() if part == "real" else g.imag.item()
            assert abs(ad - fd) <= 1e-4 * max(abs(fd), 1e-8)


# ---- full network ---------------------------------------------------------------


def test_forward_shape_contract(rng):
    net = init_params(DCIConfig(5, 2, 16))
    _, maps, mask = random_instance(rng, 1, 64, 64, 8)
    k_u = forward_model(crandn(rng, 1, 64, 64), maps, mask).to(torch.complex64)
    out = dci_forward(k_u, maps.to(torch.complex64), mask, net, DCIConfig(5, 2, 16))
    assert out.shape == (1, 64, 64) and out.is_complex()


def test_config_mismatch(rng):
    net = init_params(DCIConfig(2, 1, 4))
    m, maps, mask, k_u = measured_k(rng)
    with pytest.raises(ConfigError):
        dci_forward(k_u, maps, mask, net, DCIConfig(3, 1, 4))


def test_zero_weights_identity(rng):
    net = zero_weights(DCINet(DCIConfig(4, 2, 6)).double(), lam=0.0)
    m, maps, mask, k_u = measured_k(rng)
    assert torch.equal(net(k_u, maps, mask), zero_fill(k_u, maps))


def expected_count(N, G, c):
    return N * (25 * c * (2 * (G + 1)) + c + 25 * c * c + c + 25 * 2 * c + 2 + 1)


@pytest.mark.parametrize("N,G,c", [(20, 5, 40), (5, 2, 16), (1, 0, 1), (3, 4, 7)])
def test_param_count(N, G, c):
    cfg = DCIConfig(N, G, c)
    net = DCINet(cfg)
    walked = 0
    for name, p in net.named_parameters():
        n = 1
        for d in p.shape:
            n *= d
        walked += n
    assert walked == expected_count(N, G, c) == cfg.expected_param_count() == count_params(net)


def test_init_deterministic():
    a, b = init_params(DCIConfig(3, 1, 4), seed=5), init_params(DCIConfig(3, 1, 4), seed=5)
    for (ka, va), (kb, vb) in zip(a.named_arrays().items(), b.named_arrays().items()):
        assert ka == kb and torch.equal(va, vb)
    assert all(blk.lam.item() == 1.0 for blk in a.blocks)
    assert all(torch.count_nonzero(c.bias) == 0 for blk in a.blocks for c in blk.reg.convs())
    c = init_params(DCIConfig(3, 1, 4), seed=6)
    assert not torch.equal(a.blocks[0].reg.conv1.weight, c.blocks[0].reg.conv1.weight)


def test_named_arrays_round_trip():
    a, b = init_params(DCIConfig(3, 1, 4), seed=1), init_params(DCIConfig(3, 1, 4), seed=2)
    b.load_arrays(a.named_arrays())
    assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
    with pytest.raises(ConfigError):
        init_params(DCIConfig(2, 1, 4)).load_arrays(a.named_arrays())


def test_init_nmse_close_to_zero_fill():
    man = DatasetManifest(train=20, val=1, test=1, H=64, W=64, n_coils=4, R=4, n_center=4)
    batch = Batch.from_samples([make_sample(man, "train", i) for i in range(20)])
    zf = mean_nmse(batch.m_z, batch.m_f)
    for seed in range(20):
        net = init_params(DCIConfig(5, 2, 16), seed=seed)
        with torch.no_grad():
            out = net(batch.k_u, batch.maps, batch.mask)
        assert 0.5 * zf <= mean_nmse(out, batch.m_f) <= 1.5 * zf


def test_dense_connectivity_pattern(rng):
    # block outputs are swapped for fresh leaves so only direct connections carry gradient
    N, G = 6, 2
    net = init_params(DCIConfig(N, G, 4), seed=0, dtype=torch.float64)
    m, maps, mask, k_u = measured_k(rng, B=1)
    stacks, leaves = [], []

    def capture(mod, args):
        stacks.append(args[0])

    def detach(mod, args, out):
        leaf = out.detach().requires_grad_(True)
        leaves.append(leaf)
        return leaf

    hooks = [blk.register_forward_pre_hook(capture) for blk in net.blocks]
    hooks += [blk.register_forward_hook(detach) for blk in net.blocks]
    net(k_u, maps, mask)
    for h in hooks:
        h.remove()
    for k in range(N):
        for j in range(N):
            touched = False
            if stacks[j].requires_grad:
                probe = torch.sum(stacks[j].abs() ** 2)
                (g,) = torch.autograd.grad(probe, leaves[k], retain_graph=True, allow_unused=True)
                touched = g is not None and bool(torch.count_nonzero(g) > 0)
            assert touched == (k + 1 <= j <= k + G + 1), (k, j)


def _fd_mse_grad(net, param, index, k_u, maps, mask, m_f, h=1e-6):
    def loss():
        return torch.mean(torch.abs(net(k_u, maps, mask) - m_f) ** 2).item()

    with torch.no_grad():
        orig = param[index].item()
        param[index] = orig + h
        up = loss()
        param[index] = orig - h
        down = loss()
        param[index] = orig
    return (up - down) / (2 * h)


def test_end_to_end_gradients_fd(rng):
    net = init_params(DCIConfig(2, 1, 4), seed=3, dtype=torch.float64)
    m_f, maps, mask = random_instance(rng, 1, 32, 32, 4)
    k_u = forward_model(m_f, maps, mask)
    loss = torch.mean(torch.abs(net(k_u, maps, mask) - m_f) ** 2)
    loss.backward()
    worst = 0.0
    for name, p in net.named_parameters():
        flat = p.grad.reshape(-1)
        idx = int(torch.argmax(flat.abs()))
        index = np.unravel_index(idx, p.shape) if p.ndim else ()
        fd = _fd_mse_grad(net, p, index, k_u, maps, mask, m_f)
        ad = p.grad[index].item()
        worst = max(worst, abs(ad - fd) / max(abs(fd), 1e-10))
    assert worst <= 1e-3
