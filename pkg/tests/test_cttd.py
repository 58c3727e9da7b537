import numpy as np
import pytest
import torch

from oracles import compose_brute, conv2d_loops, full_conv_kernels, gradcheck
from ttcast import cttd
from ttcast.errors import ShapeError
from ttcast.tensor_core import conv2d


def chain_of(rng, k, ranks):
    return cttd.CttdChain([torch.tensor(rng.normal(size=(k, k, ranks[l], ranks[l + 1])))
                           for l in range(len(ranks) - 1)])


def interior_inputs(rng, chain, h, w, margin):
    """Random maps supported away from the border so no stage is truncated."""
    out = []
    for r in chain.rank_vector[:-1]:
        u = np.zeros((h, w, r))
        u[margin:h - margin, margin:w - margin] = rng.normal(
            size=(h - 2 * margin, w - 2 * margin, r))
        out.append(torch.tensor(u))
    return out


def oracle_apply(chain, inputs):
    """Sum over l of the dense kernel of cores l..m applied directly to U_l."""
    total = 0.0
    for l, u in enumerate(inputs):
        sub = cttd.CttdChain(chain.cores[l:])
        total = total + conv2d_loops(u.numpy(), cttd.compose(sub))
    return total


def test_compose_single_core_is_identity(rng):
    chain = chain_of(rng, 3, (2, 3))
    np.testing.assert_array_equal(cttd.compose(chain), chain.cores[0].numpy())


def test_compose_rank_one_pair_is_full_convolution():
    k1 = np.arange(9.0).reshape(3, 3)
    k2 = np.array([[0.0, 1, 0], [2, 0, -1], [0, 1, 3]])
    chain = cttd.CttdChain([torch.tensor(k1[:, :, None, None]), torch.tensor(k2[:, :, None, None])])
    got = cttd.compose(chain)[:, :, 0, 0]
    # hand expansion of the 3x3 * 3x3 product, one row as a spot check
    assert got.shape == (5, 5)
    assert got[0, 0] == 0.0 * 0.0
    assert got[2, 2] == (k1[0, 0] * k2[2, 2] + k1[0, 1] * k2[2, 1] + k1[0, 2] * k2[2, 0]
                         + k1[1, 0] * k2[1, 2] + k1[1, 1] * k2[1, 1] + k1[1, 2] * k2[1, 0]
                         + k1[2, 0] * k2[0, 2] + k1[2, 1] * k2[0, 1] + k1[2, 2] * k2[0, 0])
    np.testing.assert_allclose(got, full_conv_kernels(k1, k2), atol=1e-12)


def test_compose_sums_over_middle_rank(rng):
    chain = chain_of(rng, 3, (2, 2, 3))
    got = cttd.compose(chain)
    c1, c2 = (c.numpy() for c in chain.cores)
    for r1 in range(2):
        for r3 in range(3):
            ref = sum(full_conv_kernels(c1[:, :, r1, r2], c2[:, :, r2, r3]) for r2 in range(2))
            np.testing.assert_allclose(got[:, :, r1, r3], ref, atol=1e-12)
    np.testing.assert_allclose(got, compose_brute([c1, c2]), atol=1e-12)


def test_compose_rank_mismatch():
    with pytest.raises(ShapeError):
        cttd.CttdChain([torch.zeros(3, 3, 1, 2), torch.zeros(3, 3, 3, 1)])


def test_apply_order_one_is_conv2d(rng):
    chain = chain_of(rng, 3, (2, 4))
    u = torch.tensor(rng.normal(size=(5, 6, 2)))
    assert torch.equal(cttd.apply(chain, [u]), conv2d(u, chain.cores[0]))


def test_apply_zero_inputs(rng):
    chain = chain_of(rng, 3, (2, 2, 2, 3))
    out = cttd.apply(chain, [torch.zeros(5, 5, 2, dtype=torch.float64)] * 3)
    assert torch.all(out == 0) and out.shape == (5, 5, 3)


def test_apply_dirac_matches_composed_kernel(rng):
    chain = chain_of(rng, 3, (1, 1, 1))
    h = w = 9
    inputs = []
    for _ in range(2):
        u = np.zeros((h, w, 1))
        u[4, 4, 0] = 1.0
        inputs.append(torch.tensor(u))
    got = cttd.apply(chain, inputs).numpy()
    np.testing.assert_allclose(got, oracle_apply(chain, inputs), atol=1e-12)


def test_apply_wrong_channels(rng):
    chain = chain_of(rng, 3, (2, 3, 1))
    with pytest.raises(ShapeError):
        cttd.apply(chain, [torch.zeros(4, 4, 2, dtype=torch.float64)] * 2)
    with pytest.raises(ShapeError):
        cttd.apply(chain, [torch.zeros(4, 4, 2)])


@pytest.mark.parametrize("trial", range(10))
def test_apply_matches_oracle_random(trial):
    rng = np.random.default_rng(trial)
    m = int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    ranks = tuple(int(r) for r in rng.integers(1, 4, size=m + 1))
    chain = chain_of(rng, k, ranks)
    margin = m * (k // 2)
    inputs = interior_inputs(rng, chain, 8, 8, margin)
    np.testing.assert_allclose(cttd.apply(chain, inputs).numpy(), oracle_apply(chain, inputs),
                               atol=1e-5)


def test_apply_linear_in_inputs_and_cores(rng):
    chain = chain_of(rng, 3, (2, 2, 2))
    u = [torch.tensor(rng.normal(size=(6, 6, 2))) for _ in range(2)]
    v = [torch.tensor(rng.normal(size=(6, 6, 2))) for _ in range(2)]
    lhs = cttd.apply(chain, [a + 3 * b for a, b in zip(u, v)])
    assert torch.allclose(lhs, cttd.apply(chain, u) + 3 * cttd.apply(chain, v), atol=1e-10)
    scaled = cttd.CttdChain([chain.cores[0] * 2, chain.cores[1]])
    inputs = [u[0], torch.zeros_like(u[1])]
    assert torch.allclose(cttd.apply(scaled, inputs), 2 * cttd.apply(chain, inputs), atol=1e-10)


def test_apply_gradient(rng):
    def fn(a, b, u1, u2):
        return (cttd.apply(cttd.CttdChain([a, b]), [u1, u2]) ** 2).sum()

    gradcheck(fn, dict(a=rng.normal(size=(3, 3, 2, 2)), b=rng.normal(size=(3, 3, 2, 3)),
                       u1=rng.normal(size=(4, 5, 2)), u2=rng.normal(size=(4, 5, 2))))


def test_param_counts(rng):
    assert cttd.chain_param_count(3, 3, (8, 8, 8, 8)) == 1728
    chain = chain_of(rng, 3, (8, 8, 8, 8))
    assert cttd.param_count(chain) == 1728
    assert cttd.chain_param_count(1, 3, (4, 5)) == cttd.dense_equivalent_count(1, 3, (4, 5))
    counts = [cttd.chain_param_count(m, 3, (8,) * (m + 1)) for m in range(1, 6)]
    assert all(c == 9 * 64 * m for m, c in zip(range(1, 6), counts))
    for m in range(2, 5):
        assert cttd.chain_param_count(m, 3, (8,) * m + (16,)) < cttd.dense_equivalent_count(
            m, 3, (8,) * m + (16,))
