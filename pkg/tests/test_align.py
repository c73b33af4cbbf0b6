import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gmlab import align as al
from gmlab import checks
from gmlab.core import ops
from gmlab.core.gradcheck import grad_check
from gmlab.core.rng import Rng
from gmlab.core.tensor import Tensor, backward, parameter
from gmlab.errors import ContractViolation


def test_energies_orthonormal():
    Y = np.eye(3)
    e = al.energies(Tensor(Y[[1]]), Tensor(Y)).e.data
    assert np.array_equal(e, [[0.0, 1.0, 0.0]])


def test_energies_zero():
    em = al.energies(Tensor(np.zeros((2, 4))), Tensor(np.ones((3, 4))))
    assert np.array_equal(em.e.data, np.zeros((2, 3)))
    assert np.array_equal(em.p.data, np.full((2, 3), 0.5))


def test_energies_loop_oracle(nprng):
    H, Y = nprng.normal(size=(5, 4)), nprng.normal(size=(3, 4))
    e = al.energies(Tensor(H), Tensor(Y)).e.data
    ref = np.array([[sum(H[i, d] * Y[j, d] for d in range(4)) for j in range(3)] for i in range(5)])
    assert np.max(np.abs(e - ref)) < 1e-12
    with pytest.raises(ContractViolation):
        al.energies(Tensor(H), Tensor(np.ones((3, 2))))


def test_soft_always_stay():
    a = al.soft_expected_alignment(Tensor(np.ones((4, 3)))).data
    assert np.array_equal(a, np.tile([1.0, 0, 0], (4, 1)))


def test_soft_always_advance():
    a = al.soft_expected_alignment(Tensor(np.zeros((4, 6)))).data
    assert np.array_equal(a, np.eye(6)[:4])


def test_soft_half_two_by_two():
    a = al.soft_expected_alignment(Tensor(np.full((2, 2), 0.5))).data
    assert np.allclose(a[1], [0.5, 0.5], atol=0)
    assert np.allclose(al.brute_force_expected_alignment(np.full((2, 2), 0.5))[1], [0.5, 0.5], atol=0)


def test_brute_force_binomial_three():
    a = al.brute_force_expected_alignment(np.full((3, 3), 0.5))
    assert np.allclose(a[2], [0.25, 0.5, 0.25], atol=0)


def test_brute_force_single_row(nprng):
    assert np.array_equal(al.brute_force_expected_alignment(nprng.uniform(size=(1, 4))), [[1.0, 0, 0, 0]])


def test_brute_force_refuses_large():
    with pytest.raises(ContractViolation):
        al.brute_force_expected_alignment(np.full((7, 3), 0.5))


def test_oracle_equivalence():
    assert checks.alignment_oracle_error(300, seed=5) < 1e-12


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_oracle_with_clamp(I, J, seed):
    r = Rng(seed)
    p = r.uniform((I, J))
    last = int(r.integers(0, J - 1))
    soft = al.soft_expected_alignment(Tensor(p), last).data
    assert np.max(np.abs(soft - al.brute_force_expected_alignment(p, last))) < 1e-12
    assert np.allclose(soft.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(soft[:, last + 1 :] == 0)


def test_alignment_gradient(nprng):
    u = parameter(nprng.uniform(0.1, 0.9, size=(2, 5, 4)))
    w = nprng.normal(size=(2, 5, 4))
    assert grad_check(lambda u: (al.monotonic_alignment(u, last=np.array([3, 2])) * w).sum(), u) < 1e-8


def test_fused_matches_composite(nprng):
    """The fused recursion equals step-by-step composite ops, values and grads."""
    e = nprng.normal(size=(6, 4))
    w = nprng.normal(size=(6, 4))
    u1 = parameter(1 / (1 + np.exp(-e)))
    backward((al.monotonic_alignment(u1) * w).sum())
    u2 = parameter(1 / (1 + np.exp(-e)))
    rows = [Tensor(np.eye(4)[0])]
    for i in range(1, 6):
        rows.append(al.hard_align_step(rows[-1], u2[i], check=False))
    backward((ops.stack(rows) * w).sum())
    assert np.allclose(u1.grad, u2.grad, atol=1e-12)


def test_st_degenerate():
    smp = al.st_bernoulli(Tensor(np.full((3, 3), 60.0)), 1.0, Rng(0))
    assert np.all(smp.u_forward == 1.0)


def test_st_forward_mean():
    e = math.log(0.7 / 0.3)
    smp = al.st_bernoulli(Tensor(np.full(100_000, e)), 1.0, Rng(1))
    assert abs(smp.u_forward.mean() - 0.7) < 0.005


def test_st_gradient_frozen_noise():
    assert checks.st_gradient_error(seed=2) < 1e-5


def test_st_backward_matches_gumbel_formula(nprng):
    e = nprng.normal(size=(4, 3))
    s = 0.6
    smp = al.st_bernoulli(Tensor(e), s, Rng(3))
    p = 1 / (1 + np.exp(-e))
    a = np.exp((np.log(p) + smp.g1) / s)
    b = np.exp((np.log(1 - p) + smp.g2) / s)
    assert np.allclose(smp.u_backward.data, a / (a + b), atol=1e-12)
    assert np.array_equal(smp.u_forward, (smp.u_backward.data > 0.5).astype(float))


def test_st_straight_through_gradient(nprng):
    e = parameter(nprng.normal(size=(3, 3)))
    smp = al.st_bernoulli(e, 0.8, Rng(4))
    assert np.array_equal(smp.u.data, smp.u_forward)
    w = nprng.normal(size=(3, 3))
    backward((smp.u * w).sum())
    ub = smp.u_backward.data
    assert np.allclose(e.grad, w * ub * (1 - ub) / 0.8, atol=1e-12)


def test_st_consistency_small_temperature():
    r = Rng(5)
    e = r.normal((4, 4))
    g1, g2 = r.gumbel((4, 4)), r.gumbel((4, 4))
    hard = (e + g1 - g2 > 0).astype(float)
    p = 1 / (1 + np.exp(-e))
    gaps = [np.max(np.abs(al.relaxed_bernoulli(Tensor(e), s, g1, g2).data - hard)) for s in (1.0, 0.1, 0.01)]
    assert gaps[0] >= gaps[1] >= gaps[2]
    mask = np.abs(p - 0.5) > 0.1
    gap = np.abs(al.relaxed_bernoulli(Tensor(e), 0.01, g1, g2).data - hard)
    assert gap[mask].max() < 0.05


def test_st_modes():
    e = Tensor(np.array([[0.3, -0.2], [1.0, 0.1]]))
    r = Rng(6)
    assert np.array_equal(al.st_bernoulli(e, 1.0, r, "soft").u.data, 1 / (1 + np.exp(-e.data)))
    g = al.st_bernoulli(e, 1.0, Rng(7), "gumbel")
    assert np.array_equal(g.u.data, g.u_backward.data)
    nz = al.st_bernoulli(e, 1.0, Rng(8), "noise").u.data
    assert np.all((nz > 0) & (nz < 1)) and not np.allclose(nz, 1 / (1 + np.exp(-e.data)))
    with pytest.raises(ContractViolation):
        al.st_bernoulli(e, 0.0, r)
    with pytest.raises(ContractViolation):
        al.st_bernoulli(e, 1.0, r, "cross")


def test_hard_step_cases():
    a = Tensor([1.0, 0, 0])
    assert np.array_equal(al.hard_align_step(a, Tensor([1.0, 0, 0])).data, [1, 0, 0])
    assert np.array_equal(al.hard_align_step(a, Tensor([0.0, 1, 1])).data, [0, 1, 0])
    for u in ([0.0, 0, 0], [1.0, 1, 1], [0.0, 1, 0]):
        assert np.array_equal(al.hard_align_step(Tensor([0, 0, 1.0]), Tensor(u)).data, [0, 0, 1])
    with pytest.raises(ContractViolation):
        al.hard_align_step(Tensor([0.5, 0.5, 0]), Tensor([1.0, 1, 1]))


def test_hard_monotonicity():
    assert checks.hard_monotonicity_violations(500, seed=9) == 0


def test_hard_rows_one_hot(nprng):
    alpha, _ = al.align(Tensor(nprng.normal(size=(3, 9, 5))), "st_gumbel", 0.5, Rng(1), last=np.array([4, 2, 0]))
    assert al.is_one_hot(alpha.data)


def test_context_cases(nprng):
    Y = nprng.normal(size=(3, 4))
    h = nprng.normal(size=4)
    c = al.context(Tensor(Y), Tensor([0.0, 1.0, 0.0]), Tensor(h)).data
    assert np.array_equal(c, Y[1] + h)
    cu = al.context(Tensor(Y), Tensor(np.full(3, 1 / 3)), Tensor(h)).data
    assert np.allclose(cu, Y.mean(axis=0) + h, atol=1e-15)
    A = nprng.uniform(size=(5, 3))
    H = nprng.normal(size=(5, 4))
    out = al.context(Tensor(Y), Tensor(A), Tensor(H)).data
    ref = np.array([[sum(A[i, j] * Y[j, d] for j in range(3)) + H[i, d] for d in range(4)] for i in range(5)])
    assert np.max(np.abs(out - ref)) < 1e-12
    with pytest.raises(ContractViolation):
        al.context(Tensor(Y), Tensor(np.ones(2)), Tensor(h))


def test_temperature_schedule():
    assert al.temperature_schedule(0, 100) == 2.0
    assert al.temperature_schedule(100, 100) == pytest.approx(0.1, abs=1e-15)
    assert al.temperature_schedule(50, 100) == pytest.approx(math.sqrt(0.2), abs=1e-12)
    with pytest.raises(ContractViolation):
        al.temperature_schedule(0, 0)
    with pytest.raises(ContractViolation):
        al.temperature_schedule(5, 4)


def test_cross_attention_masks_padding(nprng):
    a = al.cross_attention(Tensor(nprng.normal(size=(2, 4, 5))), last=np.array([4, 1])).data
    assert np.allclose(a.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(a[1, :, 2:] < 1e-300)


def test_align_inference_modes(nprng):
    e = Tensor(nprng.normal(size=(8, 4)))
    greedy, _ = al.align(e, "soft", 1.0, Rng(0), training=False, greedy=True)
    again, _ = al.align(e, "gumbel", 1.0, Rng(1), training=False, greedy=True)
    assert np.array_equal(greedy.data, again.data)
    assert al.is_one_hot(al.align(e, "noise", 1.0, Rng(2), training=False)[0].data)
    with pytest.raises(ContractViolation):
        al.align(e, "location", 1.0, Rng(0))


def test_is_monotone_trace():
    assert al.is_monotone_trace([0, 0, 1, 2, 2])
    assert not al.is_monotone_trace([0, 2])
    assert not al.is_monotone_trace([1, 1])
    assert not al.is_monotone_trace([0, 1, 0])
