import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetshadow.hset import (BOUNDARY_EXIT, ENTRY, EXIT, INTERIOR, OUTSIDE, ContractEntryError,
                            DegreeUndefinedError, DimensionError, HSet, Link, OutOfBallError, ShapeError, block,
                            check_chain, check_covering, contract, to_json)


def square(center=(0.0, 0.0), ru=1.0, rs=1.0, name="N"):
    return HSet(center, [block("u", 0, ru, EXIT), block("s", 1, rs, ENTRY)], name)


def linear(M):
    M = np.asarray(M, dtype=float)
    return lambda P: P @ M.T


def test_membership_basics():
    N = square()
    assert N.membership([0, 0]) == INTERIOR
    assert N.membership([1.0, 0.3]) == BOUNDARY_EXIT
    assert N.membership([0.2, 1.2]) == OUTSIDE
    assert N.u == 1 and N.s == 1


def test_three_linear_test_maps():
    N = square()
    v = check_covering(linear([[3, 0], [0, 1 / 3]]), N, N)
    assert v.passed and v.w == 1
    v = check_covering(linear([[0.5, 0], [0, 1 / 3]]), N, N)
    assert not v.passed and v.message == "exit condition fails"
    v = check_covering(linear([[-3, 0], [0, 1 / 3]]), N, N)
    assert v.passed and v.w == -1


def test_entry_failure_detected():
    N = square()
    v = check_covering(linear([[3, 0], [0, 1.5]]), N, N)
    assert not v.passed and v.entry_margin < 0


def test_singular_exit_block():
    with pytest.raises(DegreeUndefinedError):
        check_covering(linear([[0, 0], [0, 0.1]]), square(), square())


def test_exit_dimension_mismatch():
    N3 = HSet(np.zeros(3), [block("u", (0, 1), 1.0, EXIT), block("s", 2, 1.0, ENTRY)])
    with pytest.raises(ShapeError):
        check_covering(lambda P: P[:, :2], N3, square())


def test_contraction_slice():
    N = HSet(np.zeros(3), [block("a", 0, 1.0, EXIT), block("b", 1, 1.0, EXIT), block("s", 2, 1.0, ENTRY)])
    R = contract(N, "b", 0.0)
    assert R.u == 1 and R.free_dim == 2
    assert R.membership([0.2, 0.0, 0.1]) == INTERIOR
    assert R.membership([0.2, 0.1, 0.1]) == OUTSIDE
    with pytest.raises(ContractEntryError):
        contract(N, "s", 0.0)
    with pytest.raises(OutOfBallError):
        contract(N, "a", 1.5)


def test_contraction_membership_properties():
    rng = np.random.default_rng(0)
    N = HSet([0.5, -0.2, 0.0], [block("a", 0, 0.3, EXIT), block("b", 1, 0.1, EXIT),
                                block("s", 2, 2.0, ENTRY)])
    R = contract(N, "b", 0.4)
    q = rng.uniform(-1.2, 1.2, (1000, 2))
    pts = R.point(q)
    for p, qq in zip(pts, q):
        m_r, m_n = R.membership(p), N.membership(p)
        if m_r == INTERIOR:
            assert m_n in (INTERIOR, BOUNDARY_EXIT)
        inside = np.max(np.abs(qq)) < 1 - 1e-9
        assert (m_r == INTERIOR) == inside
    # points off the slice are outside the contraction even when inside N
    off = N.point(np.column_stack([rng.uniform(-0.5, 0.5, 1000), rng.uniform(-0.3, 0.3, 1000),
                                   rng.uniform(-0.5, 0.5, 1000)]))
    keep = np.abs(N.internal(off)[:, 1] - 0.4) > 1e-6
    assert all(R.membership(p) == OUTSIDE for p in off[keep])


def test_blocks_must_partition():
    with pytest.raises(DimensionError):
        HSet(np.zeros(3), [block("u", 0, 1.0, EXIT), block("s", 1, 1.0, ENTRY)])
    with pytest.raises(ValueError):
        block("u", 0, -1.0, EXIT)
    with pytest.raises(ValueError):
        block("u", 0, 1.0, "sideways")


def test_two_link_chain_with_contraction():
    # N1 has two exits; the first map expands both, the second starts from the slice b = 0
    N1 = HSet(np.zeros(3), [block("a", 0, 1.0, EXIT), block("b", 1, 1.0, EXIT), block("s", 2, 1.0, ENTRY)])
    M1 = HSet(np.zeros(3), [block("a", 0, 1.0, EXIT), block("b", 1, 1.0, EXIT), block("s", 2, 1.0, ENTRY)],
              "M1")
    R = contract(M1, "b", 0.0)
    M2 = HSet(np.zeros(3), [block("a", 0, 1.0, EXIT), block("s", (1, 2), 1.0, ENTRY)], "M2")
    links = [Link(N1, linear(np.diag([3, 3, 0.3])), M1, "first"),
             Link(R, linear(np.diag([3, 0.3, 0.3])), M2, "second")]
    rep = check_chain(links)
    assert rep.passed, rep.failed


def test_chain_pinpoints_failing_link():
    N = square()
    links = [Link(N, linear([[3, 0], [0, 0.3]]), N, "good"),
             Link(N, linear([[0.5, 0], [0, 0.3]]), N, "bad")]
    rep = check_chain(links)
    assert not rep.passed and rep.failed == ["bad"]
    assert '"failed"' in to_json(rep)


def test_empty_chain_passes():
    assert check_chain([]).passed


def test_chain_must_connect():
    a, b = square(name="a"), square(name="b")
    with pytest.raises(ShapeError):
        check_chain([Link(a, linear(np.eye(2)), a, "x"), Link(b, linear(np.eye(2)), b, "y")])


@settings(max_examples=30, deadline=None)
@given(st.floats(1.2, 5), st.floats(0.05, 0.9), st.sampled_from([1, -1]), st.integers(2, 6))
def test_linear_hyperbolic_maps_cover(expand, contract_by, sign, grid):
    N = square()
    v = check_covering(linear([[sign * expand, 0], [0, contract_by]]), N, N, grid_per_dim=grid)
    assert v.passed and v.w == sign


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 100), st.floats(0.01, 100), st.floats(-3, 3), st.floats(0.1, 0.9))
def test_rescaling_invariance(ru, rs, offset, c):
    M = np.array([[2.5, 0.1], [0.05, c]])
    base = check_covering(linear(M), square(), square())
    # same map conjugated by the scaling of the sets
    N = square((offset, 0), ru, rs)
    D = np.diag([ru, rs])
    shift = np.array([offset, 0.0])

    def f(P):
        return (P - shift) @ np.linalg.inv(D).T @ M.T @ D.T + shift

    v = check_covering(f, N, N)
    assert v.passed == base.passed and v.w == base.w
    assert abs(v.entry_margin - base.entry_margin) < 1e-9
    assert abs(v.exit_margin - base.exit_margin) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-4, 4), min_size=4, max_size=4))
def test_degree_is_sign_of_exit_determinant(entries):
    E = np.array(entries).reshape(2, 2)
    if abs(np.linalg.det(E)) < 1e-3:
        return
    N = HSet(np.zeros(3), [block("u", (0, 1), 1.0, EXIT), block("s", 2, 1.0, ENTRY)])
    M = np.zeros((3, 3))
    M[:2, :2] = E
    M[2, 2] = 0.5
    v = check_covering(linear(M), N, N)
    assert v.w == int(np.sign(np.linalg.det(E)))
