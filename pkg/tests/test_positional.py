import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from photodoodle import numeric as nm
from photodoodle.errors import ConfigError, ShapeError
from photodoodle.positional import (
    RopeTable,
    TokenSeq,
    apply_rope,
    clone_positions,
    offset_positions,
    rope_rotate,
    rotate_heads,
    text_positions,
)


def rot2(theta):
    return np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])


def test_origin_is_identity():
    table = RopeTable(8)
    v = np.random.default_rng(0).standard_normal(8)
    assert np.array_equal(rope_rotate(table, v, (0, 0)), v)


def test_rotation_preserves_norm():
    table = RopeTable(16)
    rng = np.random.default_rng(1)
    for _ in range(50):
        v = rng.standard_normal(16)
        v /= np.linalg.norm(v)
        out = rope_rotate(table, v, tuple(rng.integers(0, 40, 2)))
        assert abs(np.linalg.norm(out) - 1.0) < 1e-6


def test_head_dim_four_hand_oracle():
    table = RopeTable(4, 10000.0)
    out = rope_rotate(table, np.array([1.0, 0.0, 1.0, 0.0]), (1, 0))
    expected = np.concatenate([rot2(1.0) @ [1.0, 0.0], [1.0, 0.0]])
    assert np.allclose(out, expected, atol=1e-15)


def test_axis_frequencies():
    table = RopeTable(8, 100.0)
    # two pairs per axis: exponents 0 and -2/4
    assert np.allclose(table.freqs, [1.0, 100.0 ** -0.5])
    v = np.zeros(8)
    v[6] = 1.0  # second column-axis pair
    out = rope_rotate(table, v, (0, 3))
    assert np.allclose(out[6:], rot2(3 * 100.0 ** -0.5) @ [1.0, 0.0])


@pytest.mark.parametrize("head_dim", [0, 2, 6, 10])
def test_bad_head_dim(head_dim):
    with pytest.raises(ConfigError):
        RopeTable(head_dim)


def test_wrong_vector_length():
    with pytest.raises(ShapeError):
        rope_rotate(RopeTable(8), np.ones(4), (1, 1))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(-30, 30), st.integers(-30, 30), st.sampled_from([0, 1]))
def test_relative_position_identity(seed, a, b, axis):
    table = RopeTable(8)
    rng = np.random.default_rng(seed)
    q, k = rng.standard_normal(8), rng.standard_normal(8)
    other = int(rng.integers(-5, 5))
    pa, pb, rel = [other, other], [other, other], [0, 0]
    pa[axis], pb[axis], rel[axis] = a, b, b - a
    lhs = rope_rotate(table, q, tuple(pa)) @ rope_rotate(table, k, tuple(pb))
    rhs = q @ rope_rotate(table, k, tuple(rel))
    assert abs(lhs - rhs) < 1e-10


def test_apply_rope_text_sequence_unchanged():
    tokens = np.random.default_rng(2).standard_normal((5, 16))
    seq = TokenSeq(tokens, text_positions(5), "text")
    out = apply_rope(RopeTable(8), seq, heads=2)
    assert np.array_equal(out.tokens, tokens)
    assert np.array_equal(out.positions, seq.positions)


def test_apply_rope_colocated_tokens_match():
    v = np.random.default_rng(3).standard_normal(16)
    latent = TokenSeq(np.stack([v, v]), [(2, 3), (2, 3)], "latent")
    out = apply_rope(RopeTable(8), latent, heads=2).tokens
    assert np.array_equal(out[0], out[1])
    assert not np.allclose(out[0], v)


def test_apply_rope_matches_per_head_rotation():
    rng = np.random.default_rng(4)
    tokens = rng.standard_normal((3, 16))
    pos = np.array([[0, 1], [2, 0], [3, 5]])
    table = RopeTable(8)
    out = apply_rope(table, TokenSeq(tokens, pos), heads=2).tokens
    for i in range(3):
        for h in range(2):
            assert np.allclose(out[i, 8 * h : 8 * h + 8], rope_rotate(table, tokens[i, 8 * h : 8 * h + 8], pos[i]))


def test_apply_rope_indivisible():
    with pytest.raises(ConfigError):
        apply_rope(RopeTable(8), TokenSeq(np.ones((1, 12)), [(0, 0)]), heads=5)


def test_rotate_heads_gradient():
    rng = np.random.default_rng(5)
    table = RopeTable(4)
    pos = np.array([[0, 0], [1, 2], [3, 1]])
    w = rng.standard_normal((1, 2, 3, 4))
    err = nm.finite_diff_check(lambda t: nm.sum(nm.mul(rotate_heads(t, table, pos), w)), rng.standard_normal((1, 2, 3, 4)))
    assert err < 1e-4


@pytest.mark.parametrize("grid", [(1, 1), (2, 2), (3, 5)])
def test_clone_positions(grid):
    latent, cond = clone_positions(grid)
    assert len(latent) == grid[0] * grid[1]
    assert np.array_equal(latent, cond)
    if grid == (2, 2):
        assert latent.tolist() == [[0, 0], [0, 1], [1, 0], [1, 1]]
    if grid == (1, 1):
        assert latent.tolist() == [[0, 0]]


def test_clone_positions_empty_grid():
    with pytest.raises(ShapeError):
        clone_positions((0, 3))


def test_offset_positions_disjoint():
    _, cond = clone_positions((4, 4))
    moved = offset_positions(cond)
    assert not set(map(tuple, moved)) & set(map(tuple, cond))
    assert np.array_equal(moved - cond, np.full_like(cond, 4))


def test_tokenseq_length_check():
    with pytest.raises(ShapeError):
        TokenSeq(np.ones((3, 4)), [(0, 0), (0, 1)])
