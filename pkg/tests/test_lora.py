import numpy as np
import pytest
from conftest import random_inputs, random_params

import reference
from photodoodle import numeric as nm
from photodoodle.errors import CompatibilityError, ConfigError, FormatError, RankError
from photodoodle.lora import (
    adapter_bytes,
    create_adapter,
    delta_weight,
    load_adapter,
    lora_forward,
    merge,
    parse_adapter,
    save_adapter,
)
from photodoodle.model import Weights, fingerprint, forward_velocity, init_params, lora_target_names


def randomize_b(adapter, seed=0):
    rng = np.random.default_rng(seed)
    for name, (A, B) in adapter.entries.items():
        adapter.entries[name] = (A, rng.standard_normal(B.shape).astype(B.dtype) * 0.1)
    return adapter


def test_hand_example():
    out = lora_forward((np.array([[1.0, 0.0]]), np.array([[2.0], [0.0]]), 1.0), np.eye(2), np.array([3.0, 4.0]))
    assert out.data.tolist() == [9.0, 4.0]


def test_zero_b_is_base():
    rng = np.random.default_rng(0)
    W0, x, A = rng.standard_normal((5, 7)), rng.standard_normal(7), rng.standard_normal((2, 7))
    out = lora_forward((A, np.zeros((5, 2)), 3.0), W0, x)
    assert np.allclose(out.data, W0 @ x, atol=1e-12)


def test_scale_is_alpha_over_rank(small_cfg):
    a = create_adapter(init_params(small_cfg), rank=4, alpha=8)
    assert a.scale == 2.0
    assert create_adapter(init_params(small_cfg), rank=3).scale == 1.0


def test_init_statistics(small_cfg):
    params = init_params(small_cfg)
    a = create_adapter(params, rank=4, seed=1)
    assert a.targets == lora_target_names(small_cfg)
    assert all(not B.any() for _, B in a.entries.values())
    A_all = np.concatenate([A.ravel() for A, _ in a.entries.values()])
    assert abs(A_all.std() - 0.25) < 0.02


def test_rank_bounds(small_cfg):
    params = init_params(small_cfg)
    with pytest.raises(RankError):
        create_adapter(params, rank=0)
    with pytest.raises(RankError):
        create_adapter(params, rank=small_cfg.d)
    with pytest.raises(ConfigError):
        create_adapter(params, targets=["blocks.0.attn.nope"])


def test_fresh_adapter_forward_bitwise(small_cfg):
    params = random_params(small_cfg, dtype="f32")
    z, c, ids = random_inputs(small_cfg, dtype=np.float32)
    adapter = create_adapter(params, rank=4, seed=2)
    a = forward_velocity(params, z, 0.4, c, ids).data
    b = forward_velocity(params, z, 0.4, c, ids, adapter=adapter).data
    assert a.dtype == np.float32 and np.array_equal(a, b)


def test_adapter_forward_matches_reference(small_cfg):
    params = random_params(small_cfg)
    adapter = randomize_b(create_adapter(params, rank=3, alpha=6, seed=3))
    z, c, ids = random_inputs(small_cfg, seed=4)
    got = forward_velocity(params, z, 0.6, c, ids, adapter=adapter).data
    want = reference.forward(
        params.tensors, small_cfg, z.tokens, z.positions, 0.6, c.tokens, c.positions, ids, lora=(adapter.entries, 2.0)
    )
    assert np.allclose(got, want, atol=1e-9)


def test_merge_equivalence(small_cfg):
    params = random_params(small_cfg, dtype="f32")
    adapter = randomize_b(create_adapter(params, rank=4, seed=5), seed=6)
    merged = merge(params, adapter)
    worst = 0.0
    for i in range(100):
        z, c, ids = random_inputs(small_cfg, seed=100 + i, dtype=np.float32)
        t = (i + 0.5) / 100
        active = forward_velocity(params, z, t, c, ids, adapter=adapter).data.astype(np.float64)
        folded = forward_velocity(merged, z, t, c, ids).data.astype(np.float64)
        worst = max(worst, np.linalg.norm(active - folded) / np.linalg.norm(active))
    assert worst < 1e-5


def test_merge_fresh_adapter_is_noop(small_cfg):
    params = random_params(small_cfg, dtype="f32")
    merged = merge(params, create_adapter(params, rank=4))
    for k, v in params.tensors.items():
        assert np.array_equal(merged[k], v)
    assert merged.meta["lineage"][0]["stage"] == "edit"
    assert "lineage" not in params.meta


def test_sequential_merges_commute(small_cfg):
    params = random_params(small_cfg)
    a = randomize_b(create_adapter(params, rank=2, seed=7), seed=8)
    b = randomize_b(create_adapter(params, rank=3, seed=9), seed=10)
    ab = merge(merge(params, a), b, strict=False)
    ba = merge(merge(params, b), a, strict=False)
    for k in params.tensors:
        assert np.allclose(ab[k], ba[k], atol=1e-12)


def test_merge_rejects_foreign_base(small_cfg):
    params = random_params(small_cfg)
    adapter = create_adapter(params, rank=2)
    other = random_params(small_cfg, seed=1)
    with pytest.raises(CompatibilityError):
        merge(other, adapter)


def test_delta_weight(small_cfg):
    params = random_params(small_cfg)
    adapter = randomize_b(create_adapter(params, rank=2, alpha=1.0, seed=11))
    A, B = adapter.entries["blocks.0.mlp.fc1"]
    assert np.allclose(delta_weight(adapter, "blocks.0.mlp.fc1"), 0.5 * B @ A)


def test_save_load_roundtrip(tmp_path, small_cfg):
    params = random_params(small_cfg, dtype="f32")
    adapter = randomize_b(create_adapter(params, rank=4, seed=12))
    adapter.meta["style"] = "frame"
    save_adapter(adapter, tmp_path / "a.lora")
    raw = (tmp_path / "a.lora").read_bytes()
    assert raw[:8] == b"EDLORA1\x00"
    back = load_adapter(tmp_path / "a.lora", params)
    assert back.rank == 4 and back.alpha == adapter.alpha and back.stage == "edit"
    assert back.base_fingerprint == fingerprint(params) and len(back.base_fingerprint) == 16
    assert back.meta == {"style": "frame"}
    for name, (A, B) in adapter.entries.items():
        assert np.array_equal(back.entries[name][0], A) and np.array_equal(back.entries[name][1], B)
    assert adapter_bytes(back) == raw


def test_load_against_wrong_checkpoint(tmp_path, small_cfg):
    params = random_params(small_cfg, dtype="f32")
    save_adapter(create_adapter(params, rank=2), tmp_path / "a.lora")
    with pytest.raises(CompatibilityError):
        load_adapter(tmp_path / "a.lora", random_params(small_cfg, seed=3, dtype="f32"))


def test_truncated_adapter(small_cfg):
    raw = adapter_bytes(create_adapter(init_params(small_cfg), rank=2))
    for cut in (4, 20, len(raw) // 2, len(raw) - 1):
        with pytest.raises(FormatError):
            parse_adapter(raw[:cut])
    with pytest.raises(FormatError):
        parse_adapter(raw + b"\0")


def test_base_gradients_exactly_zero(small_cfg):
    params = random_params(small_cfg, dtype="f32")
    adapter = randomize_b(create_adapter(params, rank=2, seed=13))
    z, c, ids = random_inputs(small_cfg, batch=2, dtype=np.float32)
    tape = nm.Tape()
    w = Weights(params, tape, train_base=False, adapter=adapter, train_adapter=True)
    out = forward_velocity(w, z, np.array([0.2, 0.7]), c, ids)
    grads = nm.grad(tape, nm.mse(out, np.ones(out.shape, np.float32)))
    base = {k: g for k, g in grads.items() if not k.startswith("lora.")}
    lora = {k: g for k, g in grads.items() if k.startswith("lora.")}
    assert base and all(not g.any() for g in base.values())
    assert any(g.any() for g in lora.values())
