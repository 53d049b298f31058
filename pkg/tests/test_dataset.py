import json
import time

import numpy as np
import pytest

from photodoodle.codec import tokenize
from photodoodle.dataset import (
    PALETTE,
    STYLES,
    DataError,
    EditPair,
    apply_style,
    corpus_checksum,
    default_vocab,
    gen_corpus,
    gen_pair,
    gen_pairs,
    gen_scene,
    get_style,
    load_corpus,
    quantize,
    validate_pair,
)
from photodoodle.codec import write_pgm
from photodoodle.errors import ConfigError


def first_scene(pred, H=16, W=16):
    for seed in range(500):
        scene = gen_scene(seed, H, W)
        if pred(scene):
            return scene
    raise AssertionError("no matching scene in 500 seeds")


def test_scene_deterministic():
    a, b = gen_scene(7), gen_scene(7)
    assert np.array_equal(a.image, b.image)
    assert not np.array_equal(a.image, gen_scene(8).image)


def test_shape_geometry_matches_pixels():
    for seed in range(50):
        scene = gen_scene(seed)
        for s in scene.shapes:
            assert s.area >= 3
            assert np.all(scene.image[s.mask.astype(bool)] == PALETTE[s.color])


def test_scene_render_time():
    gen_scene(0)
    times = []
    for seed in range(200):
        t0 = time.perf_counter()
        gen_scene(seed)
        times.append(time.perf_counter() - t0)
    assert np.median(times) < 1e-3


def test_frame_border_count():
    scene = gen_scene(3)
    pair = apply_style("frame", scene, 0, signature=True)
    assert pair.mask.sum() == 60
    assert np.array_equal(pair.tgt[1:-1, 1:-1], pair.src[1:-1, 1:-1])
    assert pair.instruction == "add frame"
    assert np.all(pair.tgt[0, 0] == PALETTE["orange"])


def test_recolor_single_shape():
    scene = first_scene(lambda s: len(s.shapes) == 1)
    pair = apply_style("recolor", scene, 1)
    assert np.array_equal(pair.mask.astype(bool), scene.shapes[0].mask)


def test_outline_diff_is_mask():
    for seed in range(20):
        pair = gen_pair("outline", seed)
        diff = np.any(pair.src != pair.tgt, axis=-1)
        assert np.array_equal(diff, pair.mask.astype(bool))


@pytest.mark.parametrize("style", list(STYLES))
def test_each_style_keeps_background(style):
    for seed in range(25):
        for signature in (False, True):
            pair = gen_pair(style, seed, signature=signature)
            validate_pair(pair, tol=0.0)
            assert pair.background_equal()


def test_halo_needs_disk():
    scene = first_scene(lambda s: all(sh.kind != "disk" for sh in s.shapes))
    with pytest.raises(DataError):
        apply_style("halo", scene, 0)
    assert gen_pair("halo", 5).style == "halo"


def test_mono_block_full_mask():
    pair = gen_pair("mono_block", 2)
    assert pair.mask.all()
    validate_pair(pair)


def test_style_lookup():
    assert get_style(2).id == "frame" and get_style("6").id == "halo"
    with pytest.raises(ConfigError):
        get_style("cubism")


def test_instructions_in_vocab():
    vocab = default_vocab()
    for p in gen_pairs("general", 120, seed=4) + gen_pairs("style", 10, seed=4, style="outline"):
        assert vocab.unk_id not in vocab.ids(p.instruction).tolist()
        assert len(tokenize(p.instruction)) <= vocab.max_len


def test_style_corpus_manifest(tmp_path):
    manifest = gen_corpus("style", 50, 1, tmp_path, style="frame")
    lines = (tmp_path / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 50 == len(manifest)
    entries = [json.loads(line) for line in lines]
    assert {e["style"] for e in entries} == {"frame"}
    assert set(entries[0]) == {"id", "style", "instruction", "src", "tgt", "mask", "seed"}


def test_disjoint_seed_ids():
    a = {p.id for p in gen_pairs("general", 30, seed=1)}
    b = {p.id for p in gen_pairs("general", 30, seed=2)}
    assert len(a) == 30 and not a & b


def test_regeneration_byte_identical(tmp_path):
    gen_corpus("general", 24, 9, tmp_path / "a")
    gen_corpus("general", 24, 9, tmp_path / "b")
    assert corpus_checksum(tmp_path / "a") == corpus_checksum(tmp_path / "b")
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_load_roundtrip(tmp_path):
    pairs = gen_pairs("general", 12, seed=5)
    gen_corpus("general", 12, 5, tmp_path)
    corpus = load_corpus(tmp_path)
    assert corpus.kind == "general" and len(corpus) == 12
    for mem, disk in zip(pairs, corpus):
        assert mem.id == disk.id and mem.instruction == disk.instruction
        assert np.abs(mem.src - disk.src).max() <= 0.5 / 255 + 1e-12
        assert np.abs(mem.tgt - disk.tgt).max() <= 0.5 / 255 + 1e-12
        assert np.array_equal(mem.mask, disk.mask)


def test_corrupt_mask_rejected(tmp_path):
    manifest = gen_corpus("style", 3, 2, tmp_path, style="frame")
    write_pgm(tmp_path / manifest[1]["mask"], np.zeros((16, 16)))
    with pytest.raises(DataError, match=manifest[1]["id"]):
        load_corpus(tmp_path)


def test_background_violation_rejected(tmp_path):
    manifest = gen_corpus("style", 2, 2, tmp_path, style="frame")
    mask = np.zeros((16, 16))
    mask[0, 0] = 1
    write_pgm(tmp_path / manifest[0]["mask"], mask)
    with pytest.raises(DataError, match="outside the edit mask"):
        load_corpus(tmp_path)


def test_empty_directory(tmp_path):
    with pytest.raises(DataError, match="no manifest"):
        load_corpus(tmp_path)


def test_missing_image_names_pair(tmp_path):
    manifest = gen_corpus("style", 2, 2, tmp_path, style="frame")
    (tmp_path / manifest[0]["tgt"]).unlink()
    with pytest.raises(DataError, match=manifest[0]["id"]):
        load_corpus(tmp_path)


def test_quantized_background_within_tolerance():
    for p in gen_pairs("general", 60, seed=11):
        q = EditPair(p.id, quantize(p.src), quantize(p.tgt), p.mask, p.instruction, p.style, p.seed)
        assert q.background_equal(1 / 255)


def test_bad_kind():
    with pytest.raises(ConfigError):
        gen_pairs("mixed", 2, 0)
    with pytest.raises(ConfigError):
        gen_pairs("style", 2, 0)
