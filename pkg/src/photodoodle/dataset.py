"""Procedural before/after edit pairs with exact edit masks.

Scenes are a two-colour linear gradient with 1-3 hard-edged shapes whose
visible pixel sets are recorded, so every edit knows precisely which pixels it
touched. Six edit styles are provided; a *signature* variant of each fixes the
colour and thickness choices and drops the colour word from the instruction,
playing the part of one artist's habits.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .codec import Vocab, read_pgm, read_ppm, to_uint8, tokenize, write_pgm, write_ppm
from .errors import ConfigError, DataError

PALETTE = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.75, 0.2),
    "blue": (0.1, 0.2, 0.9),
    "yellow": (0.95, 0.85, 0.1),
    "cyan": (0.1, 0.85, 0.9),
    "magenta": (0.85, 0.1, 0.8),
    "orange": (1.0, 0.55, 0.0),
    "purple": (0.5, 0.1, 0.7),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
}
COLOR_NAMES = tuple(PALETTE)
SHAPE_KINDS = ("rectangle", "disk", "triangle")
MAX_RETRIES = 32


class StyleNotApplicable(DataError):
    """The scene lacks what the style needs (e.g. a disk for the halo)."""


@dataclass
class Shape:
    kind: str
    color: str
    geometry: dict
    mask: np.ndarray  # visible pixels after occlusion

    @property
    def area(self):
        return int(self.mask.sum())

    def bbox(self):
        ys, xs = np.nonzero(self.mask)
        return int(ys.min()), int(ys.max()), int(xs.min()), int(xs.max())


@dataclass
class Scene:
    image: np.ndarray
    shapes: list
    seed: int


@dataclass
class EditPair:
    id: str
    src: np.ndarray
    tgt: np.ndarray
    mask: np.ndarray
    instruction: str
    style: str
    seed: int

    def background_equal(self, tol=0.0):
        bg = self.mask < 0.5
        return bool(np.all(np.abs(self.src[bg] - self.tgt[bg]) <= tol))


# ---------------------------------------------------------------- scenes


def _shape_pixels(kind, rng, H, W, yy, xx):
    if kind == "rectangle":
        h = int(rng.integers(3, max(4, H // 2) + 1))
        w = int(rng.integers(3, max(4, W // 2) + 1))
        y0 = int(rng.integers(0, H - h + 1))
        x0 = int(rng.integers(0, W - w + 1))
        geo = {"y0": y0, "x0": x0, "h": h, "w": w}
        return (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w), geo
    if kind == "disk":
        r = float(rng.integers(2, max(3, min(H, W) // 4) + 1))
        cy = float(rng.integers(int(r), H - int(r)))
        cx = float(rng.integers(int(r), W - int(r)))
        geo = {"cy": cy, "cx": cx, "r": r}
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r, geo
    # triangle: three vertices, inside by same-sign edge functions on pixel centres
    pts = np.stack([rng.uniform(0, H - 1, 3), rng.uniform(0, W - 1, 3)], axis=1)
    (y0, x0), (y1, x1), (y2, x2) = pts
    e0 = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
    e1 = (x2 - x1) * (yy - y1) - (y2 - y1) * (xx - x1)
    e2 = (x0 - x2) * (yy - y2) - (y0 - y2) * (xx - x2)
    inside = ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))
    return inside, {"vertices": pts.round(6).tolist()}


def gen_scene(seed, H=16, W=16) -> Scene:
    """Deterministic gradient background plus 1-3 solid shapes."""
    rng = np.random.default_rng([int(seed), 0x5CE0E])
    for _ in range(MAX_RETRIES):
        yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
        c0, c1 = rng.random(3), rng.random(3)
        angle = rng.uniform(0, 2 * np.pi)
        proj = np.cos(angle) * yy / max(H - 1, 1) + np.sin(angle) * xx / max(W - 1, 1)
        span = proj.max() - proj.min()
        ramp = (proj - proj.min()) / (span if span > 0 else 1.0)
        img = c0 * (1 - ramp[..., None]) + c1 * ramp[..., None]
        shapes = []
        occupied = np.zeros((H, W), dtype=bool)
        for _ in range(int(rng.integers(1, 4))):
            kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
            color = COLOR_NAMES[int(rng.integers(len(COLOR_NAMES)))]
            pix, geo = _shape_pixels(kind, rng, H, W, yy, xx)
            for s in shapes:
                s.mask &= ~pix
            img[pix] = PALETTE[color]
            occupied |= pix
            shapes.append(Shape(kind, color, geo, pix.copy()))
        if all(s.area >= 3 for s in shapes) and not occupied.all():
            return Scene(img, shapes, int(seed))
    raise DataError(f"could not build a valid scene for seed {seed}")


# ---------------------------------------------------------------- styles


def _pick_color(rng, avoid_pixels, exclude=()):
    """Random palette colour that differs from every pixel in ``avoid_pixels``."""
    for idx in rng.permutation(len(COLOR_NAMES)):
        name = COLOR_NAMES[idx]
        if name in exclude:
            continue
        if not np.any(np.all(avoid_pixels == PALETTE[name], axis=-1)):
            return name
    raise StyleNotApplicable("no palette colour differs from the edited pixels")


def _largest(shapes, kind=None):
    cands = [s for s in shapes if kind is None or s.kind == kind]
    if not cands:
        raise StyleNotApplicable(f"scene has no {kind}")
    return max(cands, key=lambda s: s.area)


def _dilate4(mask):
    out = mask.copy()
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def _paint(scene, mask, color):
    tgt = scene.image.copy()
    tgt[mask] = PALETTE[color]
    return tgt


def _outline(scene, rng, signature):
    shape = _largest(scene.shapes)
    contour = _dilate4(shape.mask) & ~shape.mask
    if not contour.any():
        raise StyleNotApplicable("largest shape has no outer contour inside the image")
    color = "black" if signature else _pick_color(rng, scene.image[contour])
    text = f"draw outline around the {shape.kind}" if signature else f"draw {color} outline around the {shape.kind}"
    return _paint(scene, contour, color), contour, text


def _frame(scene, rng, signature, k=None):
    H, W = scene.image.shape[:2]
    if k is None:
        k = 1 if signature else int(rng.integers(1, 3))
    mask = np.zeros((H, W), dtype=bool)
    mask[:k] = mask[-k:] = True
    mask[:, :k] = mask[:, -k:] = True
    if signature:
        return _paint(scene, mask, "orange"), mask, "add frame"
    color = _pick_color(rng, scene.image[mask])
    text = f"add {color} frame" if k == 1 else f"add thick {color} frame"
    return _paint(scene, mask, color), mask, text


def _recolor(scene, rng, signature):
    keys = [(s.color, s.kind) for s in scene.shapes]
    unique = [s for s in scene.shapes if keys.count((s.color, s.kind)) == 1]
    if not unique:
        raise StyleNotApplicable("no uniquely named shape to recolor")
    shape = unique[int(rng.integers(len(unique)))]
    if signature:
        color = "purple" if shape.color != "purple" else "cyan"
        text = f"recolor the {shape.color} {shape.kind}"
    else:
        color = _pick_color(rng, scene.image[shape.mask], exclude=(shape.color,))
        text = f"make the {shape.color} {shape.kind} {color}"
    return _paint(scene, shape.mask, color), shape.mask.copy(), text


def _sparkle(scene, rng, signature):
    H, W = scene.image.shape[:2]
    shape = scene.shapes[int(rng.integers(len(scene.shapes)))]
    y0, y1, x0, x1 = shape.bbox()
    y0, x0 = max(0, y0 - 2), max(0, x0 - 2)
    y1, x1 = min(H - 1, y1 + 2), min(W - 1, x1 + 2)
    mask = np.zeros((H, W), dtype=bool)
    n = 5 if signature else int(rng.integers(3, 7))
    mask[rng.integers(y0, y1 + 1, n), rng.integers(x0, x1 + 1, n)] = True
    if mask.all():
        raise StyleNotApplicable("sparkles cover the whole image")
    color = "yellow" if signature else _pick_color(rng, scene.image[mask])
    text = f"add sparkles near the {shape.kind}" if signature else f"add {color} sparkles near the {shape.kind}"
    return _paint(scene, mask, color), mask, text


def _mono_block(scene, rng, signature):
    gray = scene.image @ np.array([0.299, 0.587, 0.114])
    tgt = np.repeat(gray[..., None], 3, axis=-1)
    shape = scene.shapes[int(rng.integers(len(scene.shapes)))]
    y0, y1, x0, x1 = shape.bbox()
    color = "red" if signature else COLOR_NAMES[int(rng.integers(len(COLOR_NAMES)))]
    tgt[y0 : y1 + 1, x0 : x1 + 1] = PALETTE[color]
    mask = np.ones(gray.shape, dtype=bool)
    if signature:
        text = f"make photo monochrome with block on {shape.kind}"
    else:
        text = f"make photo monochrome with {color} block on {shape.kind}"
    return tgt, mask, text


def _halo(scene, rng, signature):
    disk = _largest(scene.shapes, "disk")
    H, W = scene.image.shape[:2]
    yy, xx = np.mgrid[0:H, 0:W]
    g = disk.geometry
    dist = np.sqrt((yy - g["cy"]) ** 2 + (xx - g["cx"]) ** 2)
    ring = (dist > g["r"] + 0.5) & (dist <= g["r"] + 1.5)
    if not ring.any():
        raise StyleNotApplicable("halo ring falls outside the image")
    color = "white" if signature else _pick_color(rng, scene.image[ring])
    text = "add halo around the disk" if signature else f"add {color} halo around the disk"
    return _paint(scene, ring, color), ring, text


@dataclass(frozen=True)
class StyleSpec:
    id: str
    number: int
    procedure: Callable = field(repr=False)
    templates: tuple = ()
    needs_disk: bool = False
    full_mask: bool = False

    @property
    def words(self):
        out = []
        for t in self.templates:
            for w in tokenize(t):
                if w == "{color}":
                    out.extend(COLOR_NAMES)
                elif w == "{kind}":
                    out.extend(SHAPE_KINDS)
                else:
                    out.append(w)
        return out


STYLES = {
    s.id: s
    for s in (
        StyleSpec(
            "outline", 1, _outline,
            ("draw {color} outline around the {kind}", "draw outline around the {kind}"),
        ),
        StyleSpec("frame", 2, _frame, ("add {color} frame", "add thick {color} frame", "add frame")),
        StyleSpec("recolor", 3, _recolor, ("make the {color} {kind} {color}", "recolor the {color} {kind}")),
        StyleSpec(
            "sparkle", 4, _sparkle,
            ("add {color} sparkles near the {kind}", "add sparkles near the {kind}"),
        ),
        StyleSpec(
            "mono_block", 5, _mono_block,
            ("make photo monochrome with {color} block on {kind}", "make photo monochrome with block on {kind}"),
            full_mask=True,
        ),
        StyleSpec("halo", 6, _halo, ("add {color} halo around the disk", "add halo around the disk"), needs_disk=True),
    )
}


def get_style(key) -> StyleSpec:
    """Look a style up by name (``"frame"``) or number (``2`` / ``"2"``)."""
    if isinstance(key, StyleSpec):
        return key
    for s in STYLES.values():
        if str(key) in (s.id, str(s.number)):
            return s
    raise ConfigError(f"unknown style {key!r}; choose from {list(STYLES)} or 1-6")


def default_vocab(max_len=8) -> Vocab:
    words = []
    for s in STYLES.values():
        words.extend(s.words)
    return Vocab.build(words, max_len)


def apply_style(style, scene: Scene, seed, signature=False, pair_id=None) -> EditPair:
    style = get_style(style)
    rng = np.random.default_rng([int(seed), style.number])
    tgt, mask, text = style.procedure(scene, rng, signature)
    mask = mask.astype(np.float64)
    if not mask.any():
        raise StyleNotApplicable("edit touched no pixels")
    if not style.full_mask and mask.all():
        raise StyleNotApplicable("edit covered the whole image")
    return EditPair(pair_id or f"{style.id}-{seed}", scene.image, tgt, mask, text, style.id, int(seed))


def gen_pair(style, seed, H=16, W=16, signature=False, pair_id=None) -> EditPair:
    """Scene + edit; resamples the scene when the style cannot apply to it."""
    style = get_style(style)
    last = None
    for attempt in range(MAX_RETRIES):
        scene = gen_scene(int(seed) * MAX_RETRIES + attempt, H, W)
        try:
            return apply_style(style, scene, seed, signature, pair_id)
        except StyleNotApplicable as e:
            last = e
    raise DataError(f"style {style.id!r} could not be applied for seed {seed}: {last}")


# ---------------------------------------------------------------- corpora


KINDS = ("general", "style")


def pair_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, dtype=np.uint32)[0])


def gen_pairs(kind, count, seed, style=None, H=16, W=16):
    """In-memory corpus: ``general`` mixes all styles; ``style`` uses one style's signature variant."""
    if kind not in KINDS:
        raise ConfigError(f"corpus kind must be one of {KINDS}, got {kind!r}")
    if kind == "style" and style is None:
        raise ConfigError("a style corpus needs a style")
    names = list(STYLES)
    pairs = []
    for i in range(count):
        ps = pair_seed(seed, i)
        if kind == "general":
            sty = names[ps % len(names)]
            signature = False
        else:
            sty = get_style(style).id
            signature = True
        pairs.append(gen_pair(sty, ps, H, W, signature, pair_id=f"{kind}-s{seed}-{i:05d}"))
    return pairs


@dataclass
class Corpus:
    pairs: list
    vocab: Vocab
    kind: str
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]


def gen_corpus(kind, count, seed, out_dir, style=None, H=16, W=16, max_len=8) -> list[dict]:
    """Write a corpus directory; returns the manifest entries."""
    pairs = gen_pairs(kind, count, seed, style, H, W)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        vocab = default_vocab(max_len)
        vocab.save(out / "vocab.txt")
        manifest = []
        for p in pairs:
            entry = {
                "id": p.id,
                "style": p.style,
                "instruction": p.instruction,
                "src": f"{p.id}_src.ppm",
                "tgt": f"{p.id}_tgt.ppm",
                "mask": f"{p.id}_mask.pgm",
                "seed": p.seed,
            }
            write_ppm(out / entry["src"], p.src)
            write_ppm(out / entry["tgt"], p.tgt)
            write_pgm(out / entry["mask"], p.mask)
            manifest.append(entry)
        lines = "".join(json.dumps(e, sort_keys=True) + "\n" for e in manifest)
        (out / "manifest.jsonl").write_text(lines, encoding="utf-8")
        info = {"kind": kind, "style": None if style is None else get_style(style).id,
                "count": count, "seed": seed, "height": H, "width": W, "max_len": max_len}
        (out / "corpus.json").write_text(json.dumps(info, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot write corpus to {getattr(e, 'filename', out)}: {e}") from e
    return manifest


def validate_pair(p: EditPair, tol=1.0 / 255 + 1e-9):
    if p.mask.shape != p.src.shape[:2] or p.src.shape != p.tgt.shape:
        raise DataError(f"pair {p.id}: image/mask shapes disagree")
    if not p.mask.any():
        raise DataError(f"pair {p.id}: mask marks no edited pixel")
    if not get_style(p.style).full_mask and p.mask.all():
        raise DataError(f"pair {p.id}: mask marks every pixel as edited")
    if not p.background_equal(tol):
        raise DataError(f"pair {p.id}: source and target differ outside the edit mask")


def load_corpus(path) -> Corpus:
    root = Path(path)
    manifest = root / "manifest.jsonl"
    if not manifest.is_file():
        raise DataError(f"no manifest in {root}")
    info_path = root / "corpus.json"
    info = json.loads(info_path.read_text(encoding="utf-8")) if info_path.is_file() else {}
    vocab = Vocab.load(root / "vocab.txt", info.get("max_len", 8))
    pairs = []
    for n, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            e = json.loads(line)
            pid = e["id"]
        except (ValueError, KeyError) as err:
            raise DataError(f"{manifest}:{n}: malformed manifest line") from err
        try:
            p = EditPair(
                pid, read_ppm(root / e["src"]), read_ppm(root / e["tgt"]), read_pgm(root / e["mask"]),
                e["instruction"], e["style"], int(e["seed"]),
            )
        except KeyError as err:
            raise DataError(f"pair {pid}: manifest entry lacks {err}") from err
        except DataError as err:
            raise DataError(f"pair {pid}: {err}") from err
        validate_pair(p)
        pairs.append(p)
    return Corpus(pairs, vocab, info.get("kind", "general"), info)


def corpus_checksum(path) -> str:
    """SHA-256 over the manifest and every file it references, in manifest order."""
    root = Path(path)
    h = hashlib.sha256()
    text = (root / "manifest.jsonl").read_bytes()
    h.update(text)
    for line in text.decode("utf-8").splitlines():
        if line.strip():
            e = json.loads(line)
            for key in ("src", "tgt", "mask"):
                h.update((root / e[key]).read_bytes())
    return h.hexdigest()


def quantize(img):
    return to_uint8(img).astype(np.float64) / 255.0
