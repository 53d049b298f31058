"""Two-stage training, image editing, evaluation and ablation runs."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import numeric as nm
from ._io import atomic_write_text
from .codec import PatchCodec, Vocab, decode_tokens, encode_image, read_ppm, write_ppm
from .dataset import Corpus, corpus_checksum, default_vocab, gen_corpus, get_style, load_corpus, pair_seed, quantize
from .errors import CompatibilityError, ConfigError, DataError, NumericError, ShapeError
from .flow import FlowBatch, SamplerConfig, cfm_loss, euler_sample, sample_timesteps
from .lora import LoraAdapter, create_adapter, load_adapter, merge, save_adapter
from .model import ModelConfig, ModelParams, Weights, fingerprint, init_params, load_checkpoint, save_checkpoint
from .positional import TokenSeq, grid_positions

log = logging.getLogger(__name__)

STAGE_CORPUS = {"omni": "general", "edit": "style"}
# reference values from the two-stage recipe this package scales down
FULL_SCALE = {
    "omni": {"rank": 256, "batch_size": 128, "learning_rate": 1e-4, "steps": 330_000},
    "edit": {"rank": 128, "batch_size": 2, "learning_rate": 1e-4, "steps": 10_000},
}
PSNR_CAP = 100.0


def _from_dict(cls, data, what):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"bad {what}: {e}") from e


@dataclass
class TrainConfig:
    stage: str = "omni"
    steps: Optional[int] = None
    batch_size: Optional[int] = None
    learning_rate: float = 1e-4
    rank: Optional[int] = None
    alpha: Optional[float] = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    t_schedule: str = "uniform"
    allow_unmerged_base: bool = False

    DESK = {"omni": {"steps": 5000, "batch_size": 8, "rank": 16}, "edit": {"steps": 2000, "batch_size": 2, "rank": 4}}

    def __post_init__(self):
        if self.stage not in STAGE_CORPUS:
            raise ConfigError(f"stage must be 'omni' or 'edit', got {self.stage!r}")
        for key, val in self.DESK[self.stage].items():
            if getattr(self, key) is None:
                setattr(self, key, val)
        if self.steps < 0 or self.batch_size < 1 or self.rank < 1:
            raise ConfigError("steps must be >= 0, batch_size and rank >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")

    @classmethod
    def from_dict(cls, data):
        return _from_dict(cls, data, "train config")


class Adam:
    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params: dict, grads: dict):
        """Update ``params`` (name -> array) in place of the dict entries."""
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            upd = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            params[name] = (params[name] - upd).astype(params[name].dtype)


# ---------------------------------------------------------------- helpers


def codec_for(cfg: ModelConfig) -> PatchCodec:
    return PatchCodec(cfg.patch, cfg.channels, cfg.codec_seed).fit()


def vocab_for(params: ModelParams) -> Vocab:
    words = params.meta.get("vocab")
    if words:
        return Vocab(tuple(words), params.config.max_text_len)
    return default_vocab(params.config.max_text_len)


def _as_params(base) -> ModelParams:
    return base if isinstance(base, ModelParams) else load_checkpoint(base)


def _as_adapter(adapter, params) -> Optional[LoraAdapter]:
    if adapter is None or isinstance(adapter, LoraAdapter):
        return adapter
    return load_adapter(adapter, params)


def fresh_base(model_cfg: ModelConfig, vocab: Vocab, seed=0) -> ModelParams:
    cfg = dataclasses.replace(model_cfg, vocab_size=len(vocab), max_text_len=vocab.max_len)
    params = init_params(cfg, seed)
    params.meta["vocab"] = list(vocab.words)
    return params


@dataclass
class TrainingData:
    x: np.ndarray  # target tokens [n, N, T]
    c: np.ndarray  # source tokens [n, N, T]
    ids: np.ndarray  # [n, M]
    positions: np.ndarray  # condition grid [N, 2]

    @classmethod
    def build(cls, pairs, params: ModelParams):
        if not len(pairs):
            raise DataError("training corpus is empty")
        codec = codec_for(params.config)
        vocab = vocab_for(params)
        dt = params.dtype
        src = np.stack([p.src for p in pairs]).astype(dt)
        tgt = np.stack([p.tgt for p in pairs]).astype(dt)
        grid = codec.grid(src.shape[1:])
        return cls(
            codec.transform(tgt).astype(dt),
            codec.transform(src).astype(dt),
            np.stack([vocab.ids(p.instruction) for p in pairs]),
            grid_positions(*grid),
        )


@dataclass
class StageResult:
    params: ModelParams
    adapter: Optional[LoraAdapter]
    losses: list
    seconds: float = 0.0


def has_omni_merge(params: ModelParams) -> bool:
    return any(e.get("stage") == "omni" for e in params.meta.get("lineage", []))


def train_stage(
    config: TrainConfig,
    corpus,
    base=None,
    model_config: ModelConfig = None,
    out=None,
    log_path=None,
    callback: Callable = None,
) -> StageResult:
    """Run one training stage.

    ``omni``: base weights and a high-rank adapter are trained together on a
    general corpus, then the adapter is merged; the merged weights are returned
    (and written to ``out``). ``edit``: the base is frozen and only a low-rank
    adapter is trained on a single-style corpus (written to ``out``).
    """
    t0 = time.perf_counter()
    kind = getattr(corpus, "kind", None)
    if kind is not None and kind != STAGE_CORPUS[config.stage]:
        raise DataError(f"stage {config.stage!r} needs a {STAGE_CORPUS[config.stage]} corpus, got {kind!r}")
    vocab = getattr(corpus, "vocab", None) or default_vocab()
    if base is None:
        if config.stage == "edit" and not config.allow_unmerged_base:
            raise CompatibilityError("edit stage needs a merged omni checkpoint as base")
        params = fresh_base(model_config or ModelConfig(), vocab, config.seed)
    else:
        params = _as_params(base).copy()
    if config.stage == "edit" and not config.allow_unmerged_base and not has_omni_merge(params):
        raise CompatibilityError("base checkpoint carries no omni merge; pass allow_unmerged_base for the no-pretrain ablation")

    data = TrainingData.build(list(corpus), params)
    adapter = create_adapter(params, rank=config.rank, alpha=config.alpha, seed=config.seed + 1, stage=config.stage)
    train_base = config.stage == "omni"
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng(config.seed)
    n = len(data.x)
    losses = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for step in range(1, config.steps + 1):
            idx = rng.integers(n, size=config.batch_size)
            eps = rng.standard_normal(data.x[idx].shape).astype(params.dtype)
            t = sample_timesteps(rng, config.batch_size, config.t_schedule)
            batch = FlowBatch(data.x[idx], data.c[idx], data.ids[idx], eps, t, data.positions)
            tape = nm.Tape()
            w = Weights(params, tape, train_base=train_base, adapter=adapter, train_adapter=True)
            loss = cfm_loss(w, batch)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at step {step}")
            grads = nm.grad(tape, loss)
            if train_base:
                opt.step(params.tensors, {k: grads[k] for k in params.tensors})
            flat = {}
            for target, (A, B) in adapter.entries.items():
                flat[f"lora.{target}.A"], flat[f"lora.{target}.B"] = A, B
            opt.step(flat, {k: grads[k] for k in flat})
            adapter.entries = {t_: (flat[f"lora.{t_}.A"], flat[f"lora.{t_}.B"]) for t_ in adapter.entries}
            losses.append(value)
            if log_fh:
                log_fh.write(f"{step}\t{value:.8g}\n")
            if callback:
                callback(step, value)
            if out and config.checkpoint_every and step % config.checkpoint_every == 0 and step < config.steps:
                _write_stage(config, params, adapter, out)
    finally:
        if log_fh:
            log_fh.close()

    if train_base:
        # base and adapter were trained together; bind the adapter to the final base
        adapter.base_fingerprint = fingerprint(params)
        params = merge(params, adapter)
        result = StageResult(params, None, losses)
    else:
        result = StageResult(params, adapter, losses)
    if out:
        _write_stage(config, result.params, result.adapter or adapter, out, final=True)
    result.seconds = time.perf_counter() - t0
    return result


def _write_stage(config, params, adapter, out, final=False):
    if config.stage == "omni":
        if final:
            save_checkpoint(params, out)
        else:
            snap = params.copy()
            adapter = adapter.copy()
            adapter.base_fingerprint = fingerprint(snap)
            save_checkpoint(merge(snap, adapter), out)
    else:
        save_adapter(adapter, out)


# ---------------------------------------------------------------- inference


def edit_array(params: ModelParams, adapter, src, instruction: str, sampler: SamplerConfig, trajectory_dir=None):
    """Edited image in [0, 1] for one source image ``[H, W, C]``.

    With ``trajectory_dir`` every intermediate latent is decoded to
    ``step_000.ppm`` ... ``step_K.ppm``.
    """
    codec = codec_for(params.config)
    src = np.asarray(src)
    try:
        c_I = encode_image(codec, src.astype(params.dtype))
    except ShapeError as e:
        raise ShapeError(f"source image does not fit the checkpoint's patch size: {e}") from e
    ids = vocab_for(params).ids(instruction)
    if trajectory_dir is not None:
        sampler = dataclasses.replace(sampler, record_trajectory=True)
    res = euler_sample(params, c_I, ids, sampler, adapter=adapter, return_details=True)
    if trajectory_dir is not None:
        Path(trajectory_dir).mkdir(parents=True, exist_ok=True)
        for k, z in enumerate(res.trajectory):
            img = decode_tokens(codec, TokenSeq(z, c_I.positions, "latent"))
            write_ppm(Path(trajectory_dir) / f"step_{k:03d}.ppm", np.clip(img, 0.0, 1.0))
    out = decode_tokens(codec, TokenSeq(res.latent.tokens, c_I.positions, "latent"))
    return np.clip(out, 0.0, 1.0)


def edit_image(base, adapter, src, instruction, steps=20, seed=0, out=None, trajectory_dir=None) -> np.ndarray:
    """Edit one image. ``base``/``adapter``/``src`` may be paths or loaded objects.

    The adapter is attached at run time, not merged.
    """
    params = _as_params(base)
    adapter = _as_adapter(adapter, params)
    img = read_ppm(src) if isinstance(src, (str, Path)) else np.asarray(src, dtype=np.float64)
    result = edit_array(params, adapter, img, instruction, SamplerConfig(steps, seed), trajectory_dir)
    if out is not None:
        write_ppm(out, result)
    return result


# ---------------------------------------------------------------- evaluation


def masked_mse(a, b, mask):
    m = np.asarray(mask) > 0.5
    if not m.any():
        return None
    diff = np.asarray(a, dtype=np.float64)[m] - np.asarray(b, dtype=np.float64)[m]
    return float(np.mean(diff * diff))


def psnr(mse_value):
    if mse_value is None:
        return None
    if mse_value <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse_value))


def pair_metrics(out, pair) -> dict:
    bg = masked_mse(out, pair.src, 1.0 - pair.mask)
    return {
        "id": pair.id,
        "background_mse": bg,
        "edit_mse": masked_mse(out, pair.tgt, pair.mask),
        "background_psnr": psnr(bg),
    }


def _mean(rows, key):
    vals = [r[key] for r in rows if r.get(key) is not None]
    return float(np.mean(vals)) if vals else None


def aggregate(rows) -> dict:
    return {k: _mean(rows, k) for k in ("background_mse", "edit_mse", "background_psnr")} | {
        "pairs": len(rows),
        "failed": sum(1 for r in rows if "error" in r),
    }


@dataclass
class EvalReport:
    pairs: list
    aggregate: dict
    identity_baseline: dict
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    def write(self, path):
        atomic_write_text(path, self.to_json())


def evaluate(base, adapter, corpus, sampler: SamplerConfig = None, report=None, editor: Callable = None) -> EvalReport:
    """Edit every pair's source with its instruction and score against the ground truth.

    ``editor(pair, index) -> image`` replaces the model (used for baselines).
    Outputs are quantized to 8 bits exactly as a written PPM would be.
    """
    sampler = sampler or SamplerConfig()
    corpus_dir = None
    if isinstance(corpus, (str, Path)):
        corpus_dir = corpus
        corpus = load_corpus(corpus)
    meta = {"sampler": asdict(sampler)}
    if corpus_dir is not None:
        meta["corpus_checksum"] = corpus_checksum(corpus_dir)
    if editor is None:
        params = _as_params(base)
        adapter = _as_adapter(adapter, params)
        meta["base_fingerprint"] = fingerprint(params)
        meta["adapter_fingerprint"] = None if adapter is None else adapter.base_fingerprint
        meta["adapter_rank"] = None if adapter is None else adapter.rank
        meta["config"] = asdict(params.config)

        def editor(pair, i):
            cfg = SamplerConfig(sampler.steps, pair_seed(sampler.seed, i))
            return edit_array(params, adapter, pair.src, pair.instruction, cfg)

    rows = []
    for i, pair in enumerate(corpus):
        try:
            out = quantize(editor(pair, i))
            rows.append(pair_metrics(out, pair))
        except (DataError, ConfigError, NumericError) as e:
            rows.append({"id": pair.id, "error": str(e), "background_mse": None, "edit_mse": None, "background_psnr": None})
    identity = aggregate([pair_metrics(pair.src, pair) for pair in corpus])
    rep = EvalReport(rows, aggregate(rows), identity, meta)
    if report is not None:
        rep.write(report)
    return rep


# ---------------------------------------------------------------- experiments


@dataclass
class DataConfig:
    style: str = "frame"
    general_count: int = 2000
    style_count: int = 50
    heldout_count: int = 20
    seed: int = 0
    height: int = 16
    width: int = 16

    @classmethod
    def from_dict(cls, data):
        return _from_dict(cls, data, "data config")


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    omni: TrainConfig = field(default_factory=lambda: TrainConfig("omni"))
    edit: TrainConfig = field(default_factory=lambda: TrainConfig("edit"))
    data: DataConfig = field(default_factory=DataConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - {"model", "omni", "edit", "data", "sampler"}
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        omni = dict(data.get("omni", {}), stage="omni")
        edit = dict(data.get("edit", {}), stage="edit")
        try:
            model = ModelConfig.from_dict(data.get("model", {}))
        except TypeError as e:
            raise ConfigError(f"bad model config: {e}") from e
        return cls(
            model,
            TrainConfig.from_dict(omni),
            TrainConfig.from_dict(edit),
            DataConfig.from_dict(data.get("data", {})),
            _from_dict(SamplerConfig, data.get("sampler", {}), "sampler config"),
        )

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e


def prepare_corpora(data: DataConfig, root) -> dict:
    """Generate (or reuse) the general, style and held-out corpora under ``root``."""
    root = Path(root)
    specs = {
        "general": ("general", data.general_count, data.seed, None),
        "style": ("style", data.style_count, data.seed + 1, data.style),
        "heldout": ("style", data.heldout_count, data.seed + 2, data.style),
    }
    dirs = {}
    for name, (kind, count, seed, style) in specs.items():
        d = root / name
        if not (d / "manifest.jsonl").is_file():
            gen_corpus(kind, count, seed, d, style=style, H=data.height, W=data.width)
        dirs[name] = d
    return dirs


@dataclass
class PipelineRun:
    base: Path
    adapter: Path
    omni_losses: list
    edit_losses: list
    seconds: dict
    corpora: dict


def run_pipeline(exp: ExperimentConfig, work_dir, pe_clone=True, pretrain=True, tag="full") -> PipelineRun:
    """Omni stage, merge, then EditLoRA stage; artifacts land in ``work_dir/tag``."""
    work = Path(work_dir)
    corpora = prepare_corpora(exp.data, work / "data")
    arm = work / tag
    arm.mkdir(parents=True, exist_ok=True)
    model_cfg = dataclasses.replace(exp.model, pe_clone=pe_clone)
    seconds = {}
    if pretrain:
        log.info("[%s] omni stage: %d steps", tag, exp.omni.steps)
        omni = train_stage(
            exp.omni, load_corpus(corpora["general"]), model_config=model_cfg,
            out=arm / "omni.ckpt", log_path=arm / "omni_loss.tsv",
        )
        base, omni_losses, seconds["omni"] = omni.params, omni.losses, omni.seconds
    else:
        vocab = load_corpus(corpora["style"]).vocab
        base = fresh_base(model_cfg, vocab, exp.omni.seed)
        save_checkpoint(base, arm / "omni.ckpt")
        omni_losses, seconds["omni"] = [], 0.0
    edit_cfg = dataclasses.replace(exp.edit, allow_unmerged_base=not pretrain)
    log.info("[%s] edit stage: %d steps", tag, edit_cfg.steps)
    edit = train_stage(
        edit_cfg, load_corpus(corpora["style"]), base=base,
        out=arm / "edit.lora", log_path=arm / "edit_loss.tsv",
    )
    seconds["edit"] = edit.seconds
    return PipelineRun(arm / "omni.ckpt", arm / "edit.lora", omni_losses, edit.losses, seconds, corpora)


ABLATIONS = ("no-pe-clone", "no-pretrain", "no-editlora")


@dataclass
class AblationResult:
    mode: str
    full: EvalReport
    ablated: EvalReport
    delta: dict


def ablate(mode, exp: ExperimentConfig, report_dir, work_dir=None, full: PipelineRun = None) -> AblationResult:
    """Full pipeline vs one ablated arm under shared seeds and corpora.

    Writes ``full.json``, ``<mode>.json`` and ``delta.json`` into ``report_dir``.
    A finished full-arm :class:`PipelineRun` may be passed in to reuse it.
    """
    if mode not in ABLATIONS:
        raise ConfigError(f"ablation mode must be one of {ABLATIONS}, got {mode!r}")
    report_dir = Path(report_dir)
    work = Path(work_dir) if work_dir else report_dir / "work"
    if full is None:
        full = run_pipeline(exp, work)
    heldout = full.corpora["heldout"]
    full_rep = evaluate(full.base, full.adapter, heldout, exp.sampler)
    if mode == "no-editlora":
        abl_rep = evaluate(full.base, None, heldout, exp.sampler)
    else:
        arm = run_pipeline(
            exp, work, pe_clone=mode != "no-pe-clone", pretrain=mode != "no-pretrain", tag=mode
        )
        abl_rep = evaluate(arm.base, arm.adapter, heldout, exp.sampler)
    delta = {
        k: (None if full_rep.aggregate[k] is None or abl_rep.aggregate[k] is None
            else abl_rep.aggregate[k] - full_rep.aggregate[k])
        for k in ("background_mse", "edit_mse", "background_psnr")
    }
    summary = {
        "mode": mode,
        "full": full_rep.aggregate,
        "ablated": abl_rep.aggregate,
        "delta": delta,
        "corpus_checksums": {
            "full": full_rep.metadata.get("corpus_checksum"),
            "ablated": abl_rep.metadata.get("corpus_checksum"),
        },
    }
    report_dir.mkdir(parents=True, exist_ok=True)
    full_rep.write(report_dir / "full.json")
    abl_rep.write(report_dir / f"{mode}.json")
    atomic_write_text(report_dir / "delta.json", json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return AblationResult(mode, full_rep, abl_rep, summary)
