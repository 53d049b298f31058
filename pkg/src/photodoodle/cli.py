"""``photodoodle`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .dataset import KINDS, gen_corpus, load_corpus
from .errors import ConfigError, DataError, PhotoDoodleError
from .lora import load_adapter, merge
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .pipeline import ABLATIONS, ExperimentConfig, SamplerConfig, TrainConfig, ablate, edit_image, evaluate, train_stage

log = logging.getLogger("photodoodle")


def _read_json(path):
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return data


def load_train_config(path, stage):
    """TrainConfig fields at top level, plus an optional ``model`` object."""
    data = _read_json(path) if path else {}
    model = ModelConfig.from_dict(data.pop("model", {}))
    if data.setdefault("stage", stage) != stage:
        raise ConfigError(f"config is for stage {data['stage']!r} but --stage is {stage!r}")
    return TrainConfig.from_dict(data), model


def cmd_gen_data(args):
    manifest = gen_corpus(args.kind, args.count, args.seed, args.out, style=args.style, H=args.height, W=args.width)
    print(f"wrote {len(manifest)} pairs to {args.out}")


def cmd_train(args):
    cfg, model = load_train_config(args.config, args.stage)
    corpus = load_corpus(args.data)
    res = train_stage(
        cfg, corpus, base=args.base, model_config=model, out=args.out,
        log_path=args.log or Path(str(args.out) + ".loss.tsv"),
        callback=lambda step, loss: step % 100 == 0 and log.info("step %d loss %.5f", step, loss),
    )
    last = res.losses[-1] if res.losses else float("nan")
    print(f"{cfg.stage}: {len(res.losses)} steps, final loss {last:.5f}, wrote {args.out}")


def cmd_merge(args):
    params = load_checkpoint(args.base)
    adapter = load_adapter(args.adapter, params)
    fp = save_checkpoint(merge(params, adapter), args.out)
    print(f"merged {args.adapter} into {args.base}: {args.out} ({fp})")


def cmd_edit(args):
    edit_image(args.base, args.adapter, args.src, args.instruction, args.steps, args.seed, args.out, args.trajectory)
    print(f"wrote {args.out}")


def cmd_eval(args):
    rep = evaluate(args.base, args.adapter, args.data, SamplerConfig(args.steps, args.seed), report=args.report)
    print(json.dumps(rep.aggregate, sort_keys=True))


def cmd_ablate(args):
    exp = ExperimentConfig.from_dict(_read_json(args.config)) if args.config else ExperimentConfig()
    res = ablate(args.mode, exp, args.report_dir, args.work_dir)
    print(json.dumps(res.delta, sort_keys=True, indent=2))


def build_parser():
    p = argparse.ArgumentParser(prog="photodoodle", description="Instruction-guided image editing at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a paired-edit corpus")
    g.add_argument("--kind", choices=KINDS, required=True)
    g.add_argument("--style", help="style name or number (style corpora)")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--height", type=int, default=16)
    g.add_argument("--width", type=int, default=16)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run the omni or edit stage")
    t.add_argument("--stage", choices=("omni", "edit"), required=True)
    t.add_argument("--config", help="JSON with TrainConfig fields and an optional 'model' object")
    t.add_argument("--data", required=True)
    t.add_argument("--base", help="merged omni checkpoint (edit stage)")
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="loss log path (default: <out>.loss.tsv)")
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("merge", help="fold an adapter into a checkpoint")
    m.add_argument("--base", required=True)
    m.add_argument("--adapter", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_merge)

    e = sub.add_parser("edit", help="edit one PPM image")
    e.add_argument("--base", required=True)
    e.add_argument("--adapter")
    e.add_argument("--src", required=True)
    e.add_argument("--instruction", required=True)
    e.add_argument("--steps", type=int, default=20)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.add_argument("--trajectory", help="directory for per-step PPM frames")
    e.set_defaults(func=cmd_edit)

    v = sub.add_parser("eval", help="score a model on a corpus")
    v.add_argument("--base", required=True)
    v.add_argument("--adapter")
    v.add_argument("--data", required=True)
    v.add_argument("--steps", type=int, default=20)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--report", required=True)
    v.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="full pipeline vs one ablated arm")
    a.add_argument("--mode", choices=ABLATIONS, required=True)
    a.add_argument("--config", help="experiment JSON: model, omni, edit, data, sampler")
    a.add_argument("--report-dir", required=True)
    a.add_argument("--work-dir")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except PhotoDoodleError as e:
        print(f"photodoodle {args.command}: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"photodoodle {args.command}: {e}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
