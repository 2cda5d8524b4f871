"""Command-line entry point: ``asgl {synth,preprocess,train,embed,eval,check}``.

Every command that writes outputs also writes ``run_config.json`` next to
them with the fully resolved settings. Errors are reported as
``error[CODE]: message`` on stderr with exit status 1.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as tn
from .errors import ASGLError, ConfigError, DataError
from .evaluate import PROTOCOLS, embed_gallery, evaluate_model, write_cmc_csv, write_report
from .pose import (SPLITS, load_dataset, read_store, write_appearance, write_keypoints, write_manifest,
                   write_store)
from .synth import default_spec, generate, load_spec, twin_spec
from .trainer import TrainConfig, load_checkpoint, model_from_checkpoint, train

log = logging.getLogger("asgl")

# flag name -> TrainConfig field
OVERRIDES = {
    "seed": "seed", "epochs": "epochs", "lr": "lr", "lambda1": "lambda1", "lambda2": "lambda2",
    "clip_len": "clip_len", "stride": "stride", "mode": "mode", "heads": "heads", "partition_d": "partition_d",
}


# ---------------------------------------------------------------- config

def _parse_value(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.replace(" ", "").strip("[]()").split(",") if v)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def parse_config_text(text, source="<config>"):
    """Flat ``key = value`` lines into a dict of TrainConfig fields.

    ``#`` starts a comment. Unknown or repeated keys are errors.
    """
    defaults = {f.name: f.default for f in dataclasses.fields(TrainConfig)}
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in defaults:
            raise ConfigError(f"{source}: line {n}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}: line {n}: {key!r} given twice")
        out[key] = _parse_value(key, value, defaults[key])
    return out


def resolve_config(args, base=None):
    """TrainConfig from (checkpoint/base values) < config file < --set < named flags."""
    values = dict(base or {})
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from exc
        values.update(parse_config_text(text, args.config))
    for item in getattr(args, "set", None) or []:
        values.update(parse_config_text(item, "--set"))
    for flag, key in OVERRIDES.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in values.items() if k in known})


def write_provenance(out_dir, command, config=None, **extra):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = dict(command=command, version=__version__, **extra)
    if config is not None:
        doc["config"] = config.to_dict() if hasattr(config, "to_dict") else config
        if hasattr(config, "seed"):
            doc["seed"] = config.seed
    with open(out_dir / "run_config.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- data

def _load_splits(args):
    """Normalized tracklets per split from a store dir or raw keypoint files."""
    if getattr(args, "data", None):
        splits = {s: [] for s in SPLITS}
        for tr, split in read_store(args.data):
            splits[split].append(tr)
        return splits
    if not (args.keypoints and args.manifest):
        raise ConfigError("give --data STORE or both --keypoints and --manifest")
    return load_dataset(args.keypoints, args.manifest, args.appearance)


def _inputs(args):
    return {k: str(getattr(args, k)) for k in ("data", "keypoints", "manifest", "appearance", "checkpoint")
            if getattr(args, k, None)}


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    if args.spec:
        spec = load_spec(args.spec)
    else:
        kw = dict(tracklets_per_identity=args.tracklets, heldout_per_identity=args.heldout,
                  clothing_variants=args.clothing, frames=args.frames, noise=args.noise,
                  appearance_noise=args.appearance_noise, appearance_identity=args.appearance_identity)
        if args.twins:
            spec = twin_spec(args.identities // 2, seed=args.seed, **kw)
        else:
            spec = default_spec(args.identities, seed=args.seed, **kw)
    sequences, manifest, appearance = generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_keypoints(out / "keypoints.jsonl", sequences)
    write_manifest(out / "manifest.jsonl", manifest)
    write_appearance(out / "appearance.jsonl", appearance)
    with open(out / "synth_spec.json", "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_provenance(out, "synth", spec)
    print(f"wrote {len(sequences)} tracklets of {len(spec.identities)} identities to {out}")
    return 0


def cmd_preprocess(args):
    splits = load_dataset(args.keypoints, args.manifest, args.appearance)
    items = [(tr, s) for s in SPLITS for tr in splits[s]]
    if not items:
        log.warning("manifest lists no tracklets; writing an empty store")
    write_store(args.out, items)
    write_provenance(args.out, "preprocess", inputs=_inputs(args))
    print(f"wrote {len(items)} tracklets to {args.out}")
    return 0


def cmd_train(args):
    config = resolve_config(args)
    splits = _load_splits(args)
    out = Path(args.out)
    write_provenance(out, "train", config, inputs=_inputs(args))
    result = train(config, splits["train"], out_dir=out)
    final = result.epoch_losses[-1] if result.epoch_losses else float("nan")
    print(f"trained {len(result.epoch_losses)} epochs ({len(result.step_losses)} steps), final loss {final:.6f}")
    return 0


def _eval_setup(args):
    ckpt = load_checkpoint(args.checkpoint)
    trained = {k: (tuple(v) if isinstance(v, list) else v) for k, v in ckpt.meta.get("train_config", {}).items()}
    config = resolve_config(args, base=trained)
    model = model_from_checkpoint(ckpt)
    return config, model, _load_splits(args)


def cmd_embed(args):
    config, model, splits = _eval_setup(args)
    names = SPLITS if args.split == "all" else (args.split,)
    tracklets = [tr for s in names for tr in splits[s]]
    with tn.precision(config.mode):
        emb = embed_gallery(model, tracklets, config.clip_len, config.stride)
    ids = list(emb)
    arr = np.stack([emb[i] for i in ids]) if ids else np.zeros((0, model.config.embed_dim))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / "embeddings.npz", ids=np.asarray(ids, dtype=str), embeddings=arr)
    write_provenance(out, "embed", config, inputs=_inputs(args), split=args.split)
    print(f"wrote {len(ids)} embeddings to {out / 'embeddings.npz'}")
    return 0


def cmd_eval(args):
    config, model, splits = _eval_setup(args)
    if not splits["query"] or not splits["gallery"]:
        raise DataError("evaluation needs non-empty query and gallery splits")
    protocols = PROTOCOLS if args.protocol == "all" else (args.protocol,)
    with tn.precision(config.mode):
        results = evaluate_model(model, splits["query"], splits["gallery"], protocols,
                                 config.clip_len, config.stride)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "report.json", [results[p] for p in protocols])
    for p in protocols:
        write_cmc_csv(out / f"cmc_{p}.csv", results[p])
    write_provenance(out, "eval", config, inputs=_inputs(args), protocol=args.protocol)
    for p in protocols:
        r = results[p].report()
        print(f"{p:<8} rank1={r['rank1']:.4f} rank5={r['rank5']:.4f} mAP={r['mAP']:.4f} queries={r['num_queries']}")
    return 0


def cmd_check(args):
    from .checks import gradient_suite, invariant_suite

    results = [] if args.skip_gradients else gradient_suite(args.seed)
    results += invariant_suite(args.seed)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


# ---------------------------------------------------------------- parser

def _training_flags(p):
    p.add_argument("--config", help="flat key = value file of training settings")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--clip-len", dest="clip_len", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--mode", choices=("f32", "f64"))
    p.add_argument("--heads", type=int)
    p.add_argument("--partition-d", dest="partition_d", type=int)


def _data_flags(p):
    p.add_argument("--data", help="store directory written by preprocess")
    p.add_argument("--keypoints", help="keypoint JSON-lines file (instead of --data)")
    p.add_argument("--manifest", help="split manifest (with --keypoints)")
    p.add_argument("--appearance", help="optional appearance vectors (with --keypoints)")


def build_parser():
    parser = argparse.ArgumentParser(prog="asgl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic walking dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="JSON spec; overrides the other synth flags")
    p.add_argument("--identities", type=int, default=8)
    p.add_argument("--tracklets", type=int, default=4, help="training tracklets per identity")
    p.add_argument("--heldout", type=int, default=4, help="query + gallery tracklets per identity")
    p.add_argument("--clothing", type=int, default=2)
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--noise", type=float, default=0.0, help="keypoint noise std in pixels")
    p.add_argument("--appearance-noise", type=float, default=0.1)
    p.add_argument("--appearance-identity", type=float, default=0.0)
    p.add_argument("--twins", action="store_true", help="pair up identities with identical skeletons")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="normalize keypoints into a clip store")
    p.add_argument("--keypoints", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--appearance")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model; writes checkpoint.bin and loss.log")
    _data_flags(p)
    _training_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="write video-level embeddings")
    p.add_argument("--checkpoint", required=True)
    _data_flags(p)
    _training_flags(p)
    p.add_argument("--split", choices=SPLITS + ("all",), default="all")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="retrieval metrics under the CC / Standard / SC protocols")
    p.add_argument("--checkpoint", required=True)
    _data_flags(p)
    _training_flags(p)
    p.add_argument("--protocol", choices=PROTOCOLS + ("all",), default="cc")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", help="finite-difference gradient and invariant self-checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-gradients", action="store_true")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except ASGLError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error[E_FILE]: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
