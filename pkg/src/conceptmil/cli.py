"""Command-line entry point: ``conceptmil <subcommand> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import tomli

from .conceptbank import load_bank
from .dataio import SynthSpec, load_manifest, read_bag, synth_generate
from .errors import ConceptMILError, ConfigError
from .interpret import similarity_map, write_heatmap
from .model import Model
from .preprocess import SegParams, run_pipeline
from .trainer import TrainConfig, cross_validate, train_fold


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_dataclass_flags(parser: argparse.ArgumentParser, cls, skip=()) -> None:
    """One flag per field; defaults are left as None so unset flags do not override the config file."""
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = f.default
        if isinstance(default, bool):
            parser.add_argument(_flag(f.name), dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif isinstance(default, int) or "int" in str(f.type):
            parser.add_argument(_flag(f.name), dest=f.name, type=int, default=None, metavar="INT")
        elif isinstance(default, float):
            parser.add_argument(_flag(f.name), dest=f.name, type=float, default=None, metavar="X")
        else:
            parser.add_argument(_flag(f.name), dest=f.name, type=str, default=None)


def _overrides(args: argparse.Namespace, cls) -> dict:
    names = {f.name for f in dataclasses.fields(cls)}
    return {k: v for k, v in vars(args).items() if k in names and v is not None}


def _read_toml(path) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as fh:
        doc = tomli.load(fh)
    flat = {}
    for key, value in doc.items():
        if isinstance(value, dict):  # allow [train]/[model] style tables, flattened
            flat.update({k.replace("-", "_"): v for k, v in value.items()})
        else:
            flat[key.replace("-", "_")] = value
    return flat


def _resolve(cls, args: argparse.Namespace):
    values = _read_toml(getattr(args, "config", None))
    values.update(_overrides(args, cls))
    if hasattr(cls, "from_dict"):
        return cls.from_dict(values)
    unknown = set(values) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return cls(**values)


def _echo_config(out_dir: Path, command: str, **sections) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command}
    for name, value in sections.items():
        doc[name] = dataclasses.asdict(value) if dataclasses.is_dataclass(value) else value
    (out_dir / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p


# -- subcommands ------------------------------------------------------------

def cmd_preprocess(args) -> int:
    params = _resolve(SegParams, args)
    out = Path(args.out)
    res = run_pipeline(_require_file(args.image), out, params, d=args.d, seed=args.seed,
                       slide_id=args.slide_id, patient_id=args.patient_id, label=args.label)
    _echo_config(out, "preprocess", seg=params, d=args.d, seed=args.seed, image=str(args.image))
    print(f"tissue pixels: {int(res.mask.sum())}  tiles: {len(res.coords)}")
    return 0


def cmd_synth(args) -> int:
    spec = _resolve(SynthSpec, args)
    out = Path(args.out)
    manifest = synth_generate(spec, args.seed, out)
    _echo_config(out, "synth", synth=spec, seed=args.seed)
    print(f"wrote {len(manifest.slides)} bags to {out}")
    return 0


def _train_inputs(args):
    cfg = _resolve(TrainConfig, args)
    manifest = load_manifest(_require_file(args.manifest))
    bank = load_bank(_require_file(args.bank), cfg.n_data_driven, cfg.expert_concepts_per_class)
    if manifest.classes != bank.class_names:
        raise ConfigError(f"manifest classes {manifest.classes} != bank classes {bank.class_names}")
    return cfg, manifest.load_bags(), bank


def cmd_train(args) -> int:
    cfg, bags, bank = _train_inputs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, "train", train=cfg)
    result = train_fold(bags, cfg, bank, echo=print, csv_path=out / "train_log.csv")
    result.model.save(out / "model.cpk")
    print(f"checkpoint: {out / 'model.cpk'}")
    return 0


def cmd_cv(args) -> int:
    cfg, bags, bank = _train_inputs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, "cv", train=cfg, parallel_folds=args.parallel_folds)
    report = cross_validate(bags, cfg, bank, out_dir=out, parallel=args.parallel_folds, verbose=args.verbose)
    _write_json(out / "report.json", report.to_json())
    (out / "report.txt").write_text(report.table() + "\n", encoding="utf-8")
    print(report.table())
    print(f"mean AUC {report.auc_mean:.4f} +/- {report.auc_std:.4f}")
    return 0


def cmd_infer(args) -> int:
    model = Model.load(_require_file(args.checkpoint))
    bag = read_bag(_require_file(args.bag))
    probs = model.predict(bag, not args.raw_embeddings).probabilities
    doc = {
        "slide_id": bag.slide_id,
        "classes": model.bank.class_names,
        "probabilities": [float(p) for p in probs],
        "prediction": model.bank.class_names[int(np.argmax(probs))],
    }
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        _write_json(out, doc)
        _echo_config(out.parent, "infer", checkpoint=str(args.checkpoint), bag=str(args.bag), seed=args.seed,
                     model=model.config)
    print(json.dumps(doc))
    return 0


def _class_index(model: Model, key: str) -> int:
    names = model.bank.class_names
    if key in names:
        return names.index(key)
    try:
        idx = int(key)
    except ValueError:
        raise ConfigError(f"unknown class {key!r}; choose from {names}") from None
    if not 0 <= idx < len(names):
        raise ConfigError(f"class index {idx} out of range")
    return idx


def cmd_heatmap(args) -> int:
    model = Model.load(_require_file(args.checkpoint))
    bag = read_bag(_require_file(args.bag))
    k = _class_index(model, args.class_)
    if not 0 <= args.concept < model.bank.classes[k].m:
        raise ConfigError(f"concept index {args.concept} out of range for class {model.bank.class_names[k]!r} "
                          f"({model.bank.classes[k].m} concepts)")
    out = model.predict(bag, not args.raw_embeddings)
    smap = similarity_map(bag, out, model.bank, k, args.concept)
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    side = write_heatmap(smap, path, args.zoom)
    _echo_config(path.parent, "heatmap", checkpoint=str(args.checkpoint), bag=str(args.bag),
                 class_index=k, concept=args.concept, zoom=args.zoom, seed=args.seed)
    print(f"heatmap: {path}  sidecar: {side}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conceptmil", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="image -> tissue mask, tile coords and a bag")
    p.add_argument("image")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--slide-id")
    p.add_argument("--patient-id")
    p.add_argument("--label", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    _add_dataclass_flags(p, SegParams)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="generate a planted-concept dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=0)
    _add_dataclass_flags(p, SynthSpec)
    p.set_defaults(func=cmd_synth)

    for name, func, helptext in (("train", cmd_train, "train one model on a whole manifest"),
                                 ("cv", cmd_cv, "patient-level k-fold cross-validation")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--manifest", required=True)
        p.add_argument("--bank", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--config", help="TOML file with TrainConfig keys")
        _add_dataclass_flags(p, TrainConfig)
        if name == "cv":
            p.add_argument("--parallel-folds", type=int, default=1)
            p.add_argument("--verbose", action="store_true")
        p.set_defaults(func=func)

    p = sub.add_parser("infer", help="class probabilities for one bag")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bag", required=True)
    p.add_argument("--out")
    p.add_argument("--raw-embeddings", action="store_true", help="skip L2 normalization of patch embeddings")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("heatmap", help="per-concept similarity map as PGM + JSON sidecar")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bag", required=True)
    p.add_argument("--class", dest="class_", required=True, help="class name or index")
    p.add_argument("--concept", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--zoom", type=int, default=8)
    p.add_argument("--raw-embeddings", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_heatmap)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConceptMILError, OSError, KeyError) as exc:
        msg = exc.strerror + f": {exc.filename}" if isinstance(exc, OSError) and exc.filename else str(exc)
        print(f"conceptmil {args.command}: error: {msg}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
