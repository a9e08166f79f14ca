"""Command line entry point: ``awcl {synth,pretrain,finetune,probe,embed,metrics}``.

Failures print one line ``error: <ErrorClass>: <message>`` on stderr and
exit with a code that identifies the class of failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import yaml
from filelock import FileLock, Timeout

from . import __version__
from .config import RunConfig, dump_yaml, load_config
from .data import default_data_root, generate_synthetic, load_manifest
from .errors import AWCLError, ConfigError, ManifestError, TaxonomyError, TrainingDivergedError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_DATA = 5
EXIT_DIVERGED = 6
EXIT_LOCKED = 7

log = logging.getLogger("awcl")


class OutputLocked(AWCLError):
    pass


@contextmanager
def locked_dir(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / ".awcl.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise OutputLocked(f"output directory {out} is in use by another process") from None
    try:
        yield out
    finally:
        lock.release()


def _resolve(path: str) -> Path:
    """Relative input paths fall back to $AWCL_DATA_ROOT when absent from the working directory."""
    p = Path(path)
    if p.is_absolute() or p.exists():
        return p
    alt = default_data_root() / p
    return alt if alt.exists() else p


def _config(args) -> RunConfig:
    if getattr(args, "config", None):
        return load_config(_resolve(args.config))
    return RunConfig()


# -- subcommands -------------------------------------------------------------

def cmd_synth(args) -> int:
    path = _resolve(args.spec)
    if not path.is_file():
        raise FileNotFoundError(f"spec file not found: {path}")
    data = yaml.safe_load(path.read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError("synthetic spec must be a mapping")
    if "synthetic" in data:
        spec = RunConfig.from_dict(data).synthetic
    else:
        spec = RunConfig.from_dict({"synthetic": data, "seed": data.get("seed", 0)}).synthetic
    out = Path(args.out)
    with locked_dir(out):
        manifest = generate_synthetic(spec, out)
        dump_yaml({"synthetic": RunConfig(synthetic=spec).to_dict()["synthetic"]}, out / "synth.resolved.yaml")
    print(f"wrote {len(manifest)} frames to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .train import pretrain

    cfg = _config(args)
    train_cfg = cfg.train_config()
    manifest = load_manifest(_resolve(args.data))
    out = Path(args.out)
    with locked_dir(out):
        snapshot = cfg.to_dict()
        snapshot["output_dir"] = str(out)
        dump_yaml(snapshot, out / "config.resolved.yaml")
        result = pretrain(train_cfg, manifest, out_dir=out, resume_from=args.resume)
    final = [r for r in result.log if r["kind"] == "epoch"][-1]
    print(f"pretrained {train_cfg.epochs} epochs; final train loss {final['train_loss']:.6f}; outputs in {out}")
    return EXIT_OK


def _write_report(result, out: Path, name: str) -> None:
    (out / f"{name}.txt").write_text("\n".join(result.lines()) + "\n")
    summary = {"summary": {k: {"mean": m, "std": s} for k, (m, s) in result.summary.items()},
               "n_reports": len(result.reports),
               "encoder_hash_before": result.encoder_hash_before,
               "encoder_hash_after": result.encoder_hash_after,
               "config": result.config}
    (out / f"{name}.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def cmd_finetune(args, protocol=None) -> int:
    from .evaluation import finetune, partial_finetune

    cfg = _config(args)
    protocol = protocol or args.protocol
    ecfg = cfg.eval_config(args.task, protocol)
    manifest = load_manifest(_resolve(args.data))
    source = None if args.source in (None, "random") else _resolve(args.source)
    out = Path(args.out)
    with locked_dir(out):
        snapshot = cfg.to_dict()
        snapshot["eval"] = ecfg.to_dict()
        dump_yaml(snapshot, out / "config.resolved.yaml")
        if ecfg.protocol == "partial_finetune":
            result = partial_finetune(source, ecfg, manifest, spec=cfg.model)
        else:
            result = finetune(source, ecfg, manifest, spec=cfg.model)
        _write_report(result, out, "report")
    print("\n".join(result.lines()))
    return EXIT_OK


def cmd_embed(args) -> int:
    from .evaluation import export_embeddings, silhouette

    cfg = _config(args)
    manifest = load_manifest(_resolve(args.data))
    source = None if args.source in (None, "random") else _resolve(args.source)
    out = Path(args.out)
    with locked_dir(out.parent if out.suffix else out):
        path = out if out.suffix else out / "embeddings.tsv"
        table = export_embeddings(source, manifest, args.layer, path, tsne=args.tsne,
                                  seed=args.seed if args.seed is not None else cfg.seed, spec=cfg.model)
    labeled = [i for i, lab in enumerate(table.labels) if lab != "-"]
    msg = f"wrote {len(table.labels)} x {table.vectors.shape[1]} embeddings to {path}"
    if len(set(table.labels[i] for i in labeled)) >= 2:
        s = silhouette(table.vectors[labeled], [table.labels[i] for i in labeled])
        msg += f"; silhouette {s:.4f}"
    print(msg)
    return EXIT_OK


def cmd_metrics(args) -> int:
    from .metrics import classification_metrics, confusion_matrix, segmentation_metrics

    if args.confusion:
        path = _resolve(args.confusion)
        if not path.is_file():
            raise FileNotFoundError(f"confusion matrix file not found: {path}")
        cm = np.load(path) if path.suffix == ".npy" else np.loadtxt(path, ndmin=2)
        rep = classification_metrics(cm)
        values = rep.summary()
    else:
        if not (args.pred and args.true and args.n_classes):
            raise ConfigError("metrics needs --confusion, or --pred, --true and --n-classes")
        pred, true = np.load(_resolve(args.pred)), np.load(_resolve(args.true))
        if args.kind == "segmentation":
            values = segmentation_metrics(pred, true, args.n_classes).summary()
        else:
            values = classification_metrics(confusion_matrix(true, pred, args.n_classes)).summary()
    for k, v in values.items():
        print(f"{k}\t{v:.6f}")
    if args.out:
        Path(args.out).write_text(json.dumps(values, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="awcl", description="Anatomy-aware contrastive pretraining toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic multi-anatomy scan dataset")
    s.add_argument("--spec", required=True, help="YAML file with synthetic dataset fields")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", help="contrastive pretraining (simclr / clpi / awcl)")
    s.add_argument("--config", help="run configuration YAML")
    s.add_argument("--data", required=True, help="pretraining manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="checkpoint to resume from")
    s.set_defaults(func=cmd_pretrain)

    for name, fixed in (("finetune", None), ("probe", "partial")):
        s = sub.add_parser(name, help="transfer to a downstream task" if fixed is None
                           else "frozen-encoder probe (partial fine-tuning)")
        s.add_argument("--task", required=True, choices=["1", "2", "3"])
        if fixed is None:
            s.add_argument("--protocol", choices=["full", "partial"], default="full")
        s.add_argument("--from", dest="source", default="random", help="checkpoint path, or 'random'")
        s.add_argument("--data", required=True, help="task manifest")
        s.add_argument("--out", required=True)
        s.add_argument("--config")
        s.set_defaults(func=(lambda a, _f=fixed: cmd_finetune(a, _f)))

    s = sub.add_parser("embed", help="export encoder embeddings (optionally with t-SNE coordinates)")
    s.add_argument("--from", dest="source", default="random")
    s.add_argument("--layer", choices=["penultimate", "projection"], default="penultimate")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="output .tsv file or directory")
    s.add_argument("--tsne", action="store_true")
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("metrics", help="classification / segmentation metrics from saved predictions")
    s.add_argument("--confusion", help="square confusion matrix (.npy or whitespace text)")
    s.add_argument("--pred")
    s.add_argument("--true")
    s.add_argument("--n-classes", type=int)
    s.add_argument("--kind", choices=["classification", "segmentation"], default="classification")
    s.add_argument("--out")
    s.set_defaults(func=cmd_metrics)
    return p


def _fail(code: int, exc: BaseException) -> int:
    msg = " ".join(str(exc).split())
    print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
    return code


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING, exc)
    except (ManifestError, TaxonomyError) as exc:
        return _fail(EXIT_DATA, exc)
    except TrainingDivergedError as exc:
        return _fail(EXIT_DIVERGED, exc)
    except OutputLocked as exc:
        return _fail(EXIT_LOCKED, exc)
    except AWCLError as exc:
        return _fail(EXIT_ERROR, exc)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
