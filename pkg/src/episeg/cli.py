"""``episeg`` command line: data generation, training, evaluation, ablations and gradient checks.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  Every command that
takes ``--out`` writes ``run_manifest.json`` there with the full config, the
seed and sha256 hashes of everything it produced; passing that manifest back
through ``--config`` replays the run.
"""
import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .config import Config, ConfigError

log = logging.getLogger("episeg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
MANIFEST_NAME = "run_manifest.json"
SEED_ENV = "EPISEG_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ helpers


def _override(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    try:
        return key.strip(), json.loads(value)
    except json.JSONDecodeError:
        return key.strip(), value


def resolve_config(args, base=None):
    """Config file (or ``base``), then ``EPISEG_SEED``, then explicit flags and ``--set``."""
    cfg = base if base is not None else Config()
    if getattr(args, "config", None):
        cfg = Config.load(args.config)
    updates = {}
    if os.environ.get(SEED_ENV):
        try:
            updates["seed"] = int(os.environ[SEED_ENV])
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {os.environ[SEED_ENV]!r}") from None
    for flag, key in (("seed", "seed"), ("fold", "fold"), ("k_shot", "k_shot"), ("threads", "threads")):
        value = getattr(args, flag, None)
        if value is not None:
            updates[key] = value
    updates.update(dict(getattr(args, "set", None) or []))
    return cfg.with_updates(updates)


def limit_threads(n):
    # the numba kernels are serial, so the BLAS pools are the only workers to cap
    from threadpoolctl import threadpool_limits

    threadpool_limits(n)


def load_data(args, cfg):
    from .data import build_dataset, load_dataset

    if getattr(args, "data", None):
        return load_dataset(args.data)
    return build_dataset(cfg["data.classes"], cfg["data.samples_per_class"], cfg["data.image_size"],
                         cfg["data.seed"])


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out, command, argv, cfg, dataset=None, extra=None):
    root = Path(out)
    artifacts = {str(p.relative_to(root)): _sha256(p)
                 for p in sorted(root.rglob("*")) if p.is_file() and p.name != MANIFEST_NAME}
    doc = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "config": cfg.as_dict(),
        "config_hash": cfg.hash(),
        "seed": cfg["seed"],
        "dataset_fingerprint": None if dataset is None else dataset.fingerprint(),
        "data": None if dataset is None or dataset.root is None else str(dataset.root),
        "artifacts": artifacts,
    }
    doc.update(extra or {})
    (root / MANIFEST_NAME).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


# ----------------------------------------------------------------- commands


def cmd_generate_data(args, argv):
    from .data import generate_dataset

    cfg = resolve_config(args)
    seeded = args.seed is not None or os.environ.get(SEED_ENV)
    # explicit size flags win; otherwise the config (or a replayed manifest) decides
    sizes = {"data.classes": args.classes, "data.samples_per_class": args.samples_per_class,
             "data.image_size": args.image_size}
    cfg = cfg.with_updates({**{k: v for k, v in sizes.items() if v is not None},
                            "data.seed": cfg["seed"] if seeded else cfg["data.seed"]})
    ds = generate_dataset(args.out, cfg["data.classes"], cfg["data.samples_per_class"], cfg["data.image_size"],
                          cfg["data.seed"])
    write_manifest(args.out, "generate-data", argv, cfg, ds)
    print(f"wrote {ds.num_classes} classes x {ds.samples_per_class} samples to {args.out}")
    return EXIT_OK


def cmd_train(args, argv):
    from .model.training import train

    cfg = resolve_config(args)
    ds = load_data(args, cfg)
    model = train(cfg, ds, args.out)
    last = model.history[-1]
    write_manifest(args.out, "train", argv, cfg, ds)
    print(f"trained fold {cfg['fold']} k={cfg['k_shot']} for {model.epoch} epochs; "
          f"seg_loss {last.get('seg_loss', float('nan')):.4f}; checkpoint in {args.out}")
    return EXIT_OK


def cmd_eval(args, argv):
    from .evaluation import evaluate_fold, write_report
    from .model.training import load_checkpoint

    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint DIR (a directory written by 'episeg train')")
    model = load_checkpoint(args.checkpoint)
    trained_fold = model.config["fold"]
    if args.fold is not None and args.fold != trained_fold:
        raise RuntimeError(f"checkpoint was trained on fold {trained_fold}, not fold {args.fold}")
    cfg = resolve_config(args, base=model.config)
    ds = load_data(args, cfg)
    row = evaluate_fold(model, ds, cfg, k=cfg["k_shot"])
    ckpt_hash = _sha256(Path(args.checkpoint) / "manifest.json")
    report = {"folds": [row], "config": cfg.as_dict(), "checkpoint_manifest_sha256": ckpt_hash}
    write_report(report, args.out)
    write_manifest(args.out, "eval", argv, cfg, ds)
    print(f"fold {row['fold']} k={row['k_shot']} mIoU {row['miou']:.4f} over {row['episodes']} episodes")
    return EXIT_OK


def cmd_cross_validate(args, argv):
    from .evaluation import cross_validate

    cfg = resolve_config(args)
    ds = load_data(args, cfg)
    report = cross_validate(cfg, ds, args.out)
    write_manifest(args.out, "cross-validate", argv, cfg, ds)
    for r in report["folds"]:
        print(f"fold {r['fold']}: mIoU {r['miou']:.4f}")
    print(f"average: {report['average']:.4f}")
    return EXIT_OK


def cmd_ablate(args, argv):
    from .ablation import run_ablation, write_ablation

    cfg = resolve_config(args)
    ds = load_data(args, cfg)
    result = run_ablation(cfg, ds, args.axis, seeds=args.seeds)
    path = write_ablation(result, args.out)
    write_manifest(args.out, "ablate", argv, cfg, ds, {"axis": args.axis, "seeds": result["rows"][0]["seeds"]})
    print(path.read_text(), end="")
    return EXIT_OK


def cmd_gradcheck(args, argv):
    from . import gradcheck

    results = gradcheck.run_all(seed=args.seed or 0, points=args.points)
    print(gradcheck.format_report(results))
    failed = [r.component for r in results if not r.passed]
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        rows = [{"component": r.component, "max_rel_err": r.max_rel_err, "tolerance": r.tolerance,
                 "passed": r.passed} for r in results]
        (Path(args.out) / "gradcheck.json").write_text(json.dumps(rows, indent=2) + "\n")
        write_manifest(args.out, "gradcheck", argv, resolve_config(args))
    if failed:
        print(f"gradcheck FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# ------------------------------------------------------------------- parser


def _common(p, out_required=True):
    p.add_argument("--config", type=Path, help="config file (key = value lines) or a run manifest")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", type=_override, action="append", metavar="KEY=VALUE",
                   help="override one config key; repeatable")
    p.add_argument("--out", type=Path, required=out_required)


def _run_flags(p):
    _common(p)
    p.add_argument("--fold", type=int)
    p.add_argument("--k-shot", dest="k_shot", type=int)
    p.add_argument("--data", type=Path, help="dataset directory from generate-data (default: build in memory)")


def build_parser():
    from .ablation import AXES
    from .config import DEFAULTS

    parser = _Parser(prog="episeg", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, help="cap BLAS worker threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=f"episeg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate-data", help="write a synthetic shape dataset")
    _common(p)
    p.add_argument("--classes", type=int, help=f"default {DEFAULTS['data.classes']}")
    p.add_argument("--samples-per-class", type=int, help=f"default {DEFAULTS['data.samples_per_class']}")
    p.add_argument("--image-size", type=int, help=f"default {DEFAULTS['data.image_size']}")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="episodic training on one fold")
    _run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on its fold's novel classes")
    _run_flags(p)
    p.add_argument("--checkpoint", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cross-validate", help="train and evaluate all four folds")
    _run_flags(p)
    p.set_defaults(func=cmd_cross_validate)

    p = sub.add_parser("ablate", help="run one ablation axis")
    _run_flags(p)
    p.add_argument("--axis", required=True, choices=sorted(AXES))
    p.add_argument("--seeds", type=int, nargs="+", help="seeds per row (default: the config seed)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _common(p, out_required=False)
    p.add_argument("--points", type=int, default=20, help="entries probed per parameter array")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be >= 1")
            limit_threads(args.threads)
        return args.func(args, argv)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - reported, not swallowed silently
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
