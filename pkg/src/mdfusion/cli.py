"""Command-line front end.

Exit codes: 0 success, 1 usage/config error, 2 data or file-format error,
3 numeric failure (including failed gradient checks).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import threading
from pathlib import Path

from . import __version__
from . import autodiff as ad
from .data import SynthConfig, read_dataset, split_folds, synth_generate, write_dataset
from .errors import (
    ConfigError,
    ConsistencyError,
    DegenerateInputError,
    FormatError,
    InputError,
    ModelSelectionError,
    NumericError,
)
from .model import ALL_MODES, Mode, load_model, predict_proba, save_model
from .pipeline import (
    FoldError,
    TrainConfig,
    ablate,
    cross_validate,
    evaluate,
    pretrain,
    provenance,
    ablation_grid,
    train_target,
)
from .report import ablation_rows, aligned, metrics_rows, tsv, write_json

log = logging.getLogger("mdfusion")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# (flag, config key, type, help)
_CONFIG_FLAGS = [
    ("--dropout", "dropout", str, "target-training loss: none | conventional | simultaneous"),
    ("--token-policy", "token_policy", str, "missing-modality fill: learned | zero"),
    ("--pretrain-loss", "pretrain_loss", str, "contrastive pretraining: none | con | con_hat"),
    ("--lambda", "lambda", float, "weight of the unimodal terms"),
    ("--lr", "lr", float, "AdamW learning rate"),
    ("--weight-decay", "weight_decay", float, "AdamW decoupled weight decay"),
    ("--epochs", "epochs", int, "target-training epochs"),
    ("--pretrain-epochs", "pretrain_epochs", int, "contrastive pretraining epochs"),
    ("--batch-size", "batch_size", int, "mini-batch size"),
    ("--d-f", "d_f", int, "fusion width"),
    ("--d-p", "d_p", int, "projector width"),
    ("--seed", "seed", int, "master seed (splits, init, shuffling, sampler)"),
    ("--con-norm", "con_norm", str, "contrastive loss scaling: raw | mean (divide by batch size)"),
]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    defaults = TrainConfig().to_dict()
    p.add_argument("--config", type=Path, help="TrainConfig JSON file; flags override its values")
    g = p.add_argument_group("training configuration (override --config)")
    for flag, key, typ, text in _CONFIG_FLAGS:
        g.add_argument(flag, dest=f"cfg_{key}", type=typ, default=None,
                       help=f"{text} (default: {defaults[key]})")


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", type=Path, required=True, help="dataset directory (manifest.json + EMB1 files)")
    p.add_argument("--top-k", type=int, default=None,
                   help="keep only the first K tabular columns (default: all)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mdfusion", description=__doc__.splitlines()[0] if __doc__ else None)
    parser.add_argument("--version", action="version", version=f"mdfusion {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = SynthConfig()
    g = sub.add_parser("gen-data", help="write a synthetic two-modality embedding dataset")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--patients", type=int, default=s.n_patients, help=f"(default: {s.n_patients})")
    g.add_argument("--samples-per-patient", type=int, default=s.samples_per_patient,
                   help=f"(default: {s.samples_per_patient})")
    g.add_argument("--dim-c", type=int, default=s.dim_c, help=f"image embedding width (default: {s.dim_c})")
    g.add_argument("--dim-t", type=int, default=s.dim_t, help=f"tabular embedding width (default: {s.dim_t})")
    g.add_argument("--latent-dim", type=int, default=s.latent_dim, help=f"(default: {s.latent_dim})")
    g.add_argument("--sigma-c", type=float, default=s.sigma_c, help=f"image noise std (default: {s.sigma_c})")
    g.add_argument("--sigma-t", type=float, default=s.sigma_t, help=f"tabular noise std (default: {s.sigma_t})")
    g.add_argument("--label-noise", type=float, default=s.label_noise,
                   help=f"label flip probability (default: {s.label_noise})")
    g.add_argument("--seed", type=int, default=s.seed, help=f"(default: {s.seed})")
    g.add_argument("--dtype", choices=("f32", "f64"), default="f64", help="payload type (default: f64)")
    g.add_argument("--force", action="store_true", help="write into a non-empty directory")

    p = sub.add_parser("pretrain", help="contrastive pretraining on one fold; writes an MMF1 model")
    _add_data_flags(p)
    _add_config_flags(p)
    p.add_argument("--fold", type=int, default=0, help="fold whose training split is used (default: 0)")
    p.add_argument("--out", type=Path, required=True, help="output model file")

    t = sub.add_parser("train", help="target training on one fold with validation-AUROC selection")
    _add_data_flags(t)
    _add_config_flags(t)
    t.add_argument("--init", type=Path, help="pretrained MMF1 model (tokens and fusion are carried over)")
    t.add_argument("--fold", type=int, default=0, help="(default: 0)")
    t.add_argument("--out", type=Path, required=True, help="output directory")

    e = sub.add_parser("eval", help="evaluate a trained model under full or missing-modality inference")
    _add_data_flags(e)
    e.add_argument("--config", type=Path, help="TrainConfig JSON; defaults to the one stored in the model")
    e.add_argument("--init", type=Path, required=True, help="trained MMF1 model")
    e.add_argument("--mode", choices=[m.value for m in ALL_MODES], default=None,
                   help="inference mode (default: all three)")
    e.add_argument("--split", choices=("test", "val", "train", "all"), default="test",
                   help="which samples to score (default: test)")
    e.add_argument("--fold", type=int, default=None, help="fold (default: the model's fold, else 0)")
    e.add_argument("--out", type=Path, required=True, help="output report JSON")

    c = sub.add_parser("cv", help="four-fold patient-level cross-validation")
    _add_data_flags(c)
    _add_config_flags(c)
    c.add_argument("--jobs", type=int, default=1, help="folds run in parallel (default: 1)")
    c.add_argument("--out", type=Path, required=True, help="output directory")

    a = sub.add_parser("ablate", help="cross-validate a grid of configurations")
    _add_data_flags(a)
    _add_config_flags(a)
    a.add_argument("--grid", type=Path,
                   help="JSON list of config overrides, one per row (default: the 7-row ablation grid)")
    a.add_argument("--jobs", type=int, default=1, help="(default: 1)")
    a.add_argument("--out", type=Path, required=True, help="output directory")

    k = sub.add_parser("check-grad", help="finite-difference check of every op and loss")
    k.add_argument("--seed", type=int, default=0, help="first seed (default: 0)")
    k.add_argument("--seeds", type=int, default=10, help="number of seeds (default: 10)")
    k.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)
    return parser


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _read_json(path: Path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def resolve_config(args, base: dict | None = None) -> TrainConfig:
    cfg = TrainConfig.from_dict(base or {})
    if getattr(args, "config", None):
        d = _read_json(args.config)
        if not isinstance(d, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
        cfg = TrainConfig.from_dict(d, cfg)
    overrides = {key: getattr(args, f"cfg_{key}") for _, key, _, _ in _CONFIG_FLAGS
                 if getattr(args, f"cfg_{key}", None) is not None}
    if overrides:
        cfg = TrainConfig.from_dict(overrides, cfg)
    return cfg


def _load_data(args):
    ds = read_dataset(args.data)
    if args.top_k is not None:
        ds = ds.truncate(args.top_k)
    return ds


def _pick_fold(ds, cfg: TrainConfig, fold: int):
    splits = split_folds(ds, 4, 0.10, cfg.seed)
    if not 0 <= fold < len(splits):
        raise UsageError(f"--fold must be in 0..{len(splits) - 1}")
    return splits[fold]


class _EventLog:
    """Thread-safe JSON-lines sink."""

    def __init__(self, path: Path):
        self._fh = open(path, "w", encoding="utf-8")
        self._lock = threading.Lock()

    def __call__(self, event: dict) -> None:
        with self._lock:
            self._fh.write(json.dumps(event, sort_keys=True) + "\n")
        log.debug("%s", event)

    def close(self) -> None:
        self._fh.close()


def _print_metrics(title: str, modes: dict) -> None:
    headers, rows = metrics_rows(modes)
    print(title)
    print(aligned(headers, rows))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out: Path = args.out
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty; pass --force to overwrite")
    cfg = SynthConfig(args.patients, args.samples_per_patient, args.latent_dim, args.dim_c, args.dim_t,
                      args.sigma_c, args.sigma_t, args.label_noise, args.seed)
    ds = synth_generate(cfg)
    write_dataset(ds, out, dtype=0 if args.dtype == "f32" else 1)
    write_json({"generator": cfg.__dict__, "dtype": args.dtype, "version": __version__},
               out / "provenance.json")
    print(f"wrote {len(ds.samples)} samples ({len(ds.patients())} patients) to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    ds = _load_data(args)
    cfg = resolve_config(args, {"pretrain_loss": "con_hat"})
    split = _pick_fold(ds, cfg, args.fold)
    params, losses = pretrain(ds, split, cfg)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    meta = {**provenance(cfg), "fold_id": split.fold_id, "stage": "pretrain", "pretrain_loss": losses}
    save_model(params, meta, args.out)
    if losses:
        print(f"pretrain loss: first epoch {losses[0]:.4f}, last epoch {losses[-1]:.4f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .plotting import plot_eval_curves, plot_training

    ds = _load_data(args)
    cfg = resolve_config(args)
    split = _pick_fold(ds, cfg, args.fold)
    init = load_model(args.init)[0] if args.init else None
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    events = _EventLog(out / "log.jsonl")
    try:
        params, record = train_target(ds, split, cfg, init, checkpoint=out / "model.mmf", events=events)
    finally:
        events.close()
    report = evaluate(params, ds, split.test_ids, ALL_MODES, cfg.token_policy, cfg, split.fold_id)
    write_json({**record.to_dict(), "provenance": provenance(cfg), "fold_id": split.fold_id},
               out / "record.json")
    write_json(report.to_dict(), out / "report.json")
    headers, rows = metrics_rows(report.modes)
    (out / "report.tsv").write_text(tsv(headers, rows), encoding="utf-8")
    plot_training([record], out / "training.png", [f"fold {split.fold_id}"])
    x_c, x_t, y = ds.take(split.test_ids)
    plot_eval_curves({m.value: predict_proba(params, x_c, x_t, m, cfg.token_policy) for m in ALL_MODES},
                     y, out / "curves.png")
    print(f"best epoch {record.best_epoch} (validation AUROC {record.best_val_auroc:.4f})")
    _print_metrics(f"test fold {split.fold_id} (n={report.n})", report.modes)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .plotting import plot_eval_curves

    ds = _load_data(args)
    params, meta = load_model(args.init)
    base = meta.get("config", {})
    cfg = resolve_config(args, base)
    fold = args.fold if args.fold is not None else (meta.get("fold_id") or 0)
    if args.split == "all":
        ids = ds.sample_ids
    else:
        split = _pick_fold(ds, cfg, fold)
        ids = {"test": split.test_ids, "val": split.val_ids, "train": split.train_ids}[args.split]
    modes = [Mode(args.mode)] if args.mode else list(ALL_MODES)
    report = evaluate(params, ds, ids, modes, cfg.token_policy, cfg, fold if args.split != "all" else None)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_json(report.to_dict(), args.out)
    x_c, x_t, y = ds.take(ids)
    plot_eval_curves({m.value: predict_proba(params, x_c, x_t, m, cfg.token_policy) for m in modes},
                     y, args.out.with_suffix(".png"))
    headers, rows = metrics_rows(report.modes)
    args.out.with_suffix(".tsv").write_text(tsv(headers, rows), encoding="utf-8")
    _print_metrics(f"{args.split} samples (n={report.n})", report.modes)
    return EXIT_OK


def cmd_cv(args) -> int:
    from .plotting import plot_training

    ds = _load_data(args)
    cfg = resolve_config(args)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    events = _EventLog(out / "log.jsonl")
    try:
        result = cross_validate(ds, cfg, jobs=args.jobs, out_dir=out, events=events)
    finally:
        events.close()
    for f in result.folds:
        write_json(f.report.to_dict(), out / f"fold{f.split.fold_id}.json")
    write_json(result.aggregate_dict(), out / "aggregate.json")
    write_json(result.to_dict(), out / "cv.json")
    headers, rows = metrics_rows(result.aggregate)
    (out / "aggregate.tsv").write_text(tsv(headers, rows), encoding="utf-8")
    plot_training([f.record for f in result.folds], out / "training.png")
    for f in result.folds:
        _print_metrics(f"fold {f.split.fold_id} (n={f.report.n})", f.report.modes)
        print()
    _print_metrics(f"aggregate over {len(result.folds)} folds [{cfg.label()}]", result.aggregate)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .plotting import plot_ablation

    ds = _load_data(args)
    base = resolve_config(args)
    if args.grid:
        entries = _read_json(args.grid)
        if isinstance(entries, dict):
            entries = entries.get("configs")
        if not isinstance(entries, list) or not all(isinstance(x, dict) for x in entries):
            raise ConfigError(f"{args.grid}: expected a list of config objects")
        grid = [TrainConfig.from_dict(d, base) for d in entries]
    else:
        grid = ablation_grid(base)
    rows = ablate(ds, grid, jobs=args.jobs)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    headers, table = ablation_rows(rows)
    write_json({"rows": [r.to_dict() for r in rows], "provenance": provenance(base)}, out / "ablation.json")
    (out / "ablation.tsv").write_text(tsv(headers, table), encoding="utf-8")
    plot_ablation(rows, out / "ablation.png")
    print(aligned(headers, table))
    return EXIT_OK


def cmd_check_grad(args) -> int:
    from .gradcheck import run_suite

    ad.inject_fault(args.inject_fault)
    try:
        results = run_suite(range(args.seed, args.seed + args.seeds))
    finally:
        ad.inject_fault(None)
    rows = [[r.name, f"{r.max_rel_error:.2e}", r.n_checked, "ok" if r.passed else "FAIL"] for r in results]
    print(aligned(["op", "max rel err", "coords", "status"], rows))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "cv": cmd_cv,
    "ablate": cmd_ablate,
    "check-grad": cmd_check_grad,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        for k in exc.keys:
            print(f"  offending key: {k}", file=sys.stderr)
        return EXIT_USAGE
    except FoldError as exc:
        code = EXIT_NUMERIC if isinstance(
            exc.cause, (NumericError, DegenerateInputError, ModelSelectionError, FloatingPointError)
        ) else EXIT_DATA
        kind = "numeric failure" if code == EXIT_NUMERIC else "error"
        print(f"{kind} in stage '{exc.stage}' (fold {exc.fold_id}): {exc.cause}", file=sys.stderr)
        return code
    except (FormatError, ConsistencyError, InputError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, DegenerateInputError, ModelSelectionError) as exc:
        print(f"numeric failure in '{args.command}': {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
