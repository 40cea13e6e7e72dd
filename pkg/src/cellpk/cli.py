"""``cellpk`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import augment
from .config import ConfigError, format_config, load_config, resolve_train_config, train_config_items
from .imgio import ImageFormatError, read_ppm, write_pgm, write_ppm
from .metric import PkUndefinedError, average_pk, bootstrap_average_pk, unpaired_t_test
from .models import build_model, fuse
from .nn.graph import GraphError
from .nn.io import WeightFileError, load_checkpoint, save_checkpoint, save_weights
from .nn.train import train
from .pipeline import (
    ImageLoader,
    ManifestError,
    SessionState,
    augment_manifest,
    baseline_augment,
    generate_synthetic_dataset,
    load_dataset,
    load_manifest,
    load_model,
    predict,
    read_predictions,
    read_reference,
    read_session_state,
    run_session,
    split,
    write_manifest,
    write_predictions,
    write_session_state,
)
from .viz import activation_heatmap, overlay

log = logging.getLogger("cellpk")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
DATA_ERRORS = (
    ManifestError,
    ImageFormatError,
    WeightFileError,
    ConfigError,
    GraphError,
    PkUndefinedError,
    augment.PoolExhaustedError,
    FileNotFoundError,
    ValueError,
    KeyError,
    IndexError,
    OSError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _resolved(args, file_cfg: dict, keys: dict) -> dict:
    """Flags win over config-file values; returns the fully resolved settings."""
    out = {}
    for key, default in keys.items():
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
        elif key in file_cfg:
            out[key] = file_cfg[key]
        else:
            out[key] = default
    return out


def _config(args) -> dict:
    return load_config(args.config) if getattr(args, "config", None) else {}


def _log_config(name: str, values: dict) -> None:
    log.info("resolved %s config:\n%s", name, format_config(values))


# --- subcommands -----------------------------------------------------------------


def cmd_synth(args):
    m = generate_synthetic_dataset(args.n, args.size, args.seed, args.out)
    print(f"wrote {len(m)} images and {Path(args.out) / 'manifest.csv'}")


def cmd_augment(args):
    manifest = load_manifest(args.manifest)
    out = Path(args.out)
    if args.mode == "baseline":
        result = baseline_augment(manifest, out, args.workers)
    elif args.mode == "full360":
        result = augment_manifest(manifest, augment.DEFAULT_ANGLES, out, args.workers)
    else:
        if args.ledger is None:
            raise UsageError("--mode session requires --ledger")
        ledger = augment.read_ledger(args.ledger)
        session_index = len(ledger) // augment.SESSION_SIZE + 1
        angles = augment.sample_session_angles(args.seed, session_index, ledger)
        result = augment_manifest(manifest, angles, out, args.workers)
        augment.write_ledger(ledger + angles, args.ledger)
        print(f"session {session_index} angles: {' '.join(map(str, angles))}")
    write_manifest(result, out / "manifest.csv")
    print(f"wrote {len(result)} augmented images to {out}")


TRAIN_DEFAULTS = {
    "learning_rate": None,
    "epochs": None,
    "batch_size": None,
    "early_stopping_patience": None,
    "optimizer": None,
    "split": None,
}


def _train_config(args, file_cfg, preset):
    over = _resolved(args, file_cfg, TRAIN_DEFAULTS)
    seed = _resolved(args, file_cfg, {"seed": 0})["seed"]
    return resolve_train_config(preset, over, seed=int(seed))


def cmd_train(args):
    file_cfg = _config(args)
    run = _resolved(args, file_cfg, {"manifest": None, "model": None, "preset": None, "out": None, "image_size": 256, "workers": 1})
    for key in ("manifest", "model", "preset", "out"):
        if run[key] is None:
            raise UsageError(f"--{key.replace('_', '-')} is required (flag or config file)")
    cfg = _train_config(args, file_cfg, run["preset"])
    _log_config("train", {**run, **train_config_items(cfg)})
    manifest = load_manifest(run["manifest"])
    tr, va = split(manifest, cfg.train_fraction, cfg.seed)
    loader = ImageLoader(int(run["image_size"]))
    size = int(run["image_size"])
    graph = build_model(run["model"], (3, size, size), cfg.seed)
    resume = load_checkpoint(args.resume) if args.resume else None
    graph, tlog = train(
        graph,
        load_dataset(tr, loader, int(run["workers"])),
        load_dataset(va, loader, int(run["workers"])),
        cfg,
        va.label_columns(),
        resume=resume,
    )
    save_weights(graph, run["out"])
    if args.checkpoint:
        save_checkpoint(tlog.checkpoint, graph, args.checkpoint)
    if args.log:
        with open(args.log, "w") as fh:
            fh.write("epoch,train_loss,val_loss,val_pk\n")
            for r in tlog.records:
                fh.write(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{'' if r.val_pk is None else repr(r.val_pk)}\n")
    best = next((r for r in tlog.records if r.epoch == tlog.best_epoch), None)
    summary = "" if best is None else f" val_loss={best.val_loss:.6g} val_pk={best.val_pk}"
    print(f"trained {run['model']} for {len(tlog)} epochs ({tlog.stop_reason}); best epoch {tlog.best_epoch}{summary}")


def cmd_session(args):
    file_cfg = _config(args)
    cfg = _train_config(args, file_cfg, args.preset)
    manifest = load_manifest(args.manifest)
    state_path = Path(args.state)
    if state_path.exists():
        state = read_session_state(state_path)
    else:
        if args.weights is None or args.work_dir is None:
            raise UsageError("a new session state needs --weights and --work-dir")
        work = Path(args.work_dir)
        tr, _ = split(manifest, cfg.train_fraction, cfg.seed)
        base = baseline_augment(tr, work / "baseline", args.workers)
        write_manifest(base, work / "baseline" / "manifest.csv")
        state = SessionState(0, cfg.seed, Path(args.weights), work / "baseline" / "manifest.csv", work, args.image_size or 256)
    # the split is recomputed from the state seed so validation never overlaps the base images
    tr, va = split(manifest, cfg.train_fraction, state.seed)
    _log_config("session", {"state": str(state_path), "manifest": args.manifest, "preset": args.preset, **train_config_items(cfg)})
    new_state, tlog, scores = run_session(state, tr, cfg, va, workers=args.workers, state_path=state_path)
    print(
        f"session {new_state.session_index}: {new_state.cumulative_rotation_count} rotations in ledger, "
        f"{len(tlog)} epochs, mean PK {scores.mean_pk:.6f}"
    )


def cmd_fuse(args):
    a, b = load_model(args.a), load_model(args.b)
    fused = fuse(a, b, args.seed)
    if args.finetune:
        if args.manifest is None:
            raise UsageError("--finetune requires --manifest")
        cfg = _train_config(args, _config(args), args.preset)
        _log_config("fuse", {"a": args.a, "b": args.b, "manifest": args.manifest, **train_config_items(cfg)})
        manifest = load_manifest(args.manifest)
        tr, va = split(manifest, cfg.train_fraction, cfg.seed)
        loader = ImageLoader(fused.input_shape[1])
        fused, tlog = train(fused, load_dataset(tr, loader), load_dataset(va, loader), cfg, va.label_columns())
        print(f"fine-tuned fused model for {len(tlog)} epochs ({tlog.stop_reason}), best epoch {tlog.best_epoch}")
    save_weights(fused, args.out)
    print(f"fused model written to {args.out} (penultimate width {fused.shapes[fused.penultimate_node][0]})")


def cmd_predict(args):
    manifest = load_manifest(args.manifest)
    rows = predict(args.weights, manifest, workers=args.workers)
    write_predictions(rows, args.out)
    print(f"wrote {len(rows)} predictions to {args.out}")


def _joined(pred_path, ref_path):
    preds = read_predictions(pred_path)
    refs, names = read_reference(ref_path)
    missing = [k for k in refs if k not in preds]
    if missing:
        raise ManifestError(f"no prediction for reference id {missing[0]!r} ({len(missing)} missing)")
    extra = [k for k in preds if k not in refs]
    if extra:
        raise ManifestError(f"prediction id {extra[0]!r} has no reference labels")
    ids = list(refs)
    columns = np.asarray([refs[i] for i in ids], dtype=np.float64).T
    return ids, columns, np.asarray([preds[i] for i in ids]), names


def cmd_evaluate(args):
    ids, columns, pred, names = _joined(args.pred, args.ref)
    result = average_pk(columns, pred)
    print(f"n = {len(ids)}")
    for name, r in zip(names, result.per_rater):
        print(
            f"{name}: PK = {r.pk:.6f}  pairs = {r.n_pairs_considered}  concordant = {r.concordant}  "
            f"discordant = {r.discordant}  prediction ties = {r.ties_pred_only}"
        )
    print(f"mean PK = {result.mean_pk:.6f}")
    if args.bootstrap:
        samples = bootstrap_average_pk(columns, pred, args.bootstrap, args.seed)
        lo, hi = np.percentile(samples, [2.5, 97.5])
        print(f"bootstrap (B = {args.bootstrap}, seed = {args.seed}): mean = {samples.mean():.6f}  95% interval = [{lo:.6f}, {hi:.6f}]")
        if args.samples_out:
            Path(args.samples_out).write_text("".join(f"{float(v)!r}\n" for v in samples))


def _read_numbers(path):
    values = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            values.append(float(line))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: not a number: {line!r}")
    return values


def cmd_ttest(args):
    r = unpaired_t_test(_read_numbers(args.a), _read_numbers(args.b), args.variant)
    print(f"variant = {r.variant}")
    print(f"t = {r.t_statistic:.10g}")
    print(f"df = {r.degrees_of_freedom:.10g}")
    print(f"p = {r.p_two_tailed:.10g}")


def cmd_visualize(args):
    graph = load_model(args.weights)
    probe = read_ppm(args.image)
    hm = activation_heatmap(graph, probe, args.layer, args.filter)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{args.layer}_{args.filter}"
    write_pgm(hm.to_gray(), out / f"heatmap_{stem}.pgm")
    written = [f"heatmap_{stem}.pgm"]
    if not args.no_overlay:
        write_ppm(overlay(hm, probe, args.alpha), out / f"overlay_{stem}.ppm")
        written.append(f"overlay_{stem}.ppm")
    print("wrote " + ", ".join(str(out / w) for w in written))


def cmd_trend(args):
    from .experiment import TrendSettings, format_report, run_trend

    settings = TrendSettings(
        n_images=args.n,
        image_size=args.size,
        train_size=args.train_size,
        seed=args.seed,
        sessions=args.sessions,
        max_epochs_individual=args.max_epochs,
        max_epochs_fused=args.max_epochs_fused,
        max_epochs_session=args.session_epochs,
        bootstrap=args.bootstrap,
        workers=args.workers,
    )
    report = run_trend(args.out, settings)
    print(format_report(report))


# --- parser ------------------------------------------------------------------------


def _add_train_overrides(p):
    g = p.add_argument_group("training overrides (default: preset values)")
    g.add_argument("--learning-rate", dest="learning_rate", type=float, help="Adam learning rate")
    g.add_argument("--epochs", type=int, help="maximum number of epochs")
    g.add_argument("--batch-size", dest="batch_size", type=int, help="mini-batch size")
    g.add_argument("--early-stopping-patience", dest="early_stopping_patience", type=int, help="epochs without validation improvement before stopping")
    g.add_argument("--optimizer", choices=["adam"], help="optimizer (only adam)")
    g.add_argument("--split", help="training/validation split, e.g. 80/20")
    g.add_argument("--config", help="flat 'key = value' config file; flags override it")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cellpk", description="Lossless rotation augmentation, two-network fusion and PK evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="also log per-epoch training progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic cellularity dataset")
    s.add_argument("--n", type=int, required=True, help="number of images")
    s.add_argument("--size", type=int, default=64, help="image side length in pixels (default 64)")
    s.add_argument("--seed", type=int, default=0, help="random seed")
    s.add_argument("--out", required=True, help="output directory (images/ and manifest.csv)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("augment", help="write rotated copies of every manifest image")
    s.add_argument("--manifest", required=True, help="source manifest CSV")
    s.add_argument("--mode", choices=["baseline", "full360", "session"], required=True, help="baseline: 0/90/180/270; full360: 1..360; session: 30 new angles from the ledger")
    s.add_argument("--seed", type=int, default=0, help="seed for session angle sampling")
    s.add_argument("--ledger", help="angle ledger file (one integer per line), required for --mode session")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--workers", type=int, default=1, help="parallel workers; output is identical for any value")
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("train", help="train a built-in model")
    s.add_argument("--manifest", help="training manifest CSV (split internally per preset)")
    s.add_argument("--model", choices=["tiny-shallow", "tiny-deep"], help="architecture")
    s.add_argument("--preset", choices=["deep", "shallow", "combined"], help="hyperparameter preset")
    s.add_argument("--seed", type=int, help="master seed (split, init, shuffle, dropout)")
    s.add_argument("--out", help="output CPKW1 weight file")
    s.add_argument("--image-size", dest="image_size", type=int, help="training resolution (default 256)")
    s.add_argument("--workers", type=int, help="image loading workers")
    s.add_argument("--log", help="optional CSV of per-epoch losses and validation PK")
    s.add_argument("--checkpoint", help="also write a resumable training checkpoint here")
    s.add_argument("--resume", help="continue from a checkpoint; --epochs counts the total")
    _add_train_overrides(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("session", help="run one cumulative augmentation session")
    s.add_argument("--state", required=True, help="session state file (created when absent)")
    s.add_argument("--manifest", required=True, help="source (un-augmented) manifest; split per preset with the state seed")
    s.add_argument("--preset", required=True, choices=["deep", "shallow", "combined"], help="hyperparameter preset")
    s.add_argument("--seed", type=int, help="master seed for a new state")
    s.add_argument("--weights", help="starting weights for a new state")
    s.add_argument("--work-dir", dest="work_dir", help="output directory for a new state")
    s.add_argument("--image-size", dest="image_size", type=int, help="training resolution for a new state (default 256)")
    s.add_argument("--workers", type=int, default=1, help="augmentation and loading workers")
    _add_train_overrides(s)
    s.set_defaults(func=cmd_session)

    s = sub.add_parser("fuse", help="combine two trained models into the parallel architecture")
    s.add_argument("--a", required=True, help="first model weights (prefix a.)")
    s.add_argument("--b", required=True, help="second model weights (prefix b.)")
    s.add_argument("--seed", type=int, default=0, help="seed for the new output head")
    s.add_argument("--out", required=True, help="output CPKW1 weight file")
    s.add_argument("--finetune", action="store_true", help="train the fused model after surgery")
    s.add_argument("--manifest", help="manifest for fine-tuning")
    s.add_argument("--preset", default="combined", choices=["deep", "shallow", "combined"], help="fine-tuning preset (default combined)")
    _add_train_overrides(s)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("predict", help="write id,prediction rows for a manifest")
    s.add_argument("--weights", required=True, help="CPKW1 weight file")
    s.add_argument("--manifest", required=True, help="manifest CSV")
    s.add_argument("--out", required=True, help="predictions CSV")
    s.add_argument("--workers", type=int, default=1, help="image loading workers; output is identical for any value")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="per-rater and mean PK of a prediction file")
    s.add_argument("--pred", required=True, help="predictions CSV (id,prediction)")
    s.add_argument("--ref", required=True, help="reference CSV (id,label1[,label2,...]) or a manifest")
    s.add_argument("--bootstrap", type=int, default=0, help="number of bootstrap resamples (0 = off)")
    s.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    s.add_argument("--samples-out", dest="samples_out", help="write bootstrap mean-PK samples, one per line")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ttest", help="unpaired t-test on two files of numbers")
    s.add_argument("--a", required=True, help="first sample, one number per line")
    s.add_argument("--b", required=True, help="second sample, one number per line")
    s.add_argument("--variant", choices=["welch", "student"], default="welch", help="default welch")
    s.set_defaults(func=cmd_ttest)

    s = sub.add_parser("visualize", help="heatmap of one convolution filter on an image")
    s.add_argument("--weights", required=True, help="CPKW1 weight file")
    s.add_argument("--image", required=True, help="probe image (P6 PPM)")
    s.add_argument("--layer", required=True, help="convolution node name, e.g. block2_k5 or a.conv4")
    s.add_argument("--filter", type=int, required=True, help="filter index within the layer")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--alpha", type=float, default=0.4, help="overlay opacity (default 0.4)")
    s.add_argument("--no-overlay", dest="no_overlay", action="store_true", help="only write the PGM heatmap")
    s.set_defaults(func=cmd_visualize)

    s = sub.add_parser("trend", help="synthetic end-to-end trend experiment with a PK report")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--n", type=int, default=500, help="number of synthetic images (default 500)")
    s.add_argument("--size", type=int, default=64, help="synthetic image size (default 64)")
    s.add_argument("--train-size", dest="train_size", type=int, default=32, help="training resolution (default 32)")
    s.add_argument("--seed", type=int, default=2022, help="master seed")
    s.add_argument("--sessions", type=int, default=4, help="augmentation sessions (default 4)")
    s.add_argument("--max-epochs", dest="max_epochs", type=int, default=50, help="epoch cap for the individual models")
    s.add_argument("--max-epochs-fused", dest="max_epochs_fused", type=int, default=None, help="epoch cap for the fused model (default: preset)")
    s.add_argument("--session-epochs", dest="session_epochs", type=int, default=1, help="epoch cap per session")
    s.add_argument("--bootstrap", type=int, default=200, help="bootstrap resamples for the t-tests")
    s.add_argument("--workers", type=int, default=1, help="augmentation and loading workers")
    s.set_defaults(func=cmd_trend)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"cellpk {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"cellpk {args.command}: {msg}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"cellpk {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
