"""End-to-end trend experiment on synthetic data.

Trains the shallow and deep analogs with their presets, fuses and fine-tunes
them with the combined preset, then runs augmentation sessions on the deep
model, scoring average PK on a held-out test split after every stage.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .metric import average_pk, bootstrap_average_pk, unpaired_t_test
from .models import build_model, fuse, presets
from .nn.io import save_weights
from .nn.train import TrainConfig, predict_array, train
from .pipeline import (
    ImageLoader,
    SessionState,
    baseline_augment,
    generate_synthetic_dataset,
    load_dataset,
    load_model,
    run_session,
    split,
    write_manifest,
    write_session_state,
)

__all__ = ["TrendSettings", "run_trend", "format_report"]

log = logging.getLogger(__name__)


@dataclass
class TrendSettings:
    n_images: int = 500
    image_size: int = 64
    train_size: int = 32
    seed: int = 2022
    test_fraction: float = 0.2
    sessions: int = 4
    # epoch caps keep the run at desk scale; None keeps the preset value
    max_epochs_individual: int | None = 50
    max_epochs_fused: int | None = None
    max_epochs_session: int | None = 1
    bootstrap: int = 200
    workers: int = 1


@dataclass
class TrendReport:
    settings: dict
    pk: dict = field(default_factory=dict)
    epochs: dict = field(default_factory=dict)
    ttests: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)
    seconds: float = 0.0


def _cap(cfg: TrainConfig, cap: int | None, seed: int) -> TrainConfig:
    return replace(cfg, max_epochs=min(cfg.max_epochs, cap) if cap else cfg.max_epochs, seed=seed)


def run_trend(out_dir: str | os.PathLike, settings: TrendSettings | None = None) -> TrendReport:
    s = settings or TrendSettings()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    rng = np.random.default_rng(s.seed)
    seeds = {k: int(v) for k, v in zip(("split", "shallow", "deep", "fuse", "combined", "session", "boot"), rng.integers(0, 2**31, size=7))}

    data = generate_synthetic_dataset(s.n_images, s.image_size, s.seed, out / "data")
    dev, test = split(data, 1.0 - s.test_fraction, seeds["split"])
    loader = ImageLoader(s.train_size)
    test_data = load_dataset(test, loader, s.workers)
    test_ref = test.label_columns()
    table = presets()
    report = TrendReport(settings=asdict(s))

    def score(graph, key):
        pred = predict_array(graph, test_data.images)
        report.pk[key] = average_pk(test_ref, pred).mean_pk
        log.info("%s: test PK %.4f", key, report.pk[key])
        return pred

    # individual networks share the 80/20 split of the dev pool
    train_src, val = split(dev, table["deep"].train_fraction, seeds["split"] + 1)
    base_aug = baseline_augment(train_src, out / "baseline", s.workers)
    write_manifest(base_aug, out / "baseline" / "manifest.csv")
    train_data = load_dataset(base_aug, loader, s.workers)
    val_data = load_dataset(val, loader, s.workers)
    input_shape = (3, s.train_size, s.train_size)
    graphs, preds = {}, {}
    for model, preset in (("tiny-shallow", "shallow"), ("tiny-deep", "deep")):
        cfg = _cap(table[preset], s.max_epochs_individual, seeds[preset])
        g = build_model(model, input_shape, seeds[preset])
        g, tlog = train(g, train_data, val_data, cfg, val.label_columns())
        report.epochs[model] = len(tlog)
        save_weights(g, out / f"{model}.cpkw")
        graphs[model] = g
        preds[model] = score(g, model)

    # combined model: own 95/5 split
    combined_cfg = _cap(table["combined"], s.max_epochs_fused, seeds["combined"])
    c_src, c_val = split(dev, combined_cfg.train_fraction, seeds["split"] + 2)
    c_aug = baseline_augment(c_src, out / "baseline_combined", s.workers)
    fused = fuse(graphs["tiny-shallow"], graphs["tiny-deep"], seeds["fuse"])
    fused, tlog = train(fused, load_dataset(c_aug, loader, s.workers), load_dataset(c_val, loader, s.workers), combined_cfg, c_val.label_columns())
    report.epochs["fused"] = len(tlog)
    save_weights(fused, out / "fused.cpkw")
    preds["fused"] = score(fused, "fused")

    # augmentation sessions continue from the baseline deep model
    state = SessionState(
        session_index=0,
        seed=seeds["session"],
        weights_path=out / "tiny-deep.cpkw",
        train_manifest=out / "baseline" / "manifest.csv",
        work_dir=out / "sessions",
        image_size=s.train_size,
    )
    session_cfg = _cap(table["deep"], s.max_epochs_session, seeds["deep"])
    report.pk["session_0"] = report.pk["tiny-deep"]
    for _ in range(s.sessions):
        state, tlog, _ = run_session(state, train_src, session_cfg, val, loader=loader, workers=s.workers)
        write_session_state(state, out / "sessions" / "state.txt")
        preds[f"session_{state.session_index}"] = score(load_model(state.weights_path), f"session_{state.session_index}")
        report.epochs[f"session_{state.session_index}"] = len(tlog)

    # bootstrap PK populations for the unpaired t-tests
    boot = {
        k: bootstrap_average_pk(test_ref, preds[k], s.bootstrap, seeds["boot"]).tolist()
        for k in ("tiny-deep", "fused", "session_1") if k in preds
    }
    if "fused" in boot:
        r = unpaired_t_test(boot["fused"], boot["tiny-deep"])
        report.ttests["fused_vs_deep"] = asdict(r)
    if "session_1" in boot:
        r = unpaired_t_test(boot["session_1"], boot["tiny-deep"])
        report.ttests["session1_vs_baseline"] = asdict(r)

    pk = report.pk
    report.checks["fused_ge_max_individual"] = bool(pk["fused"] >= max(pk["tiny-shallow"], pk["tiny-deep"]))
    if s.sessions >= 1:
        report.checks["session1_ge_baseline"] = bool(pk["session_1"] >= pk["session_0"])
    report.seconds = time.time() - t0
    (out / "trend_report.json").write_text(json.dumps(asdict(report), indent=2))
    (out / "trend_report.txt").write_text(format_report(report) + "\n")
    return report


def format_report(report: TrendReport) -> str:
    lines = ["stage                 test PK   epochs"]
    for key, value in report.pk.items():
        ep = report.epochs.get(key, "")
        lines.append(f"{key:<20}  {value:7.4f}   {ep}")
    for name, t in report.ttests.items():
        lines.append(f"t-test {name}: t={t['t_statistic']:.3f} df={t['degrees_of_freedom']:.1f} p={t['p_two_tailed']:.3g}")
    for name, ok in report.checks.items():
        lines.append(f"trend {name}: {'yes' if ok else 'no'}")
    lines.append(f"runtime {report.seconds:.0f} s")
    return "\n".join(lines)
