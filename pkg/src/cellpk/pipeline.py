"""Datasets and the session-based augmentation workflow.

A manifest is a CSV ``id,image_path,label[,label2,...]``; image paths are
resolved relative to the manifest's directory. Augmented copies are named
``<source-stem>_rot<theta:03d>.ppm`` and keep the id suffix ``_rot<theta:03d>``,
so every row can be traced back to its source and stays on the same side of
every split as that source.
"""

from __future__ import annotations

import csv
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import augment
from .imgio import read_ppm, resize, to_float, quantize, write_ppm
from .metric import AveragePk, average_pk
from .models import build_for_weights
from .nn.graph import ModelGraph
from .nn.io import INPUT_SHAPE_KEY, load_weights, read_tensors, save_weights
from .nn.train import Dataset, TrainConfig, TrainLog, predict_array, train

__all__ = [
    "ManifestError",
    "ManifestRow",
    "Manifest",
    "load_manifest",
    "write_manifest",
    "split",
    "source_id",
    "augment_manifest",
    "baseline_augment",
    "ImageLoader",
    "load_dataset",
    "SessionState",
    "read_session_state",
    "write_session_state",
    "run_session",
    "render_synthetic_patch",
    "generate_synthetic_dataset",
    "load_model",
    "predict",
    "write_predictions",
    "read_predictions",
    "read_reference",
]

log = logging.getLogger(__name__)

_ROT_SUFFIX = re.compile(r"_rot(\d{3})$")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRow:
    id: str
    image_path: Path
    labels: tuple[float, ...]


@dataclass
class Manifest:
    rows: list[ManifestRow] = field(default_factory=list)
    label_names: tuple[str, ...] = ("label",)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.rows]

    def label_columns(self) -> np.ndarray:
        """Labels as (n_raters, n_rows)."""
        return np.asarray([r.labels for r in self.rows], dtype=np.float64).T.reshape(len(self.label_names), -1)

    def targets(self) -> np.ndarray:
        """Training target per row: the mean over reference raters."""
        return self.label_columns().mean(axis=0)

    def subset(self, rows: Iterable[ManifestRow]) -> "Manifest":
        return Manifest(list(rows), self.label_names)


def _parse_label(text: str, path, lineno: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ManifestError(f"{path}:{lineno}: label {text!r} is not a number")
    if not 0.0 <= value <= 1.0:
        raise ManifestError(f"{path}:{lineno}: label {value} outside [0, 1]")
    return value


def load_manifest(
    path: str | os.PathLike,
    breastpathq: bool = False,
    image_dir: str | os.PathLike | None = None,
    check_files: bool = True,
) -> Manifest:
    """Parse a manifest CSV.

    With ``breastpathq=True`` the challenge layout ``slide,rid,y[,y2...]`` is
    accepted instead: the id becomes ``<slide>_<rid>`` and the image is
    ``<image_dir>/<slide>_<rid>.ppm`` (``image_dir`` defaults to the manifest's
    directory).
    """
    path = Path(path)
    base = path.parent
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ManifestError(f"{path}:1: empty manifest")
        header = [h.strip() for h in header]
        if breastpathq:
            if header[:2] != ["slide", "rid"] or len(header) < 3:
                raise ManifestError(f"{path}:1: expected header 'slide,rid,y[,...]', got {','.join(header)!r}")
        elif header[:2] != ["id", "image_path"] or len(header) < 3:
            raise ManifestError(f"{path}:1: expected header 'id,image_path,label[,...]', got {','.join(header)!r}")
        label_names = tuple(header[2:])
        img_base = Path(image_dir) if image_dir is not None else base
        rows, seen = [], set()
        for lineno, rec in enumerate(reader, 2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ManifestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            rec = [c.strip() for c in rec]
            if breastpathq:
                rid = f"{rec[0]}_{rec[1]}"
                img = img_base / f"{rid}.ppm"
            else:
                rid = rec[0]
                img = Path(rec[1])
                img = img if img.is_absolute() else base / img
            if not rid:
                raise ManifestError(f"{path}:{lineno}: empty id")
            if rid in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate id {rid!r}")
            seen.add(rid)
            labels = tuple(_parse_label(v, path, lineno) for v in rec[2:])
            if check_files and not img.is_file():
                raise ManifestError(f"{path}:{lineno}: image file {str(img)!r} not found")
            rows.append(ManifestRow(rid, img, labels))
    return Manifest(rows, label_names)


def write_manifest(manifest: Manifest, path: str | os.PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "image_path", *manifest.label_names])
        for r in manifest.rows:
            img = Path(r.image_path).resolve()
            try:
                shown = img.relative_to(base).as_posix()
            except ValueError:
                shown = os.path.relpath(img, base)
            w.writerow([r.id, shown, *(repr(float(v)) for v in r.labels)])


def source_id(row_id: str) -> str:
    """Strip any ``_rotNNN`` suffixes to recover the original source id."""
    while True:
        stripped = _ROT_SUFFIX.sub("", row_id)
        if stripped == row_id:
            return row_id
        row_id = stripped


def split(manifest: Manifest, train_fraction: float, seed: int) -> tuple[Manifest, Manifest]:
    """Seeded shuffle then partition into (train, validation).

    Rows are grouped by source id first, so augmented copies never straddle
    the split.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    if len(manifest) == 0:
        raise ValueError("cannot split an empty manifest")
    groups: dict[str, list[ManifestRow]] = {}
    for r in manifest.rows:
        groups.setdefault(source_id(r.id), []).append(r)
    keys = list(groups)
    order = np.random.default_rng([seed, 0x5B1]).permutation(len(keys))
    n_train = int(round(len(keys) * train_fraction))
    if n_train == 0 or n_train == len(keys):
        raise ValueError(f"a {train_fraction:.2f} split of {len(keys)} sources leaves one side empty")
    train_keys = {keys[i] for i in order[:n_train]}
    train_rows = [r for r in manifest.rows if source_id(r.id) in train_keys]
    val_rows = [r for r in manifest.rows if source_id(r.id) not in train_keys]
    return manifest.subset(train_rows), manifest.subset(val_rows)


# --- augmentation batches ------------------------------------------------------


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def augment_manifest(
    manifest: Manifest,
    angles: Sequence[int],
    out_dir: str | os.PathLike,
    workers: int = 1,
) -> Manifest:
    """Write the lossless rotation of every row at every angle; returns the new rows.

    Output order is row-major over (manifest row, angle) regardless of ``workers``.
    """
    angles = [augment.normalize_angle(a) for a in angles]
    if len(set(angles)) != len(angles):
        raise ValueError("duplicate rotation angles")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stems = [Path(r.image_path).stem for r in manifest.rows]
    if len(set(stems)) != len(stems):
        raise ManifestError("source image file names must have unique stems")

    def work(row: ManifestRow) -> list[ManifestRow]:
        patch = read_ppm(row.image_path)
        stem = Path(row.image_path).stem
        out = []
        for theta in angles:
            target = out_dir / augment.augmented_name(stem, theta)
            write_ppm(augment.rotate_lossless(patch, theta, row.id).image, target)
            out.append(ManifestRow(f"{row.id}_rot{theta:03d}", target, row.labels))
        return out

    batches = _map(work, manifest.rows, workers)
    return manifest.subset(r for batch in batches for r in batch)


def baseline_augment(manifest: Manifest, out_dir: str | os.PathLike, workers: int = 1) -> Manifest:
    """Each source at 0, 90, 180 and 270 degrees (four rows per source)."""
    return augment_manifest(manifest, augment.BASELINE_ANGLES, out_dir, workers)


# --- image loading ---------------------------------------------------------------


class ImageLoader:
    """Reads patches and resizes them to the training resolution, caching results."""

    def __init__(self, size: int, cache: bool = True):
        self.size = int(size)
        self._cache: dict[str, np.ndarray] | None = {} if cache else None

    def load(self, path: str | os.PathLike) -> np.ndarray:
        key = str(path)
        if self._cache is not None and key in self._cache:
            return self._cache[key]
        patch = read_ppm(path)
        if patch.shape[:2] != (self.size, self.size):
            patch = quantize(resize(to_float(patch), self.size, self.size))
        chw = np.ascontiguousarray(patch.transpose(2, 0, 1))
        if self._cache is not None:
            self._cache[key] = chw
        return chw

    def load_many(self, paths: Sequence, workers: int = 1) -> np.ndarray:
        arrs = _map(self.load, list(paths), workers)
        if not arrs:
            return np.zeros((0, 3, self.size, self.size), dtype=np.uint8)
        return np.stack(arrs)


def load_dataset(manifest: Manifest, loader: ImageLoader, workers: int = 1) -> Dataset:
    images = loader.load_many([r.image_path for r in manifest.rows], workers)
    return Dataset(images, manifest.targets())


# --- sessions -------------------------------------------------------------------


@dataclass
class SessionState:
    """Progress of the cumulative-augmentation workflow.

    ``session_index`` counts completed sessions (0 = only the baseline model).
    """

    session_index: int
    seed: int
    weights_path: Path
    train_manifest: Path
    work_dir: Path
    image_size: int = 256
    angle_ledger: list[int] = field(default_factory=list)

    @property
    def cumulative_rotation_count(self) -> int:
        return len(self.angle_ledger)


_STATE_KEYS = ("session_index", "seed", "weights_path", "train_manifest", "work_dir", "image_size", "cumulative_rotation_count")


def write_session_state(state: SessionState, path: str | os.PathLike) -> None:
    """Write the state file; paths are stored relative to its directory."""
    path = Path(path)
    here = path.parent.resolve()

    def rel(p):
        return Path(os.path.relpath(Path(p).resolve(), here)).as_posix()

    lines = [
        f"session_index = {state.session_index}",
        f"seed = {state.seed}",
        f"weights_path = {rel(state.weights_path)}",
        f"train_manifest = {rel(state.train_manifest)}",
        f"work_dir = {rel(state.work_dir)}",
        f"image_size = {state.image_size}",
        f"cumulative_rotation_count = {state.cumulative_rotation_count}",
    ]
    lines += [str(a) for a in state.angle_ledger]
    path.write_text("\n".join(lines) + "\n")


def read_session_state(path: str | os.PathLike) -> SessionState:
    """Parse ``key = value`` lines plus one ledger angle per bare integer line.

    Relative paths are resolved against the state file's directory.
    """
    path = Path(path)
    values: dict[str, str] = {}
    ledger: list[int] = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" in line:
            key, _, val = (s.strip() for s in line.partition("="))
            if key not in _STATE_KEYS:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = val
        else:
            try:
                ledger.append(augment.normalize_angle(int(line)))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: expected 'key = value' or an integer angle, got {line!r}")
    missing = [k for k in ("session_index", "seed", "weights_path", "train_manifest", "work_dir") if k not in values]
    if missing:
        raise ValueError(f"{path}: missing keys {missing}")

    def p(v):
        q = Path(v)
        return q if q.is_absolute() else path.parent / q

    state = SessionState(
        session_index=int(values["session_index"]),
        seed=int(values["seed"]),
        weights_path=p(values["weights_path"]),
        train_manifest=p(values["train_manifest"]),
        work_dir=p(values["work_dir"]),
        image_size=int(values.get("image_size", 256)),
        angle_ledger=ledger,
    )
    if "cumulative_rotation_count" in values and int(values["cumulative_rotation_count"]) != len(ledger):
        raise ValueError(f"{path}: cumulative_rotation_count disagrees with the ledger size {len(ledger)}")
    if len(set(ledger)) != len(ledger):
        raise ValueError(f"{path}: ledger contains a repeated angle")
    return state


def run_session(
    state: SessionState,
    base_manifest: Manifest,
    config: TrainConfig,
    val_set: Manifest,
    loader: ImageLoader | None = None,
    workers: int = 1,
    state_path: str | os.PathLike | None = None,
) -> tuple[SessionState, TrainLog, AveragePk]:
    """One augmentation session.

    Draws 30 unused angles, writes the lossless rotations of every base image,
    appends them to the cumulative training manifest, reloads the previous
    weights into a freshly built graph, trains, scores average PK on
    ``val_set`` and persists weights, manifest and (optionally) the state file.
    """
    index = state.session_index + 1
    angles = augment.sample_session_angles(state.seed, index, state.angle_ledger)
    work = Path(state.work_dir)
    session_dir = work / f"session_{index:02d}"
    new_rows = augment_manifest(base_manifest, angles, session_dir / "images", workers)
    cumulative = load_manifest(state.train_manifest)
    if cumulative.label_names != base_manifest.label_names:
        raise ManifestError("base manifest and cumulative manifest disagree on label columns")
    cumulative = cumulative.subset(cumulative.rows + new_rows.rows)
    manifest_path = session_dir / "train_manifest.csv"
    write_manifest(cumulative, manifest_path)

    tensors = read_tensors(state.weights_path)
    graph = build_for_weights(tensors, (3, state.image_size, state.image_size))
    load_weights(graph, state.weights_path)

    loader = loader or ImageLoader(state.image_size)
    train_data = load_dataset(cumulative, loader, workers)
    val_data = load_dataset(val_set, loader, workers)
    cfg = replace(config, seed=int(np.random.default_rng([state.seed, index]).integers(2**31)))
    graph, tlog = train(graph, train_data, val_data, cfg, val_reference=val_set.label_columns())
    scores = average_pk(val_set.label_columns(), predict_array(graph, val_data.images))

    weights_path = session_dir / "weights.cpkw"
    save_weights(graph, weights_path)
    new_state = replace(
        state,
        session_index=index,
        weights_path=weights_path,
        train_manifest=manifest_path,
        angle_ledger=list(state.angle_ledger) + list(angles),
    )
    augment.write_ledger(new_state.angle_ledger, work / "ledger.txt")
    if state_path is not None:
        write_session_state(new_state, state_path)
    log.info("session %d: %d training rows, PK %.4f", index, len(cumulative), scores.mean_pk)
    return new_state, tlog, scores


# --- synthetic data --------------------------------------------------------------

_MALIGNANT = np.array([92.0, 38.0, 122.0])
_BENIGN = np.array([150.0, 128.0, 205.0])
_STROMA = np.array([232.0, 176.0, 198.0])


def _ellipse_mask(size: int, cx, cy, ax, ay, phi) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    c, s = np.cos(phi), np.sin(phi)
    u = (xs - cx) * c + (ys - cy) * s
    v = -(xs - cx) * s + (ys - cy) * c
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _random_ellipses(rng: np.random.Generator, size: int, count: int, r_lo: float, r_hi: float):
    out = []
    for _ in range(count):
        cx, cy = rng.uniform(0, size - 1, size=2)
        ax, ay = rng.uniform(r_lo * size, r_hi * size, size=2)
        out.append((cx, cy, ax, ay, rng.uniform(0, np.pi)))
    return out


def render_synthetic_patch(
    size: int,
    rng: np.random.Generator,
    ellipses: Sequence[tuple[float, float, float, float, float]] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw a histology-like patch; returns ``(patch, malignant_mask)``.

    ``ellipses`` are ``(cx, cy, semi_axis_x, semi_axis_y, angle_rad)``; when None
    a seeded random number of malignant ellipses is drawn. Pale benign blobs
    are added as distractors and never count toward the label.
    """
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / size
    fx, fy, ph = rng.uniform(1, 4, size=3)
    shade = 10.0 * np.sin(2 * np.pi * (fx * xs + ph)) * np.cos(2 * np.pi * fy * ys)
    img = _STROMA + shade[..., None] + rng.normal(0, 6, size=(size, size, 3))
    for e in _random_ellipses(rng, size, int(rng.integers(0, 6)), 0.03, 0.10):
        img[_ellipse_mask(size, *e)] = _BENIGN + rng.normal(0, 6, size=3)
    if ellipses is None:
        ellipses = _random_ellipses(rng, size, int(rng.integers(0, 14)), 0.04, 0.22)
    mask = np.zeros((size, size), dtype=bool)
    for e in ellipses:
        mask |= _ellipse_mask(size, *e)
    img[mask] = _MALIGNANT + rng.normal(0, 8, size=(int(mask.sum()), 3))
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8), mask


def generate_synthetic_dataset(n: int, image_size: int, seed: int, out_dir: str | os.PathLike) -> Manifest:
    """Write ``n`` synthetic patches plus ``manifest.csv``; label = malignant pixel fraction."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if image_size < 1:
        raise ValueError("image_size must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n):
        patch, mask = render_synthetic_patch(image_size, np.random.default_rng([seed, i]))
        path = out_dir / "images" / f"syn_{i:05d}.ppm"
        write_ppm(patch, path)
        rows.append(ManifestRow(f"syn_{i:05d}", path, (float(np.count_nonzero(mask)) / mask.size,)))
    manifest = Manifest(rows, ("label",))
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest


# --- prediction -----------------------------------------------------------------


def load_model(path: str | os.PathLike) -> ModelGraph:
    """Rebuild the graph a CPKW1 file was saved from and load its weights."""
    tensors = read_tensors(path)
    if INPUT_SHAPE_KEY not in tensors:
        raise ValueError(f"{path}: no {INPUT_SHAPE_KEY} record; cannot infer the input size")
    shape = tuple(int(v) for v in tensors[INPUT_SHAPE_KEY])
    graph = build_for_weights(tensors, shape)
    return load_weights(graph, path)


def predict(
    model: ModelGraph | str | os.PathLike,
    manifest: Manifest,
    workers: int = 1,
    loader: ImageLoader | None = None,
) -> list[tuple[str, float]]:
    """Eval-mode prediction per manifest row, in manifest order."""
    graph = model if isinstance(model, ModelGraph) else load_model(model)
    loader = loader or ImageLoader(graph.input_shape[1], cache=False)
    images = loader.load_many([r.image_path for r in manifest.rows], workers)
    preds = predict_array(graph, images)
    return [(r.id, float(p)) for r, p in zip(manifest.rows, preds)]


def write_predictions(rows: Iterable[tuple[str, float]], path: str | os.PathLike) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "prediction"])
        for rid, p in rows:
            w.writerow([rid, repr(float(p))])


def read_predictions(path: str | os.PathLike) -> dict[str, float]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["id", "prediction"]:
            raise ManifestError(f"{path}:1: expected header 'id,prediction'")
        out: dict[str, float] = {}
        for lineno, rec in enumerate(reader, 2):
            if not rec:
                continue
            if len(rec) != 2:
                raise ManifestError(f"{path}:{lineno}: expected 2 fields")
            if rec[0] in out:
                raise ManifestError(f"{path}:{lineno}: duplicate id {rec[0]!r}")
            try:
                out[rec[0].strip()] = float(rec[1])
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: prediction {rec[1]!r} is not a number")
    return out


def read_reference(path: str | os.PathLike) -> tuple[dict[str, tuple[float, ...]], tuple[str, ...]]:
    """Reference labels: ``id,label1[,label2...]``; a full manifest is also accepted."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if len(header) < 2 or header[0] != "id":
            raise ManifestError(f"{path}:1: expected header 'id,label1[,label2,...]'")
        skip = 1 if header[1] == "image_path" else 0
        names = tuple(header[1 + skip :])
        if not names:
            raise ManifestError(f"{path}:1: no label columns")
        out: dict[str, tuple[float, ...]] = {}
        for lineno, rec in enumerate(reader, 2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ManifestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            if rec[0] in out:
                raise ManifestError(f"{path}:{lineno}: duplicate id {rec[0]!r}")
            out[rec[0].strip()] = tuple(_parse_label(v, path, lineno) for v in rec[1 + skip :])
    return out, names
