"""Datasets, experiment protocols and result export."""
import csv
import gzip
import io
import json
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from sklearn.model_selection import train_test_split

from . import attacks as attacks_mod
from . import nnet
from .detector import AdaBoostDetector
from .errors import (BadMagic, CountMismatch, DataError, InsufficientPairs, InsufficientSamples, InvalidDims,
                     IoFailure, TruncatedFile)
from .kp import kp_batch
from .tensorio import load_tensor, save_tensor

log = logging.getLogger(__name__)

MIN_ROWS = 16
SCHEMA_VERSION = 1
KP_COLUMNS = ("sample_id", "source", "model_id", "k", "p", "p_dominant_at_k", "never_flipped", "n")
SOURCES = ("benign", "deepfool", "jsma", "cw")


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # (N, w, h, c) in [0, 1]
    labels: np.ndarray  # (N,) ground-truth classes
    name: str = "dataset"
    split: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatch(f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, w, h, c), got {self.images.shape}")

    def __len__(self):
        return len(self.labels)

    @property
    def dims(self):
        return tuple(self.images.shape[1:])

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0


# --------------------------------------------------------------------------
# datasets

def _read(path):
    opener = gzip.open if str(path).endswith(".gz") else open
    try:
        with opener(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise IoFailure(str(exc), path) from exc


def ingest_idx(images_path, labels_path, name="idx"):
    """Load an IDX image/label pair (optionally gzipped); pixels are scaled by 1/255."""
    ibuf, lbuf = _read(images_path), _read(labels_path)
    if len(ibuf) < 4 or struct.unpack_from(">I", ibuf)[0] != 0x00000803:
        raise BadMagic("expected IDX image magic 0x00000803", images_path, 0)
    if len(lbuf) < 4 or struct.unpack_from(">I", lbuf)[0] != 0x00000801:
        raise BadMagic("expected IDX label magic 0x00000801", labels_path, 0)
    if len(ibuf) < 16:
        raise TruncatedFile("IDX image header truncated", images_path, len(ibuf))
    if len(lbuf) < 8:
        raise TruncatedFile("IDX label header truncated", labels_path, len(lbuf))
    n, rows, cols = struct.unpack_from(">III", ibuf, 4)
    (nl,) = struct.unpack_from(">I", lbuf, 4)
    if n != nl:
        raise CountMismatch(f"{n} images but {nl} labels", labels_path, 4)
    need = 16 + n * rows * cols
    if len(ibuf) < need:
        raise TruncatedFile(f"expected {need} bytes", images_path, len(ibuf))
    if len(lbuf) < 8 + n:
        raise TruncatedFile(f"expected {8 + n} bytes", labels_path, len(lbuf))
    pix = np.frombuffer(ibuf, dtype=np.uint8, count=n * rows * cols, offset=16)
    images = pix.reshape(n, rows, cols, 1).astype(np.float64) / 255.0
    labels = np.frombuffer(lbuf, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    return Dataset(images, labels, name=name)


def write_idx(dataset, images_path, labels_path):
    """Write a single-channel dataset as IDX ubyte files (pixels rounded to /255)."""
    if dataset.images.shape[3] != 1:
        raise DataError("IDX export supports single-channel images only")
    n, rows, cols, _ = dataset.images.shape
    pix = np.round(np.clip(dataset.images[..., 0], 0, 1) * 255).astype(np.uint8)
    try:
        with open(images_path, "wb") as fh:
            fh.write(struct.pack(">IIII", 0x00000803, n, rows, cols) + pix.tobytes())
        with open(labels_path, "wb") as fh:
            fh.write(struct.pack(">II", 0x00000801, n) + dataset.labels.astype(np.uint8).tobytes())
    except OSError as exc:
        raise IoFailure(str(exc), images_path) from exc


def synth_dataset(seed, num_classes, samples_per_class, dims=(32, 32, 1), noise=0.08, name="synth"):
    """Oriented-bar images, one orientation per class, plus Gaussian noise.

    Class ``c`` draws a soft bar whose normal points at angle ``pi * c / C``,
    at a random offset, width, contrast and background level.  Samples are
    interleaved by class.
    """
    w, h, c = (int(v) for v in dims)
    if w < MIN_ROWS:
        raise InvalidDims(f"images need at least {MIN_ROWS} rows, got {w}")
    if min(h, c) < 1 or num_classes < 2 or samples_per_class < 1:
        raise InvalidDims("invalid dims, class count or sample count")
    rng = np.random.default_rng(seed)
    u = np.arange(w)[:, None] - (w - 1) / 2.0
    v = np.arange(h)[None, :] - (h - 1) / 2.0
    n = num_classes * samples_per_class
    images = np.empty((n, w, h, c))
    labels = np.tile(np.arange(num_classes), samples_per_class)
    for i, cls in enumerate(labels):
        theta = np.pi * cls / num_classes
        offset = rng.uniform(-0.2, 0.2) * min(w, h)
        width = rng.uniform(1.5, 3.0)
        contrast = rng.uniform(0.55, 0.85)
        background = rng.uniform(0.05, 0.25)
        gains = rng.uniform(0.8, 1.0, size=c)
        dist = u * np.cos(theta) + v * np.sin(theta) - offset
        bar = background + contrast * np.exp(-dist ** 2 / (2 * width ** 2))
        img = bar[:, :, None] * gains + noise * rng.standard_normal((w, h, c))
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels.astype(np.int64), name=name)


def save_dataset(dataset, directory):
    os.makedirs(directory, exist_ok=True)
    save_tensor(dataset.images, os.path.join(directory, "images.kpt"))
    save_tensor(dataset.labels, os.path.join(directory, "labels.kpt"))


def load_dataset(directory):
    """Load ``images.kpt``/``labels.kpt`` or ``images.idx``/``labels.idx`` from a directory."""
    kpt = os.path.join(directory, "images.kpt")
    if os.path.exists(kpt):
        images = load_tensor(kpt).astype(np.float64)
        labels = load_tensor(os.path.join(directory, "labels.kpt")).astype(np.int64)
        return Dataset(images, labels, name=os.path.basename(os.path.normpath(directory)))
    idx = os.path.join(directory, "images.idx")
    if os.path.exists(idx):
        return ingest_idx(idx, os.path.join(directory, "labels.idx"))
    raise IoFailure("no images.kpt or images.idx found", directory)


# --------------------------------------------------------------------------
# adversarial sets and pair runs

def correct_indices(model, dataset, batch=256):
    preds = np.concatenate([nnet.classify(model, dataset.images[i:i + batch])
                            for i in range(0, len(dataset), batch)]) if len(dataset) else np.array([])
    return np.nonzero(preds == dataset.labels)[0]


def target_for(label, num_classes):
    return (int(label) + 1) % num_classes


def make_adversarial_set(model, attack, dataset, count=100, params=None, parallelism=1):
    """Attack correctly classified samples in dataset order until ``count`` succeed.

    Targeted attacks aim at ``(true + 1) mod C``.  Only successful results are
    returned, each tagged with ``source_index``; fewer than ``count`` come back
    if the dataset runs out.  With ``parallelism > 1`` candidates are attacked
    in order-preserving chunks, so the result is the same as a sequential scan.
    """
    fn = attacks_mod.ATTACKS[attack]
    params = dict(params or {})
    correct = correct_indices(model, dataset)
    if len(correct) < count:
        raise InsufficientSamples(f"{len(correct)} correctly classified samples, need {count}")

    def one(i):
        x, label = dataset.images[i], int(dataset.labels[i])
        if attack in attacks_mod.TARGETED:
            return fn(model, x, target_for(label, model.num_classes), **params)
        return fn(model, x, **params)

    out = []
    tried = 0
    chunk = max(int(parallelism), 1)
    pool = ThreadPoolExecutor(max_workers=chunk) if chunk > 1 else None
    try:
        for start in range(0, len(correct), chunk):
            if len(out) >= count:
                break
            idx = correct[start:start + chunk]
            results = list(pool.map(one, idx)) if pool else [one(i) for i in idx]
            for i, res in zip(idx, results):
                if len(out) >= count:
                    break
                tried += 1
                if res.success:
                    out.append(replace(res, source_index=int(i)))
    finally:
        if pool:
            pool.shutdown()
    log.info("%s on %s: %d/%d successful", attack, model.name, len(out), tried)
    return out


@dataclass(frozen=True)
class KpRow:
    sample_id: int
    source: str
    model_id: str
    k: int
    p: float
    p_dominant_at_k: float
    never_flipped: bool
    n: int

    @classmethod
    def from_point(cls, point, sample_id, source, model_id):
        return cls(int(sample_id), source, model_id, point.k, point.p, point.p_dominant_at_k,
                   point.never_flipped, point.n)

    @property
    def features(self):
        return (float(self.k), self.p)


@dataclass(frozen=True)
class PairRun:
    attack_id: str
    model_id: str
    adversarial: tuple
    benign: tuple

    def __post_init__(self):
        object.__setattr__(self, "adversarial", tuple(self.adversarial))
        object.__setattr__(self, "benign", tuple(self.benign))
        for row in self.adversarial:
            if row.source != self.attack_id or row.model_id != self.model_id:
                raise DataError(f"row {row.sample_id} does not belong to {self.label}")
        for row in self.benign:
            if row.source != "benign" or row.model_id != self.model_id:
                raise DataError(f"benign row {row.sample_id} does not belong to {self.label}")

    @property
    def label(self):
        return f"{self.attack_id}/{self.model_id}"

    @property
    def counts(self):
        return {"adversarial": len(self.adversarial), "benign": len(self.benign)}

    def xy(self):
        rows = self.benign + self.adversarial
        X = np.array([r.features for r in rows], dtype=np.float64).reshape(-1, 2)
        y = np.array([0] * len(self.benign) + [1] * len(self.adversarial), dtype=np.int64)
        return X, y


def benign_rows(model, model_id, dataset, parallelism=1, limit=None):
    """(k, p) rows for correctly classified samples only."""
    idx = correct_indices(model, dataset)
    if limit is not None:
        idx = idx[:limit]
    points = kp_batch(model, dataset.images[idx], parallelism)
    for i, pt in zip(idx, points):
        if pt.dominant_class != dataset.labels[i]:
            raise DataError(f"benign sample {i} is misclassified")
    return [KpRow.from_point(pt, i, "benign", model_id) for i, pt in zip(idx, points)]


def adversarial_rows(model, model_id, attack, results, parallelism=1):
    for r in results:
        if not r.success:
            raise DataError(f"unsuccessful attack result for sample {r.source_index}")
    points = kp_batch(model, [r.adversarial for r in results], parallelism)
    return [KpRow.from_point(pt, r.source_index, attack, model_id) for r, pt in zip(results, points)]


def pair_runs_from_rows(rows, benign_count=128, seed=0):
    """Group kp rows into (attack, model) runs.

    Each run draws its own ``benign_count`` benign rows (without replacement)
    from the model's benign pool, seeded by ``seed`` and the run's position.
    """
    benign, adv = {}, {}
    for r in rows:
        if r.source == "benign":
            benign.setdefault(r.model_id, []).append(r)
        else:
            adv.setdefault((r.source, r.model_id), []).append(r)
    models = sorted({m for _, m in adv})
    runs = []
    for model_id in models:
        pool = benign.get(model_id, [])
        for attack in [a for a in SOURCES[1:] if (a, model_id) in adv]:
            rng = np.random.default_rng([seed, len(runs)])
            take = min(benign_count, len(pool))
            pick = sorted(rng.choice(len(pool), size=take, replace=False)) if take else []
            runs.append(PairRun(attack, model_id, adv[(attack, model_id)], [pool[i] for i in pick]))
    return runs


# --------------------------------------------------------------------------
# evaluation

@dataclass(frozen=True)
class IntraResult:
    pair: str
    accuracy: float
    tpr: float
    tnr: float
    n_train: int
    n_test: int


def _rates(y_true, y_pred):
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    acc = float(np.mean(y_true == y_pred))
    pos, neg = y_true == 1, y_true == 0
    tpr = float(np.mean(y_pred[pos] == 1)) if pos.any() else 0.0
    tnr = float(np.mean(y_pred[neg] == 0)) if neg.any() else 0.0
    return acc, tpr, tnr


def intra_model_eval(pair_run, benign_count=128, test_size=0.2, seed=0, n_estimators=200, max_depth=2):
    """Held-out accuracy of a detector trained and tested on one (attack, model) pair.

    Uses a stratified shuffle split; ``benign_count`` caps the benign rows used.
    """
    adv = pair_run.adversarial
    ben = pair_run.benign[:benign_count]
    if len(adv) < 2 or len(ben) < 2:
        raise InsufficientSamples(f"{pair_run.label}: {len(ben)} benign / {len(adv)} adversarial points")
    run = PairRun(pair_run.attack_id, pair_run.model_id, adv, ben)
    X, y = run.xy()
    X_tr, X_te, y_tr, y_te = train_test_split(X, y, test_size=test_size, stratify=y, random_state=seed)
    det = AdaBoostDetector(n_estimators=n_estimators, max_depth=max_depth).fit(X_tr, y_tr)
    acc, tpr, tnr = _rates(y_te, det.predict(X_te))
    return IntraResult(run.label, acc, tpr, tnr, len(y_tr), len(y_te))


@dataclass
class DetectionReport:
    pairs: list
    matrix: list  # matrix[i][j]: trained on pairs[i], evaluated on pairs[j]
    intra: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def averages(self):
        m = np.array(self.matrix, dtype=np.float64)
        out = {}
        if m.size:
            off = m[~np.eye(len(m), dtype=bool)]
            out["matrix_mean"] = float(m.mean())
            out["diagonal_mean"] = float(np.mean(np.diag(m)))
            out["off_diagonal_mean"] = float(off.mean()) if off.size else None
        if self.intra:
            out["intra_accuracy_mean"] = float(np.mean([r.accuracy for r in self.intra]))
        return out

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "pairs": [{"pair": p, **counts} for p, counts in self.pairs],
            "matrix": self.matrix,
            "intra": [asdict(r) for r in self.intra],
            "averages": self.averages,
            "config": self.config,
        }


def inter_model_matrix(pair_runs, n_estimators=200, max_depth=2, intra=None, config=None):
    """Train on every pair (all points) and evaluate on every pair (all points)."""
    pair_runs = list(pair_runs)
    if len(pair_runs) < 1:
        raise InsufficientPairs("no pair runs to evaluate")
    data = [run.xy() for run in pair_runs]
    matrix = []
    for X_tr, y_tr in data:
        det = AdaBoostDetector(n_estimators=n_estimators, max_depth=max_depth).fit(X_tr, y_tr)
        matrix.append([_rates(y_te, det.predict(X_te))[0] for X_te, y_te in data])
    return DetectionReport([(r.label, r.counts) for r in pair_runs], matrix, list(intra or []),
                           dict(config or {}))


# --------------------------------------------------------------------------
# export

def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def kp_csv_text(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(KP_COLUMNS)
    for r in rows:
        writer.writerow([_fmt(getattr(r, col)) for col in KP_COLUMNS])
    return buf.getvalue()


def write_text(path, text):
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoFailure(str(exc), path) from exc


def export_scatter(rows, path):
    write_text(path, kp_csv_text(rows))


def read_kp_csv(path):
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != KP_COLUMNS:
                raise DataError(f"unexpected kp CSV header {header}", path, 0)
            rows = []
            for line_no, rec in enumerate(reader, start=2):
                if len(rec) != len(KP_COLUMNS):
                    raise DataError(f"line {line_no}: expected {len(KP_COLUMNS)} fields", path)
                rows.append(KpRow(int(rec[0]), rec[1], rec[2], int(rec[3]), float(rec[4]), float(rec[5]),
                                  rec[6] == "1", int(rec[7])))
            return rows
    except OSError as exc:
        raise IoFailure(str(exc), path) from exc
    except ValueError as exc:
        raise DataError(f"malformed kp CSV: {exc}", path) from exc


def report_json_text(report):
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def export_report(report, path):
    write_text(path, report_json_text(report))


def export_gnuplot(rows, directory):
    """One whitespace-separated ``k p`` file per (source, model) group; returns the paths."""
    os.makedirs(directory, exist_ok=True)
    groups = {}
    for r in rows:
        groups.setdefault((r.source, r.model_id), []).append(r)
    paths = []
    for (source, model_id), grp in sorted(groups.items()):
        path = os.path.join(directory, f"{source}_{model_id}.dat")
        lines = [f"# source={source} model={model_id}", "# k p p_dominant_at_k never_flipped"]
        lines += [f"{r.k} {r.p!r} {r.p_dominant_at_k!r} {int(r.never_flipped)}" for r in grp]
        write_text(path, "\n".join(lines) + "\n")
        paths.append(path)
    return paths


# --------------------------------------------------------------------------
# full desk-scale experiment

DEFAULT_ATTACK_PARAMS = {
    "deepfool": {"max_iter": 50, "overshoot": 0.02},
    "jsma": {"theta": 1.0, "gamma": 0.1},
    "cw": {"steps": 500, "c_init": 1.0, "binary_search_steps": 6, "kappa": 0.0},
}


@dataclass
class ExperimentConfig:
    dims: tuple = (32, 32, 1)
    num_classes: int = 4
    train_per_class: int = 100
    test_per_class: int = 80
    data_seed: int = 1
    test_seed: int = 2
    model_seed: int = 3
    split_seed: int = 4
    archs: tuple = ("mlp", "smallconv")
    attacks: tuple = ("deepfool", "jsma", "cw")
    epochs: int = 20
    lr: float = 0.05
    batch: int = 32
    adversarial_count: int = 50
    benign_count: int = 64
    test_size: float = 0.2
    n_estimators: int = 200
    max_depth: int = 2
    attack_params: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_ATTACK_PARAMS.items()})
    parallelism: int = 1

    def to_dict(self):
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["archs"] = list(self.archs)
        d["attacks"] = list(self.attacks)
        return d


def run_experiment(config, out_dir):
    """Synthesise data, train models, attack, extract (k, p), evaluate and write everything.

    Output layout under ``out_dir``: ``models/*.kpm``, ``adversarial/*.kpt``,
    ``kp/*.csv``, ``plots/*.dat`` and ``report.json``.  Returns the report.
    """
    for sub in ("models", "adversarial", "kp"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    train = synth_dataset(config.data_seed, config.num_classes, config.train_per_class, config.dims, name="train")
    test = synth_dataset(config.test_seed, config.num_classes, config.test_per_class, config.dims, name="test")
    all_rows = []
    clean = {}
    for arch in config.archs:
        model = nnet.ARCHITECTURES[arch](config.dims, config.num_classes, seed=config.model_seed)
        model = nnet.train_sgd(model, train.images, train.labels, lr=config.lr, epochs=config.epochs,
                               batch=config.batch, seed=config.model_seed)
        clean[arch] = {"train_accuracy": nnet.accuracy(model, train.images, train.labels),
                       "test_accuracy": nnet.accuracy(model, test.images, test.labels)}
        nnet.save_model(model, os.path.join(out_dir, "models", f"{arch}.kpm"))
        rows = benign_rows(model, arch, test, config.parallelism)
        export_scatter(rows, os.path.join(out_dir, "kp", f"benign_{arch}.csv"))
        all_rows += rows
        for attack in config.attacks:
            results = make_adversarial_set(model, attack, test, config.adversarial_count,
                                           config.attack_params.get(attack), config.parallelism)
            if results:
                save_tensor(np.stack([r.adversarial for r in results]),
                            os.path.join(out_dir, "adversarial", f"{attack}_{arch}.kpt"))
            rows = adversarial_rows(model, arch, attack, results, config.parallelism)
            export_scatter(rows, os.path.join(out_dir, "kp", f"{attack}_{arch}.csv"))
            all_rows += rows
    runs = pair_runs_from_rows(all_rows, config.benign_count, config.split_seed)
    intra = [intra_model_eval(run, config.benign_count, config.test_size, config.split_seed + i,
                              config.n_estimators, config.max_depth) for i, run in enumerate(runs)]
    cfg = config.to_dict()
    cfg["clean_accuracy"] = clean
    report = inter_model_matrix(runs, config.n_estimators, config.max_depth, intra, cfg)
    export_report(report, os.path.join(out_dir, "report.json"))
    export_gnuplot(all_rows, os.path.join(out_dir, "plots"))
    return report
