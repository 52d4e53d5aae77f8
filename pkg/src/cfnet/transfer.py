"""Fused-feature extraction and evaluation: linear probe, KNN retrieval
(mean average precision and the groups-of-4 score), feature-map ranking,
and fusion-weight dumps.

Retrieval ranks the full database per query by ascending distance with ties
broken by lower database index (stable sort), so a row queried against its
own database always ranks itself first.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import BatchStream, Dataset, batches
from .engine import forward_features
from .layers import fc_fb, softmax_ce_fb

log = logging.getLogger(__name__)


@dataclass
class FeatureMatrix:
    """Row-per-image feature table with labels."""

    rows: np.ndarray
    labels: np.ndarray
    l2_normalized: bool = False

    def __post_init__(self):
        if self.rows.ndim != 2:
            raise ValueError(f"feature rows must be [N,K], got {self.rows.shape}")
        if self.labels.shape != (self.rows.shape[0],):
            raise ValueError("need one label per feature row")


def l2_normalize_rows(rows):
    norms = np.sqrt((rows.astype(np.float64) ** 2).sum(axis=1, keepdims=True))
    return (rows / np.maximum(norms, 1e-12)).astype(rows.dtype)


def extract_fused_features(graph, params, dataset, batch_size=64,
                           l2_normalize=False):
    """Collect the fusion-node output per image as a FeatureMatrix."""
    fuse = graph.fuse_node
    if fuse is None:
        raise ValueError("graph has no fusion node to extract features from")
    chunks = []
    n = len(dataset)
    for start in range(0, n, batch_size):
        images = dataset.images[start:start + batch_size]
        chunks.append(forward_features(graph, params, images, fuse.name))
    rows = np.concatenate(chunks, axis=0)
    if l2_normalize:
        rows = l2_normalize_rows(rows)
    return FeatureMatrix(rows, dataset.labels.copy(), l2_normalized=l2_normalize)


@dataclass(frozen=True)
class ProbeResult:
    accuracy: float
    missing_classes: tuple


def linear_probe(train_fm, test_fm, epochs=40, lr=0.1, seed=0, batch_size=64,
                 momentum=0.9):
    """Accuracy of one linear softmax layer trained on frozen features.

    Classes present in the test set but absent from training are reported in
    the result (and logged), not fatal.
    """
    if train_fm.rows.shape[1] != test_fm.rows.shape[1]:
        raise ValueError("train and test feature dimensions differ")
    num_classes = int(max(train_fm.labels.max(), test_fm.labels.max())) + 1
    missing = tuple(sorted(set(test_fm.labels.tolist())
                           - set(train_fm.labels.tolist())))
    if missing:
        log.warning("classes %s appear only in the test set", missing)

    k = train_fm.rows.shape[1]
    rng = np.random.Generator(np.random.PCG64(seed))
    bound = np.sqrt(6.0 / k)
    weight = rng.uniform(-bound, bound, size=(num_classes, k)).astype(train_fm.rows.dtype)
    bias = np.zeros(num_classes, dtype=train_fm.rows.dtype)
    vel_w = np.zeros_like(weight)
    vel_b = np.zeros_like(bias)

    train_ds = Dataset(train_fm.rows[:, :, None, None], train_fm.labels,
                       num_classes)
    stream = BatchStream(train_ds, min(batch_size, len(train_ds)), seed=seed)
    dt = weight.dtype.type
    for _ in range(epochs):
        for batch in batches(stream):
            x = batch.images[:, :, 0, 0]
            logits, fc_bwd = fc_fb(x, weight, bias)
            loss, loss_bwd = softmax_ce_fb(logits, batch.labels)
            _, dw, db = fc_bwd(loss_bwd())
            vel_w = dt(momentum) * vel_w - dt(lr) * dw
            vel_b = dt(momentum) * vel_b - dt(lr) * db
            weight = weight + vel_w
            bias = bias + vel_b

    logits = test_fm.rows @ weight.T + bias
    pred = np.argmax(logits, axis=1)
    accuracy = float((pred == test_fm.labels).sum() / len(test_fm.labels))
    return ProbeResult(accuracy, missing)


@dataclass
class RetrievalResult:
    """Per-query full rankings of database indices, best first."""

    rankings: np.ndarray


def knn_retrieve(db, queries, distance="cosine"):
    """Rank every database row per query by ascending distance.

    Distances are accumulated in float64; ties resolve to the lower database
    index via a stable sort.
    """
    if db.rows.shape[0] < 1:
        raise ValueError("empty database")
    if db.rows.shape[1] != queries.rows.shape[1]:
        raise ValueError("database and query dimensions differ")
    db_rows = db.rows.astype(np.float64)
    q_rows = queries.rows.astype(np.float64)
    if distance == "cosine":
        db_rows = l2_normalize_rows(db_rows)
        q_rows = l2_normalize_rows(q_rows)
    elif distance != "euclidean":
        raise ValueError(f"unknown distance {distance!r}")

    rankings = np.empty((q_rows.shape[0], db_rows.shape[0]), dtype=np.int64)
    chunk = 128
    for start in range(0, q_rows.shape[0], chunk):
        q = q_rows[start:start + chunk]
        if distance == "cosine":
            dist = 1.0 - q @ db_rows.T
        else:
            diff = q[:, None, :] - db_rows[None, :, :]
            dist = np.sqrt((diff ** 2).sum(axis=2))
        rankings[start:start + chunk] = np.argsort(dist, axis=1, kind="stable")
    return RetrievalResult(rankings)


def ns_score(result, db_groups, query_groups=None):
    """Mean count of same-group items in the top 4, for groups of exactly 4.

    ``db_groups`` labels every database row with its group; queries default
    to the database rows in order.
    """
    db_groups = np.asarray(db_groups)
    ids, counts = np.unique(db_groups, return_counts=True)
    if not np.all(counts == 4):
        bad = ids[counts != 4]
        raise ValueError(f"malformed groups: {bad.tolist()} do not have exactly 4 items")
    if query_groups is None:
        if result.rankings.shape[0] != db_groups.shape[0]:
            raise ValueError("query count differs from database; pass query_groups")
        query_groups = db_groups
    query_groups = np.asarray(query_groups)
    top4 = result.rankings[:, :4]
    hits = (db_groups[top4] == query_groups[:, None]).sum(axis=1)
    return float(hits.mean())


def average_precision(ranking, relevant):
    """Average of precision-at-rank over the ranks of the relevant items."""
    relevant = set(int(r) for r in relevant)
    if not relevant:
        raise ValueError("empty relevance set")
    positions = np.flatnonzero(np.isin(ranking, list(relevant)))
    precisions = (np.arange(len(positions)) + 1.0) / (positions + 1.0)
    return float(precisions.mean())


def mean_ap(result, relevance):
    """Mean average precision with precision taken at each relevant rank."""
    if len(relevance) != result.rankings.shape[0]:
        raise ValueError("need one relevance set per query")
    aps = []
    for q, relevant in enumerate(relevance):
        if not relevant:
            raise ValueError(f"query {q} has an empty relevance set")
        aps.append(average_precision(result.rankings[q], relevant))
    return float(np.mean(aps))


@dataclass
class RankedMaps:
    order: np.ndarray          # channel indices, best first
    means: np.ndarray          # spatial mean per channel, original order
    images: list               # uint8 grayscale maps for the top channels


def rank_feature_maps(activations, top_m=4):
    """Order channels of a [K,H,W] activation block by mean activation.

    Ties keep ascending channel index.  The top ``top_m`` maps are rendered
    as uint8 grayscale, min-max scaled per map; a constant map renders as
    mid-gray 128.
    """
    if activations.ndim != 3:
        raise ValueError(f"activations must be [K,H,W], got {activations.shape}")
    k = activations.shape[0]
    if not 1 <= top_m <= k:
        raise ValueError(f"top_m {top_m} out of range 1..{k}")
    means = activations.mean(axis=(1, 2))
    order = np.argsort(-means, kind="stable")
    images = []
    for channel in order[:top_m]:
        fmap = activations[channel]
        lo, hi = float(fmap.min()), float(fmap.max())
        if hi == lo:
            img = np.full(fmap.shape, 128, dtype=np.uint8)
        else:
            img = np.rint((fmap - lo) / (hi - lo) * 255.0).astype(np.uint8)
        images.append(img)
    return RankedMaps(order, means, images)


def write_pgm(path, image):
    """Write a uint8 grayscale image as binary PGM (P5)."""
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("PGM writer expects a 2-D uint8 image")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def write_ranked_maps(ranked, out_dir):
    """Emit ``map_<rank>_<channel>.pgm`` files, rank 0 = strongest."""
    paths = []
    for rank, image in enumerate(ranked.images):
        channel = int(ranked.order[rank])
        path = f"{out_dir}/map_{rank}_{channel}.pgm"
        write_pgm(path, image)
        paths.append(path)
    return paths


def dump_lc_weights(params, node="fuse"):
    """Per-branch mean of the locally-connected fusion weights.

    ``params`` is the model parameter mapping; requires an ``<node>.weight``
    matrix of shape [K,S].
    """
    weight = params.get(f"{node}.weight")
    if weight is None or weight.ndim != 2:
        raise ValueError("locally-connected fusion weights not found in params")
    return weight.mean(axis=0)


def write_lc_weight_csv(weight, means_path, matrix_path):
    means = weight.mean(axis=0)
    with open(means_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["branch", "mean_weight"])
        for s, m in enumerate(means, start=1):
            writer.writerow([s, float(m)])
    with open(matrix_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"branch{s + 1}" for s in range(weight.shape[1])])
        for row in weight:
            writer.writerow([float(v) for v in row])


def write_features_csv(fm, path):
    k = fm.rows.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i}" for i in range(k)])
        for label, row in zip(fm.labels, fm.rows):
            writer.writerow([int(label)] + [float(v) for v in row])


def read_features_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "label":
            raise ValueError(f"not a feature CSV: {path}")
        labels = []
        rows = []
        for line in reader:
            labels.append(int(line[0]))
            rows.append([float(v) for v in line[1:]])
    return FeatureMatrix(np.asarray(rows, dtype=np.float32),
                         np.asarray(labels, dtype=np.int64))


def save_features(path, fm):
    save_checkpoint(path, [
        ("rows", fm.rows),
        ("labels", fm.labels.astype(np.float64)),
        ("meta", np.array([1.0 if fm.l2_normalized else 0.0], dtype=np.float64)),
    ])


def load_features(path):
    entries = dict(load_checkpoint(path))
    return FeatureMatrix(entries["rows"], entries["labels"].astype(np.int64),
                         l2_normalized=bool(entries["meta"][0]))
