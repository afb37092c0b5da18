"""Retrieval protocol: L2 normalization, distance matrix, CMC, and mAP.

Per query, the gallery is ranked by ascending Euclidean distance (ties
broken by gallery index).  With cross-camera filtering on, gallery entries
sharing the query's identity AND camera are dropped from that query's
ranking; queries left with zero relevant entries are excluded from the
averages but counted.  CMC@k is the fraction of valid queries whose first
relevant entry ranks within the top k; AP is non-interpolated precision at
the relevant positions.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .rten import load_tensor, save_tensor

DEFAULT_RANKS = (1, 5, 10, 20)


@dataclass
class EmbeddingSet:
    features: np.ndarray
    identities: np.ndarray
    cameras: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.identities = np.asarray(self.identities, dtype=np.int64)
        self.cameras = np.asarray(self.cameras, dtype=np.int64)
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise ValueError(f"features must be [N, F], got shape {self.features.shape}")
        if self.identities.shape != (n,) or self.cameras.shape != (n,):
            raise ValueError("features, identities, and cameras lengths disagree")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")

    def __len__(self):
        return self.features.shape[0]


@dataclass
class EvalReport:
    cmc: dict
    map_score: float
    num_valid_queries: int
    num_excluded_queries: int
    cross_camera_filtering: bool
    flip_fusion: bool = False
    ranks: tuple = field(default_factory=lambda: DEFAULT_RANKS)

    def to_text(self):
        lines = [f"map={self.map_score!r}"]
        for k in self.ranks:
            lines.append(f"cmc{k}={self.cmc[k]!r}")
        lines.append(f"num_valid_queries={self.num_valid_queries}")
        lines.append(f"num_excluded_queries={self.num_excluded_queries}")
        lines.append(f"cross_camera_filtering={self.cross_camera_filtering}")
        lines.append(f"flip_fusion={self.flip_fusion}")
        return "\n".join(lines) + "\n"

    def summary_line(self):
        parts = [f"map={self.map_score:.6f}"]
        parts += [f"cmc{k}={self.cmc[k]:.6f}" for k in self.ranks]
        parts.append(f"valid={self.num_valid_queries}")
        parts.append(f"excluded={self.num_excluded_queries}")
        return "EVAL " + " ".join(parts)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())


def l2_normalize(features):
    """Scale each row to unit Euclidean norm; zero rows are an error."""
    features = np.asarray(features, dtype=np.float64)
    norms = np.sqrt((features * features).sum(axis=1, keepdims=True))
    if np.any(norms == 0.0):
        bad = np.nonzero(norms[:, 0] == 0.0)[0]
        raise ValueError(f"cannot normalize zero-norm rows at indices {bad.tolist()}")
    return features / norms


def pairwise_euclidean(q, g):
    """Distance matrix d[i, j] = ||q_i - g_j||, via the inner-product expansion."""
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"feature dimensions disagree: {q.shape} vs {g.shape}")
    sq = (q * q).sum(axis=1)[:, None] + (g * g).sum(axis=1)[None, :] - 2.0 * (q @ g.T)
    return np.sqrt(np.maximum(sq, 0.0))


def evaluate(query, gallery, ranks=DEFAULT_RANKS, cross_camera_filtering=True,
             flip_fusion=False):
    """Full protocol over two embedding sets; returns an EvalReport."""
    if len(query) == 0 or len(gallery) == 0:
        raise ValueError("query and gallery must be nonempty")
    ranks = tuple(int(k) for k in ranks)
    if any(k < 1 for k in ranks):
        raise ValueError("ranks must be >= 1")
    qf = l2_normalize(query.features)
    gf = l2_normalize(gallery.features)
    dist = pairwise_euclidean(qf, gf)

    cmc_hits = {k: 0 for k in ranks}
    aps = []
    excluded = 0
    for i in range(len(query)):
        order = np.argsort(dist[i], kind="stable")
        if cross_camera_filtering:
            junk = ((gallery.identities == query.identities[i])
                    & (gallery.cameras == query.cameras[i]))
            order = order[~junk[order]]
        relevant = gallery.identities[order] == query.identities[i]
        num_rel = int(relevant.sum())
        if num_rel == 0:
            excluded += 1
            continue
        positions = np.nonzero(relevant)[0] + 1
        ap = float((np.arange(1, num_rel + 1) / positions).sum() / num_rel)
        aps.append(ap)
        for k in ranks:
            if positions[0] <= k:
                cmc_hits[k] += 1
    valid = len(aps)
    if valid == 0:
        raise ValueError("no query has any relevant gallery entry after filtering")
    return EvalReport(
        cmc={k: cmc_hits[k] / valid for k in ranks},
        map_score=float(np.mean(aps)),
        num_valid_queries=valid,
        num_excluded_queries=excluded,
        cross_camera_filtering=cross_camera_filtering,
        flip_fusion=flip_fusion,
        ranks=ranks,
    )


def ranked_gallery(query, gallery, query_index, cross_camera_filtering=True):
    """One query's filtered gallery order plus distances and match flags."""
    qf = l2_normalize(query.features)
    gf = l2_normalize(gallery.features)
    dist = pairwise_euclidean(qf[query_index:query_index + 1], gf)[0]
    order = np.argsort(dist, kind="stable")
    if cross_camera_filtering:
        junk = ((gallery.identities == query.identities[query_index])
                & (gallery.cameras == query.cameras[query_index]))
        order = order[~junk[order]]
    matches = gallery.identities[order] == query.identities[query_index]
    return order, dist[order], matches


def save_embeddings(path_prefix, embset):
    """Write features as an RTEN file plus a (identity, camera) sidecar CSV."""
    save_tensor(f"{path_prefix}.rten", embset.features)
    with open(f"{path_prefix}.labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["identity", "camera"])
        for ident, cam in zip(embset.identities, embset.cameras):
            writer.writerow([int(ident), int(cam)])


def load_embeddings(path_prefix):
    features = load_tensor(f"{path_prefix}.rten")
    identities, cameras = [], []
    with open(f"{path_prefix}.labels.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["identity", "camera"]:
            raise ValueError(f"bad sidecar header: {header}")
        for row in reader:
            identities.append(int(row[0]))
            cameras.append(int(row[1]))
    return EmbeddingSet(features, np.array(identities), np.array(cameras))
