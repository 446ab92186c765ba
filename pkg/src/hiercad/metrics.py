"""Point-cloud and token-sequence metrics: COV, MMD, JSD, Novel, Unique.

Chamfer distance uses squared nearest-neighbor distances in both
directions. EMD is the exact assignment optimum (mean matched Euclidean
distance) and is limited to clouds of <= 512 points; larger clouds are
subsampled by the caller. JSD pools each set into an R^3 occupancy
histogram and is reported base-2 in [0, 1].
"""

from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .errors import ValidationError

EMD_MAX_POINTS = 512


@dataclass
class MetricReport:
    cov_cd: float
    cov_emd: float
    mmd_cd: float
    mmd_emd: float
    jsd: float
    novel: float
    unique: float
    config: dict

    def __post_init__(self):
        for name in ("cov_cd", "cov_emd", "novel", "unique"):
            v = getattr(self, name)
            assert 0.0 <= v <= 100.0, f"{name} out of range: {v}"
        assert 0.0 <= self.jsd <= 1.0 + 1e-12

    def to_json(self):
        return asdict(self)


def chamfer_distance(a, b):
    """Symmetric mean squared nearest-neighbor distance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValidationError("chamfer distance of an empty cloud", code="empty_cloud")
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float((da**2).mean() + (db**2).mean())


def emd_distance(a, b):
    """Exact EMD: minimum mean Euclidean distance over perfect matchings."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) != len(b):
        raise ValidationError(
            f"EMD requires equal sizes, got {len(a)} vs {len(b)}", code="size_mismatch"
        )
    if len(a) == 0:
        raise ValidationError("EMD of an empty cloud", code="empty_cloud")
    if len(a) > EMD_MAX_POINTS:
        raise ValidationError(
            f"exact EMD limited to {EMD_MAX_POINTS} points, got {len(a)}",
            code="emd_too_large",
        )
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].mean())


def coverage(gen, gt, dist):
    """Percent of ground-truth clouds matched by at least one generated cloud."""
    covered = set()
    for cloud in gen:
        j = min(range(len(gt)), key=lambda k: dist(cloud, gt[k]))
        covered.add(j)
    return 100.0 * len(covered) / len(gt)


def mmd(gen, gt, dist):
    """Mean over ground truth of the minimum distance to any generated cloud."""
    return float(np.mean([min(dist(g, cloud) for cloud in gen) for g in gt]))


def _histogram(clouds, resolution):
    hist = np.zeros((resolution,) * 3, dtype=np.float64)
    for cloud in clouds:
        pts = np.asarray(cloud, dtype=np.float64)
        idx = np.clip(np.floor(pts * resolution).astype(int), 0, resolution - 1)
        np.add.at(hist, (idx[:, 0], idx[:, 1], idx[:, 2]), 1.0)
    total = hist.sum()
    return hist / total if total > 0 else hist


def jsd(gen, gt, resolution=32):
    """Base-2 Jensen-Shannon divergence of pooled occupancy histograms."""
    p = _histogram(gen, resolution).ravel()
    q = _histogram(gt, resolution).ravel()
    m = 0.5 * (p + q)

    def kl(x, y):
        mask = x > 0
        return float(np.sum(x[mask] * np.log2(x[mask] / y[mask])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def novel_unique(gen_hashes, train_hashes):
    """(Novel %, Unique %) of generated token-sequence hashes."""
    gen_hashes = list(gen_hashes)
    if not gen_hashes:
        return 0.0, 0.0
    train = set(train_hashes)
    novel = sum(h not in train for h in gen_hashes)
    counts = {}
    for h in gen_hashes:
        counts[h] = counts.get(h, 0) + 1
    unique = sum(counts[h] == 1 for h in gen_hashes)
    n = len(gen_hashes)
    return 100.0 * novel / n, 100.0 * unique / n


def evaluate_sets(
    gen_clouds,
    gt_clouds,
    gen_hashes=(),
    train_hashes=(),
    jsd_resolution=32,
    n_points=None,
    seed=None,
):
    """Full metric report over two cloud sets plus optional hash lists."""
    novel, unique = novel_unique(gen_hashes, train_hashes)
    return MetricReport(
        cov_cd=coverage(gen_clouds, gt_clouds, chamfer_distance),
        cov_emd=coverage(gen_clouds, gt_clouds, emd_distance),
        mmd_cd=mmd(gen_clouds, gt_clouds, chamfer_distance),
        mmd_emd=mmd(gen_clouds, gt_clouds, emd_distance),
        jsd=jsd(gen_clouds, gt_clouds, jsd_resolution),
        novel=novel,
        unique=unique,
        config={
            "n_points": n_points or (len(gen_clouds[0]) if len(gen_clouds) else 0),
            "jsd_resolution": jsd_resolution,
            "seed": seed,
            "emd_max_points": EMD_MAX_POINTS,
        },
    )
