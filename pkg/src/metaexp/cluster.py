"""Recursive bisection of embedding space and demand-capture diagnostics."""

from __future__ import annotations

import csv
import enum
import math
from collections.abc import Iterator, Mapping, Sequence
from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

from metaexp.datamodel import SearchSession
from metaexp.embed import EmbeddingMatrix
from metaexp.errors import DomainError, EmptyPopulation, SchemaError, UnknownListing
from metaexp.seeding import make_rng

LLOYD_ITERATIONS = 25
CAPTURE_THRESHOLDS = (0.67, 0.75, 0.90)


@dataclass
class PartitionNode:
    path: str
    depth: int
    members: np.ndarray  # row indices into the tree's id table
    centroids: np.ndarray | None = None
    children: tuple[PartitionNode, ...] = ()

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass
class PartitionTree:
    ids: tuple[str, ...]
    root: PartitionNode
    max_depth: int
    min_leaf: int

    def nodes(self) -> Iterator[PartitionNode]:
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def leaves(self) -> list[PartitionNode]:
        return [n for n in self.nodes() if n.is_leaf]

    @property
    def depth(self) -> int:
        return max(n.depth for n in self.nodes())


def two_means(points: np.ndarray, rng: np.random.Generator,
              iterations: int = LLOYD_ITERATIONS) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k=2 and farthest-point seeding.

    Returns a boolean mask (True = second group) and the 2 x dim centroids.
    """
    first = points[rng.integers(len(points))]
    second = points[np.argmax(((points - first) ** 2).sum(axis=1))]
    centroids = np.stack([first, second]).astype(float)
    labels = None
    for _ in range(iterations):
        d0 = ((points - centroids[0]) ** 2).sum(axis=1)
        d1 = ((points - centroids[1]) ** 2).sum(axis=1)
        new = d1 < d0
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        if labels.all() or not labels.any():
            break
        centroids = np.stack([points[~labels].mean(axis=0), points[labels].mean(axis=0)])
    return labels, centroids


def build_partition_tree(embeddings: EmbeddingMatrix, max_depth: int = 20,
                         min_leaf: int = 20, seed: int = 0) -> PartitionTree:
    """Bisect recursively with 2-means until depth or leaf-size limits bind.

    A split is rejected, and the node kept as a leaf, when either child would
    hold fewer than ``min_leaf`` members or the children would lie deeper than
    ``max_depth``. Node ids are root paths such as ``"0.1.0"``.
    """
    vectors = np.asarray(embeddings.vectors, dtype=float)
    if len(vectors) == 0:
        raise ValueError("cannot partition an empty embedding set")
    root = PartitionNode("0", 0, np.arange(len(vectors)))
    stack = [root]
    while stack:
        node = stack.pop()
        if node.depth + 1 > max_depth or node.size < 2 * min_leaf:
            continue
        mask, centroids = two_means(vectors[node.members], make_rng(seed, "bisect", node.path))
        left, right = node.members[~mask], node.members[mask]
        if len(left) < min_leaf or len(right) < min_leaf:
            continue
        node.centroids = centroids
        node.children = (
            PartitionNode(node.path + ".0", node.depth + 1, left),
            PartitionNode(node.path + ".1", node.depth + 1, right),
        )
        stack.extend(node.children)
    return PartitionTree(tuple(embeddings.vocab), root, max_depth, min_leaf)


@dataclass(frozen=True)
class ClusterAssignment:
    labels: Mapping[str, str]
    threshold: int

    def __post_init__(self):
        object.__setattr__(self, "labels", MappingProxyType(dict(self.labels)))

    @property
    def sizes(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for c in self.labels.values():
            out[c] = out.get(c, 0) + 1
        return dict(sorted(out.items()))

    def members(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for lid in sorted(self.labels):
            out.setdefault(self.labels[lid], []).append(lid)
        return dict(sorted(out.items()))


def assign_clusters(tree: PartitionTree, threshold: int) -> ClusterAssignment:
    """Cut the tree into clusters of at least ``threshold`` listings.

    Walking down from the root, a node is split into its children only when
    both children hold at least ``threshold`` members (ties qualify); otherwise
    the node is a cluster. If the root itself is smaller than ``threshold`` it
    becomes the only cluster.
    """
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    labels: dict[str, str] = {}
    stack = [tree.root]
    while stack:
        node = stack.pop()
        if node.children and all(c.size >= threshold for c in node.children):
            stack.extend(node.children)
            continue
        for i in node.members:
            labels[tree.ids[i]] = node.path
    return ClusterAssignment(labels, threshold)


def save_clusters(clusters: ClusterAssignment, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["listing_id", "cluster_id"])
        for lid in sorted(clusters.labels):
            writer.writerow([lid, clusters.labels[lid]])


def load_clusters(path, threshold: int = 0) -> ClusterAssignment:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"listing_id", "cluster_id"} <= set(reader.fieldnames):
            raise SchemaError("cluster file needs listing_id and cluster_id columns")
        labels = {}
        for row, raw in enumerate(reader, start=1):
            lid, cid = raw["listing_id"].strip(), (raw["cluster_id"] or "").strip()
            if not lid or not cid:
                raise SchemaError("empty listing_id or cluster_id", row)
            if lid in labels:
                raise SchemaError(f"duplicate listing_id {lid!r}", row)
            labels[lid] = cid
    return ClusterAssignment(labels, threshold)


# ---------------------------------------------------------------- demand capture

@dataclass(frozen=True)
class DemandCaptureReport:
    n_users: int
    pct_single_cluster: float
    demand_capture: float
    avg_cluster_share: float
    avg_hhi: float
    pct_over: Mapping[float, float]
    include_single_view: bool = True
    bookers_only: bool = False

    def to_dict(self) -> dict:
        return {
            "n_users": self.n_users,
            "pct_single_cluster": self.pct_single_cluster,
            "demand_capture": self.demand_capture,
            "avg_cluster_share": self.avg_cluster_share,
            "avg_hhi": self.avg_hhi,
            "pct_over": {f"{k:.2f}": v for k, v in self.pct_over.items()},
            "include_single_view": self.include_single_view,
            "bookers_only": self.bookers_only,
        }


def _users_views(sessions: Sequence[SearchSession]) -> dict[str, tuple[list[str], bool]]:
    users: dict[str, tuple[list[str], bool]] = {}
    for s in sessions:
        views, booked = users.get(s.user_id, ([], False))
        views.extend(s.listings_viewed)
        users[s.user_id] = (views, booked or s.booked)
    return users


def demand_capture_report(sessions: Sequence[SearchSession], clusters: ClusterAssignment,
                          include_single_view: bool = True,
                          bookers_only: bool = False) -> DemandCaptureReport:
    """Per-user cluster-coverage metrics, averaged over the filtered users.

    ``n_listings`` counts distinct listings a user viewed; cluster shares use
    raw view counts. Single-view users are those with one distinct listing.
    """
    labels = clusters.labels
    single, capture, top_share, hhi = [], [], [], []
    over = {x: [] for x in CAPTURE_THRESHOLDS}
    for user, (views, booked) in _users_views(sessions).items():
        distinct = set(views)
        if bookers_only and not booked:
            continue
        if not include_single_view and len(distinct) == 1:
            continue
        counts: dict[str, int] = {}
        for lid in views:
            try:
                c = labels[lid]
            except KeyError:
                raise UnknownListing(f"listing {lid!r} viewed by {user!r} is not clustered") from None
            counts[c] = counts.get(c, 0) + 1
        n_clusters = len(counts)
        shares = [v / len(views) for v in counts.values()]
        top = max(shares)
        single.append(1.0 if n_clusters == 1 else 0.0)
        capture.append(1.0 - n_clusters / len(distinct))
        top_share.append(top)
        hhi.append(math.fsum(s * s for s in shares))
        for x in CAPTURE_THRESHOLDS:
            over[x].append(1.0 if top >= x else 0.0)
    n = len(single)
    if n == 0:
        raise EmptyPopulation("no users left after applying the population filters")

    def mean(values):
        return math.fsum(values) / n

    return DemandCaptureReport(
        n_users=n,
        pct_single_cluster=mean(single),
        demand_capture=mean(capture),
        avg_cluster_share=mean(top_share),
        avg_hhi=mean(hhi),
        pct_over={x: mean(v) for x, v in over.items()},
        include_single_view=include_single_view,
        bookers_only=bookers_only,
    )


RATIO_METRICS = ("avg_cluster_share", "avg_hhi", "pct_over_67", "pct_over_75", "pct_over_90")
POPULATION_FILTERS = (
    # (include single-view users, bookers only)
    (False, False),
    (False, True),
    (True, False),
    (True, True),
)


def _ratio_metrics(report: DemandCaptureReport) -> list[float]:
    return [report.avg_cluster_share, report.avg_hhi,
            *(report.pct_over[x] for x in CAPTURE_THRESHOLDS)]


def capture_ratio_table(sessions: Sequence[SearchSession], small: ClusterAssignment,
                        large: ClusterAssignment) -> list[dict]:
    """Large-over-small ratios of five capture metrics for four populations."""
    rows = []
    for single_views, bookers in POPULATION_FILTERS:
        rs = demand_capture_report(sessions, small, single_views, bookers)
        rl = demand_capture_report(sessions, large, single_views, bookers)
        ratios = {}
        for name, a, b in zip(RATIO_METRICS, _ratio_metrics(rs), _ratio_metrics(rl)):
            ratios[name] = b / a if a > 0 else math.inf
        rows.append({
            "single_views": single_views,
            "viewers": "bookers" if bookers else "all",
            "ratios": ratios,
        })
    return rows


def mde_adjusted(mde_ideal: float, demand_capture: float) -> float:
    """Ideal MDE inflated by imperfect demand capture."""
    if not demand_capture > 0:
        raise DomainError("demand capture must be positive")
    if demand_capture > 1:
        raise DomainError("demand capture cannot exceed 1")
    return mde_ideal / demand_capture


class SizePreference(str, enum.Enum):
    PREFER_LARGE = "prefer_large"
    PREFER_SMALL = "prefer_small"


@dataclass(frozen=True)
class SizeDecision:
    preference: SizePreference
    capture_ratio: float
    mde_ratio: float


def compare_cluster_sizes(capture_small: float, capture_large: float,
                          mde_ideal_small: float, mde_ideal_large: float) -> SizeDecision:
    """Prefer the larger clusters iff their capture gain beats their MDE cost.

    The comparison is strict: equal ratios keep the smaller clusters.
    """
    values = (capture_small, capture_large, mde_ideal_small, mde_ideal_large)
    if not all(v > 0 for v in values):
        raise DomainError("capture and MDE inputs must all be positive")
    capture_ratio = capture_large / capture_small
    mde_ratio = mde_ideal_large / mde_ideal_small
    pref = SizePreference.PREFER_LARGE if capture_ratio > mde_ratio else SizePreference.PREFER_SMALL
    return SizeDecision(pref, capture_ratio, mde_ratio)
