"""View network: construction, docking, geodesic alignment and compression.

Nodes are numbered instance-major: node ``offsets[i] + m`` is grid point ``m``
of instance ``i``, so ordering nodes by global index is the lexicographic
(instance, point) order used for every tie-break.

Edge weights are rounded to multiples of ``QUANTUM`` (2^-20). Sums of such
values are exact in float64 far beyond any realistic path length, which makes
path lengths independent of summation order. That is what lets the compressed
lookup reproduce the Dijkstra distances bit for bit.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
from scipy.spatial.distance import cdist

from . import _graph
from .core import Camera, Collection, ObjectInstance, ValidationError, collection_to_json
from .geometry import pairwise_rotation_distance
from .warp import fit_affine_box, fit_keypoint_warp

log = logging.getLogger(__name__)

QUANTUM = 2.0 ** -20
DEFAULT_K = 30
DEFAULT_N_DOCK = 10
CALIBRATION_SAMPLES = 10_000


def quantize(w):
    return np.round(np.asarray(w, float) / QUANTUM) * QUANTUM


class NodeId(NamedTuple):
    instance_index: int
    point_index: int


@dataclass(eq=False)
class VVNetwork:
    """Directed network with exactly one outgoing edge per pose neighbour per node."""

    offsets: np.ndarray  # (n_instances + 1,)
    targets: np.ndarray  # (n_nodes, k) global node ids
    weights: np.ndarray  # (n_nodes, k) quantized, >= 0
    pose_neighbors: np.ndarray  # (n_instances, k)
    alpha: float
    instance_ids: tuple = ()
    collection: Optional[Collection] = field(default=None, repr=False)
    collection_hash: str = ""

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, np.int64)
        self.targets = np.asarray(self.targets, np.int64)
        self.weights = np.asarray(self.weights, float)
        self.pose_neighbors = np.asarray(self.pose_neighbors, np.int64)
        n = self.n_nodes
        if self.targets.shape != self.weights.shape or self.targets.shape[0] != n:
            raise ValidationError("network: targets/weights must be (n_nodes, k)")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ValidationError("network: edge weights must be finite and non-negative")
        if n and (self.targets.min() < 0 or self.targets.max() >= n):
            raise ValidationError("network: edge target out of range")
        if np.any(self.node_instance()[self.targets] == self.node_instance()[:, None]):
            raise ValidationError("network: edge inside one instance")
        self._rev = None

    @property
    def n_nodes(self) -> int:
        return int(self.offsets[-1])

    @property
    def n_instances(self) -> int:
        return len(self.offsets) - 1

    @property
    def k(self) -> int:
        return self.targets.shape[1]

    def node_instance(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_instances), np.diff(self.offsets))

    def node(self, g: int) -> NodeId:
        i = int(np.searchsorted(self.offsets, g, side="right") - 1)
        return NodeId(i, int(g - self.offsets[i]))

    def global_index(self, instance_index: int, point_index: int) -> int:
        return int(self.offsets[instance_index] + point_index)

    def csr(self):
        n, k = self.targets.shape
        indptr = np.arange(0, n * k + 1, k, dtype=np.int64) if k else np.zeros(n + 1, np.int64)
        return indptr, self.targets.ravel(), self.weights.ravel()

    def reverse_csr(self):
        if self._rev is None:
            n, k = self.targets.shape
            src = np.repeat(np.arange(n, dtype=np.int64), k)
            dst = self.targets.ravel()
            order = np.argsort(dst, kind="stable")
            counts = np.bincount(dst, minlength=n)
            indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
            self._rev = (indptr, src[order], self.weights.ravel()[order])
        return self._rev


@dataclass(eq=False)
class CompressedNetwork:
    """Point-to-point form: for every node and instance, the geodesically nearest node.

    Column ``j`` of ``match_node`` for a node of instance ``j`` itself is kept
    too (normally the node itself at distance 0).
    """

    offsets: np.ndarray
    match_node: np.ndarray  # (n_nodes, n_instances) int32, -1 if unreachable
    match_dist: np.ndarray  # (n_nodes, n_instances), inf if unreachable

    @property
    def n_instances(self) -> int:
        return len(self.offsets) - 1

    def match(self, node: int, instance: int):
        m = int(self.match_node[node, instance])
        if m < 0:
            return None
        return m, float(self.match_dist[node, instance])


@dataclass(eq=False)
class DockingSet:
    """Edges from test points into docking instances, at most one per (test point, node)."""

    test_point: np.ndarray
    node: np.ndarray
    weight: np.ndarray
    docking_instances: np.ndarray
    n_test_points: int

    def __post_init__(self):
        self.test_point = np.asarray(self.test_point, np.int64)
        self.node = np.asarray(self.node, np.int64)
        self.weight = np.asarray(self.weight, float)
        self.docking_instances = np.asarray(self.docking_instances, np.int64)
        if np.any(self.weight < 0) or not np.all(np.isfinite(self.weight)):
            raise ValidationError("docking: weights must be finite and non-negative")
        key = self.test_point * (int(self.node.max(initial=0)) + 1) + self.node
        if len(np.unique(key)) != len(key):
            raise ValidationError("docking: more than one edge from a test point to one node")

    def __len__(self):
        return len(self.node)

    def grouped(self):
        """Edges sorted by test point, with CSR pointers."""
        order = np.lexsort((self.node, self.test_point))
        counts = np.bincount(self.test_point, minlength=self.n_test_points)
        ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return ptr, self.node[order], self.weight[order]


@dataclass(eq=False)
class AlignmentResult:
    """Per test point and training instance: matched global node (-1 absent) and distance."""

    match_node: np.ndarray
    match_dist: np.ndarray
    offsets: np.ndarray
    method: str = "vvn"

    @property
    def n_test_points(self) -> int:
        return self.match_node.shape[0]

    def matched_points(self, instance: int) -> np.ndarray:
        """Point indices inside ``instance`` (-1 where absent)."""
        g = self.match_node[:, instance]
        return np.where(g >= 0, g - self.offsets[instance], -1)

    def same_as(self, other: "AlignmentResult") -> bool:
        return (np.array_equal(self.match_node, other.match_node)
                and np.array_equal(self.match_dist, other.match_dist))


# ---------------------------------------------------------------------------
# construction


def pose_knn(cameras, k: int) -> np.ndarray:
    """Indices of the k pose-nearest instances per instance, self excluded, ties to lower index."""
    if any(c is None for c in cameras):
        raise ValidationError("pose_knn: every instance needs a camera")
    n = len(cameras)
    if not 1 <= k < n:
        raise ValidationError(f"pose_knn: need 1 <= k < {n}, got {k}")
    R = np.stack([c.rotation for c in cameras])
    D = pairwise_rotation_distance(R)
    np.fill_diagonal(D, np.inf)
    return np.argsort(D, axis=1, kind="stable")[:, :k]


def matching_cost(d_u, d_v, x_u, x_v, g_ij, g_ji, alpha: float):
    """``|d_u - d_v| + alpha * (|x_v - g_ij(x_u)| + |x_u - g_ji(x_v)|)``."""
    d_u, d_v = np.asarray(d_u, float), np.asarray(d_v, float)
    if d_u.shape[-1] != d_v.shape[-1]:
        raise ValidationError("matching_cost: descriptor dimension mismatch")
    x_u = np.asarray(x_u, float).reshape(-1, 2)
    x_v = np.asarray(x_v, float).reshape(-1, 2)
    desc = np.linalg.norm(d_u - d_v, axis=-1)
    spatial = np.linalg.norm(x_v - g_ij(x_u), axis=-1) + np.linalg.norm(x_u - g_ji(x_v), axis=-1)
    out = desc + alpha * spatial
    return float(out[0]) if np.size(out) == 1 else out


def pair_interpolants(a: ObjectInstance, b: ObjectInstance):
    """Keypoint warps a->b and b->a fitted on keypoints visible in both."""
    shared = a.keypoints.visible & b.keypoints.visible
    pa, pb = a.keypoints.positions[shared], b.keypoints.positions[shared]
    return fit_keypoint_warp(pa, pb), fit_keypoint_warp(pb, pa)


def _pair_terms(a: ObjectInstance, b: ObjectInstance):
    g_ab, g_ba = pair_interpolants(a, b)
    xa, xb = a.grid.points, b.grid.points
    desc = cdist(a.grid.descriptors, b.grid.descriptors)
    spatial = cdist(g_ab(xa), xb) + cdist(xa, g_ba(xb))
    return desc, spatial


def calibrate_alpha(collection: Collection, neighbors, n_samples=CALIBRATION_SAMPLES, seed=0) -> float:
    """Weight making the median spatial term equal the median descriptor term.

    Medians are taken over random candidate pairs (u in i, v in a pose
    neighbour of i).
    """
    rng = np.random.default_rng(seed)
    insts = collection.instances
    i_s = rng.integers(0, len(insts), n_samples)
    slot = rng.integers(0, neighbors.shape[1], n_samples)
    j_s = neighbors[i_s, slot]
    desc = np.empty(n_samples)
    spatial = np.empty(n_samples)
    cache = {}
    for n, (i, j) in enumerate(zip(i_s, j_s)):
        if (i, j) not in cache:
            cache[(i, j)] = pair_interpolants(insts[i], insts[j])
        g_ij, g_ji = cache[(i, j)]
        u = rng.integers(0, len(insts[i].grid))
        v = rng.integers(0, len(insts[j].grid))
        xu, xv = insts[i].grid.points[u], insts[j].grid.points[v]
        desc[n] = np.linalg.norm(insts[i].grid.descriptors[u] - insts[j].grid.descriptors[v])
        spatial[n] = np.linalg.norm(xv - g_ij(xu)[0]) + np.linalg.norm(xu - g_ji(xv)[0])
    ms = float(np.median(spatial))
    return float(np.median(desc)) / ms if ms > 0 else 1.0


def collection_hash(collection: Collection) -> str:
    text = json.dumps(collection_to_json(collection), separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(text.encode()).hexdigest()


def build_network(collection: Collection, k: int = DEFAULT_K, alpha="auto", threads: int = 1,
                  seed: int = 0) -> VVNetwork:
    """Match every instance to its k pose neighbours; one argmin edge per (node, neighbour).

    ``collection`` should already contain the mirrored views (see
    ``geometry.augment_with_mirrors``); its instances become the network's
    instances in order.
    """
    insts = collection.instances
    for inst in insts:
        if inst.camera is None:
            raise ValidationError(f"build_network: instance {inst.id} has no camera")
        if len(inst.grid) == 0:
            raise ValidationError(f"build_network: instance {inst.id} has an empty grid")
    nbrs = pose_knn([i.camera for i in insts], k)
    if isinstance(alpha, str):
        if alpha != "auto":
            raise ValidationError(f"alpha must be a number or 'auto', got {alpha!r}")
        alpha = calibrate_alpha(collection, nbrs, seed=seed)
        log.info("calibrated alpha = %.6g", alpha)
    alpha = float(alpha)
    if not alpha >= 0:
        raise ValidationError("alpha must be non-negative")
    sizes = np.array([len(i.grid) for i in insts])
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    targets = np.empty((offsets[-1], k), np.int64)
    weights = np.empty((offsets[-1], k))

    def work(i):
        for slot, j in enumerate(nbrs[i]):
            desc, spatial = _pair_terms(insts[i], insts[j])
            E = desc + alpha * spatial
            arg = np.argmin(E, axis=1)
            rows = slice(offsets[i], offsets[i + 1])
            targets[rows, slot] = offsets[j] + arg
            weights[rows, slot] = quantize(E[np.arange(len(arg)), arg])

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            list(ex.map(work, range(len(insts))))
    else:
        for i in range(len(insts)):
            work(i)
    return VVNetwork(offsets, targets, weights, nbrs, alpha, tuple(i.id for i in insts),
                     collection, collection_hash(collection))


def random_network(n_instances: int, points, k: int, rng, weight_levels=None) -> VVNetwork:
    """Random network with the VVN structure, for testing and benchmarks.

    ``points`` is a per-instance point count or a (low, high) range. With
    ``weight_levels`` the weights are small integers, which produces many ties.
    """
    if not 0 < k < n_instances:
        raise ValidationError("random_network: need 0 < k < n_instances")
    if np.isscalar(points):
        sizes = np.full(n_instances, int(points))
    else:
        sizes = rng.integers(points[0], points[1] + 1, n_instances)
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    nbrs = np.stack([rng.choice(np.delete(np.arange(n_instances), i), k, replace=False)
                     for i in range(n_instances)])
    n = offsets[-1]
    inst_of = np.repeat(np.arange(n_instances), sizes)
    nb = nbrs[inst_of]
    targets = offsets[nb] + (rng.random((n, k)) * sizes[nb]).astype(np.int64)
    if weight_levels:
        weights = rng.integers(0, weight_levels, (n, k)).astype(float)
    else:
        weights = quantize(rng.exponential(1.0, (n, k)))
    return VVNetwork(offsets, targets, weights, nbrs, 1.0)


def random_docking(network: VVNetwork, n_test_points: int, n_dock: int, rng, weight_levels=None,
                   edges_per_instance=1) -> DockingSet:
    dock = rng.choice(network.n_instances, min(n_dock, network.n_instances), replace=False)
    tp, nd = [], []
    for p in range(n_test_points):
        for j in dock:
            size = network.offsets[j + 1] - network.offsets[j]
            pts = rng.choice(size, min(edges_per_instance, size), replace=False)
            tp.extend([p] * len(pts))
            nd.extend(network.offsets[j] + pts)
    m = len(tp)
    w = rng.integers(0, weight_levels, m).astype(float) if weight_levels else quantize(rng.exponential(1.0, m))
    return DockingSet(tp, nd, w, dock, n_test_points)


# ---------------------------------------------------------------------------
# docking and alignment


def nearest_poses(network: VVNetwork, pose: Camera, n: int) -> np.ndarray:
    R = np.stack([i.camera.rotation for i in network.collection.instances])
    d = pairwise_rotation_distance(pose.rotation[None], R)[0]
    return np.argsort(d, kind="stable")[: min(n, len(d))]


def suppress_duplicate_edges(test_point, node, weight):
    """Keep only the lightest edge per (test point, node); ties keep the first listed."""
    test_point = np.asarray(test_point, np.int64)
    node = np.asarray(node, np.int64)
    weight = np.asarray(weight, float)
    order = np.lexsort((weight, node, test_point))
    tp, nd, w = test_point[order], node[order], weight[order]
    keep = np.ones(len(tp), bool)
    keep[1:] = (tp[1:] != tp[:-1]) | (nd[1:] != nd[:-1])
    return tp[keep], nd[keep], w[keep]


def dock(test: ObjectInstance, network: VVNetwork, test_pose: Camera, n_dock: int = DEFAULT_N_DOCK,
         alpha: Optional[float] = None) -> DockingSet:
    """Attach a test view to its ``n_dock`` pose-nearest network instances.

    The spatial prior is the affine map between mask bounding boxes. Matching
    runs both ways (test point to its best node, node to its best test point);
    duplicate (test point, node) edges keep the lighter weight.
    """
    if network.n_instances == 0 or network.collection is None:
        raise ValidationError("dock: empty network or network without its collection")
    if len(test.grid) == 0:
        raise ValidationError(f"dock: test instance {test.id} has an empty grid")
    alpha = network.alpha if alpha is None else float(alpha)
    docking = nearest_poses(network, test_pose, n_dock)
    tb = test.mask_bbox()
    xt, dt = test.grid.points, test.grid.descriptors
    tp, nd, ww = [], [], []
    for j in docking:
        inst = network.collection.instances[j]
        h = fit_affine_box(tb, inst.mask_bbox())
        E = cdist(dt, inst.grid.descriptors) + alpha * cdist(h(xt), inst.grid.points)
        fwd = np.argmin(E, axis=1)
        bwd = np.argmin(E, axis=0)
        rows = np.concatenate([np.arange(len(xt)), bwd])
        cols = np.concatenate([fwd, np.arange(E.shape[1])])
        tp.append(rows)
        nd.append(network.offsets[j] + cols)
        ww.append(quantize(E[rows, cols]))
    tp, nd, ww = suppress_duplicate_edges(np.concatenate(tp), np.concatenate(nd), np.concatenate(ww))
    return DockingSet(tp, nd, ww, docking, len(xt))


def align_dijkstra(network: VVNetwork, docking: DockingSet) -> AlignmentResult:
    """Reference alignment: one Dijkstra per test point over the docked network."""
    indptr, indices, weights = network.csr()
    ptr, node, w = docking.grouped()
    P, J = docking.n_test_points, network.n_instances
    out_node = np.empty((P, J), np.int64)
    out_dist = np.empty((P, J))
    _graph.align_all_dijkstra(indptr, indices, weights, network.offsets, ptr, node, w, out_node, out_dist)
    return AlignmentResult(out_node, out_dist, network.offsets.copy(), "vvn-dijkstra")


def compress(network: VVNetwork) -> CompressedNetwork:
    """Exact point-to-point compression via one reverse multi-source Dijkstra per instance."""
    rptr, rind, rw = network.reverse_csr()
    n, J = network.n_nodes, network.n_instances
    node = np.empty((n, J), np.int32 if n < 2**31 else np.int64)
    dist = np.empty((n, J))
    _graph.nearest_in_blocks(rptr, rind, rw, network.offsets, node, dist)
    return CompressedNetwork(network.offsets.copy(), node, dist)


def align_fast(compressed: CompressedNetwork, docking: DockingSet) -> AlignmentResult:
    """Alignment by pushing each docking edge onto the compressed rows of its head node.

    For test point p and instance j the result is the lexicographic minimum of
    ``(w + dist(q, j), match(q, j))`` over p's docking edges ``(p -> q, w)``,
    which equals the Dijkstra answer because a minimum over first hops
    commutes with the minimum over destination nodes.
    """
    P, J = docking.n_test_points, compressed.n_instances
    ptr, node, w = docking.grouped()
    out_node = np.full((P, J), -1, np.int64)
    out_dist = np.full((P, J), np.inf)
    has = np.diff(ptr) > 0
    if not np.any(has):
        return AlignmentResult(out_node, out_dist, compressed.offsets.copy(), "vvn-fast")
    D = w[:, None] + compressed.match_dist[node]
    N = compressed.match_node[node].astype(np.int64)
    starts = ptr[:-1][has]
    best = np.minimum.reduceat(D, starts, axis=0)
    group = np.repeat(np.arange(len(starts)), np.diff(ptr)[has])
    tie = D == best[group]
    big = np.iinfo(np.int64).max
    bn = np.minimum.reduceat(np.where(tie, N, big), starts, axis=0)
    bn = np.where(np.isfinite(best), bn, -1)
    out_node[has] = bn
    out_dist[has] = best
    return AlignmentResult(out_node, out_dist, compressed.offsets.copy(), "vvn-fast")


# ---------------------------------------------------------------------------
# persistence


def save_network(path, network: VVNetwork, compressed: Optional[CompressedNetwork] = None):
    """Binary cache (numpy archive) keyed by the collection content hash."""
    arrays = dict(
        offsets=network.offsets, targets=network.targets, weights=network.weights,
        pose_neighbors=network.pose_neighbors, alpha=np.array(network.alpha),
        instance_ids=np.array(network.instance_ids, dtype=str),
        collection_hash=np.array(network.collection_hash),
    )
    if compressed is not None:
        arrays.update(match_node=compressed.match_node, match_dist=compressed.match_dist)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_network(path, collection: Optional[Collection] = None):
    """Returns ``(network, compressed_or_None)``; checks the hash when a collection is given."""
    with np.load(Path(path), allow_pickle=False) as z:
        h = str(z["collection_hash"])
        if collection is not None and h and collection_hash(collection) != h:
            raise ValidationError("network file was built from a different collection")
        net = VVNetwork(z["offsets"], z["targets"], z["weights"], z["pose_neighbors"],
                        float(z["alpha"]), tuple(str(s) for s in z["instance_ids"]), collection, h)
        comp = None
        if "match_node" in z:
            comp = CompressedNetwork(net.offsets.copy(), z["match_node"], z["match_dist"])
    return net, comp


def cache_path(collection: Collection, k: int, alpha) -> Optional[Path]:
    root = os.environ.get("VVN_CACHE_DIR")
    if not root:
        return None
    tag = "auto" if isinstance(alpha, str) else repr(float(alpha))
    return Path(root) / f"{collection_hash(collection)[:24]}-k{k}-a{tag}.bin"


def build_or_load(collection: Collection, k: int = DEFAULT_K, alpha="auto", threads: int = 1):
    """Network plus compression, reusing ``$VVN_CACHE_DIR`` when set."""
    path = cache_path(collection, k, alpha)
    if path is not None and path.exists():
        net, comp = load_network(path, collection)
        if comp is not None:
            return net, comp
    net = build_network(collection, k, alpha, threads)
    comp = compress(net)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_network(path, net, comp)
    return net, comp
