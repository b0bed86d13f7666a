"""Compiled shortest-path kernels over CSR graphs (binary heaps, lazy deletion)."""

from heapq import heappop, heappush

import numba
import numpy as np

INF = np.inf


@numba.njit(cache=True)
def dijkstra_seeded(indptr, indices, weights, seeds, seed_dist, n):
    """Distances from a virtual source with edges ``source -> seeds[i]`` of weight ``seed_dist[i]``."""
    dist = np.full(n, INF)
    done = np.zeros(n, np.bool_)
    heap = [(0.0, np.int64(0))]
    heap.pop()
    for i in range(seeds.size):
        q = seeds[i]
        if seed_dist[i] < dist[q]:
            dist[q] = seed_dist[i]
            heappush(heap, (seed_dist[i], np.int64(q)))
    while len(heap) > 0:
        d, u = heappop(heap)
        if done[u]:
            continue
        done[u] = True
        for e in range(indptr[u], indptr[u + 1]):
            v = indices[e]
            nd = d + weights[e]
            if nd < dist[v]:
                dist[v] = nd
                heappush(heap, (nd, np.int64(v)))
    return dist


@numba.njit(cache=True)
def block_argmin(dist, offsets, out_node, out_dist):
    """Per block ``[offsets[j], offsets[j+1])``: minimum and its lowest index (-1 if infinite)."""
    for j in range(offsets.size - 1):
        best = INF
        arg = -1
        for v in range(offsets[j], offsets[j + 1]):
            if dist[v] < best:
                best = dist[v]
                arg = v
        out_node[j] = arg
        out_dist[j] = best


@numba.njit(cache=True)
def align_all_dijkstra(indptr, indices, weights, offsets, edge_ptr, edge_node, edge_w,
                       out_node, out_dist):
    """One seeded Dijkstra per test point; edges of test point p are ``edge_ptr[p]:edge_ptr[p+1]``."""
    n = indptr.size - 1
    for p in range(edge_ptr.size - 1):
        a, b = edge_ptr[p], edge_ptr[p + 1]
        if a == b:
            out_node[p, :] = -1
            out_dist[p, :] = INF
            continue
        dist = dijkstra_seeded(indptr, indices, weights, edge_node[a:b], edge_w[a:b], n)
        block_argmin(dist, offsets, out_node[p], out_dist[p])


@numba.njit(cache=True)
def nearest_in_blocks(rptr, rind, rw, offsets, out_node, out_dist):
    """For every node and every block j: the geodesically nearest node of block j.

    Runs one multi-source Dijkstra per block on the reversed graph with
    lexicographic labels (distance, source), so ties resolve to the lowest
    source index.
    """
    n = rptr.size - 1
    dist = np.empty(n)
    src = np.empty(n, np.int64)
    done = np.empty(n, np.bool_)
    for j in range(offsets.size - 1):
        dist[:] = INF
        src[:] = -1
        done[:] = False
        heap = [(0.0, np.int64(0), np.int64(0))]
        heap.pop()
        for v in range(offsets[j], offsets[j + 1]):
            dist[v] = 0.0
            src[v] = v
            heappush(heap, (0.0, np.int64(v), np.int64(v)))
        while len(heap) > 0:
            d, s, u = heappop(heap)
            if done[u] or d != dist[u] or s != src[u]:
                continue
            done[u] = True
            for e in range(rptr[u], rptr[u + 1]):
                x = rind[e]
                if done[x]:
                    continue
                nd = d + rw[e]
                if nd < dist[x] or (nd == dist[x] and s < src[x]):
                    dist[x] = nd
                    src[x] = s
                    heappush(heap, (nd, s, np.int64(x)))
        for v in range(n):
            out_node[v, j] = src[v]
            out_dist[v, j] = dist[v]
