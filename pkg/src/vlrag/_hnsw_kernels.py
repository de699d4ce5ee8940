"""Numba kernels for the HNSW graph.

Nodes are addressed by dense internal positions (insertion order). Level 0
adjacency lives in ``adj0`` (one row per node, width ``2 * max_degree``);
levels above 0 live in ``up_adj`` rows addressed through ``slot`` (``-1`` for
nodes that only exist at level 0). Distances are ``1 - dot`` over float32
vectors with float64 accumulation. Every ordering breaks ties on the internal
position so the graph is a pure function of the insertion sequence.
"""

import heapq

import numpy as np
from numba import njit

MAX_LEVEL = 16


@njit(cache=True, nogil=True)
def dot_rows(vectors, rows, query):
    out = np.empty(rows.shape[0], dtype=np.float64)
    dim = query.shape[0]
    for r in range(rows.shape[0]):
        row = rows[r]
        acc = 0.0
        for t in range(dim):
            acc += np.float64(vectors[row, t]) * np.float64(query[t])
        out[r] = acc
    return out


@njit(cache=True, nogil=True, inline="always")
def _dist(vectors, i, query):
    acc = 0.0
    for t in range(query.shape[0]):
        acc += np.float64(vectors[i, t]) * np.float64(query[t])
    return 1.0 - acc


@njit(cache=True, nogil=True, inline="always")
def _neighbors(node, level, adj0, cnt0, slot, up_adj, up_cnt):
    if level == 0:
        return adj0[node, : cnt0[node]]
    s = slot[node]
    return up_adj[s, level - 1, : up_cnt[s, level - 1]]


@njit(cache=True, nogil=True)
def search_layer(query, entry_points, ef, level, vectors, adj0, cnt0, slot,
                 up_adj, up_cnt, visited, tag):
    """Best-first beam search on one level; returns (dists, ids) ascending."""
    cand = [(0.0, np.int64(0))]
    cand.pop()
    res = [(0.0, np.int64(0))]
    res.pop()
    for e in entry_points:
        if visited[e] == tag:
            continue
        visited[e] = tag
        d = _dist(vectors, e, query)
        heapq.heappush(cand, (d, np.int64(e)))
        heapq.heappush(res, (-d, -np.int64(e)))
        if len(res) > ef:
            heapq.heappop(res)
    while len(cand) > 0:
        d_c, c = heapq.heappop(cand)
        worst = -res[0][0]
        if len(res) >= ef and d_c > worst:
            break
        nbrs = _neighbors(c, level, adj0, cnt0, slot, up_adj, up_cnt)
        for t in range(nbrs.shape[0]):
            nb = nbrs[t]
            if visited[nb] == tag:
                continue
            visited[nb] = tag
            d = _dist(vectors, nb, query)
            worst = -res[0][0]
            if len(res) < ef or d < worst or (d == worst and nb < -res[0][1]):
                heapq.heappush(cand, (d, np.int64(nb)))
                heapq.heappush(res, (-d, -np.int64(nb)))
                if len(res) > ef:
                    heapq.heappop(res)
    n = len(res)
    items = [(0.0, np.int64(0))]
    items.pop()
    for item in res:
        items.append((-item[0], -item[1]))
    items.sort()
    dists = np.empty(n, dtype=np.float64)
    ids = np.empty(n, dtype=np.int64)
    for i in range(n):
        dists[i] = items[i][0]
        ids[i] = items[i][1]
    return dists, ids


@njit(cache=True, nogil=True)
def _append_edge(node, other, level, max_degree, vectors, adj0, cnt0, slot,
                 up_adj, up_cnt):
    if level == 0:
        row = adj0[node]
        count = cnt0[node]
        limit = 2 * max_degree
    else:
        s = slot[node]
        row = up_adj[s, level - 1]
        count = up_cnt[s, level - 1]
        limit = max_degree
    if count < limit:
        row[count] = other
        if level == 0:
            cnt0[node] = count + 1
        else:
            up_cnt[s, level - 1] = count + 1
        return
    # full row: keep the `limit` closest of row + other, i.e. drop the farthest
    q = vectors[node]
    worst_pos = -1
    worst_d = _dist(vectors, other, q)
    worst_id = other
    for t in range(limit):
        d = _dist(vectors, row[t], q)
        if d > worst_d or (d == worst_d and row[t] > worst_id):
            worst_d = d
            worst_id = row[t]
            worst_pos = t
    if worst_pos >= 0:
        row[worst_pos] = other


@njit(cache=True, nogil=True)
def insert_node(node, node_level, entry, max_level, max_degree, ef_construction,
                vectors, adj0, cnt0, slot, up_adj, up_cnt, visited, tag):
    """Link ``node`` into the graph; the caller updates the entry point."""
    query = vectors[node]
    ep = np.empty(1, dtype=np.int64)
    ep[0] = entry
    level = max_level
    while level > node_level:
        _, ids = search_layer(query, ep, 1, level, vectors, adj0, cnt0, slot,
                              up_adj, up_cnt, visited, tag)
        tag += 1
        ep = ids[:1].copy()
        level -= 1
    eps = ep
    level = min(node_level, max_level)
    while level >= 0:
        _, ids = search_layer(query, eps, ef_construction, level, vectors, adj0,
                              cnt0, slot, up_adj, up_cnt, visited, tag)
        tag += 1
        n_links = min(2 * max_degree if level == 0 else max_degree, ids.shape[0])
        for t in range(n_links):
            other = ids[t]
            if level == 0:
                adj0[node, cnt0[node]] = other
                cnt0[node] += 1
            else:
                s = slot[node]
                up_adj[s, level - 1, up_cnt[s, level - 1]] = other
                up_cnt[s, level - 1] += 1
            _append_edge(other, node, level, max_degree, vectors, adj0, cnt0,
                         slot, up_adj, up_cnt)
        eps = ids
        level -= 1
    return tag


@njit(cache=True, nogil=True)
def knn_candidates(query, entry, max_level, ef, vectors, adj0, cnt0, slot,
                   up_adj, up_cnt, n_nodes):
    """Greedy descent to level 0, then a beam of width ``ef`` there."""
    visited = np.zeros(n_nodes, dtype=np.int32)
    tag = 1
    ep = np.empty(1, dtype=np.int64)
    ep[0] = entry
    level = max_level
    while level > 0:
        _, ids = search_layer(query, ep, 1, level, vectors, adj0, cnt0, slot,
                              up_adj, up_cnt, visited, tag)
        tag += 1
        ep = ids[:1].copy()
        level -= 1
    _, ids = search_layer(query, ep, ef, 0, vectors, adj0, cnt0, slot, up_adj,
                          up_cnt, visited, tag)
    return ids
