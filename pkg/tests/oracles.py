"""Slow, obviously-correct reference implementations used only by the tests."""

import math

import numpy as np


def walk_features(adjacency, labels):
    codes = [int(round(float(x) * 2)) for x in labels]
    out = np.zeros((len(adjacency), 12), dtype=np.int64)
    for v, nbrs in enumerate(adjacency):
        for u in nbrs:
            out[v, codes[u]] += 1
            for w in adjacency[u]:
                if w != v:
                    out[v, 3 + 3 * codes[u] + codes[w]] += 1
    return out


def dense_norm_adj(adjacency):
    n = len(adjacency)
    a = np.eye(n)
    for v, nbrs in enumerate(adjacency):
        for u in nbrs:
            a[v, u] = 1.0
    d = a.sum(axis=1)
    return a / np.sqrt(np.outer(d, d))


def gcn_dense(adjacency, x, w):
    return np.maximum(dense_norm_adj(adjacency) @ x @ w, 0.0)


def sage_loop(adjacency, x, w_self, w_neigh):
    out = []
    for v, nbrs in enumerate(adjacency):
        mean = np.mean([x[u] for u in nbrs], axis=0) if nbrs else np.zeros(x.shape[1])
        out.append(np.maximum(w_self.T @ x[v] + w_neigh.T @ mean, 0.0))
    return np.array(out)


def gat_loop(adjacency, x, w, a, slope=0.2):
    z = x @ w
    d = w.shape[1]
    out, alphas = [], []
    for v, nbrs in enumerate(adjacency):
        hood = [v] + list(nbrs)
        scores = []
        for u in hood:
            e = float(a[:d] @ z[v] + a[d:] @ z[u])
            scores.append(e if e > 0 else slope * e)
        top = max(scores)
        ex = [math.exp(s - top) for s in scores]
        total = sum(ex)
        alpha = [e / total for e in ex]
        alphas.append(dict(zip(hood, alpha)))
        out.append(np.maximum(sum(al * z[u] for al, u in zip(alpha, hood)), 0.0))
    return np.array(out), alphas


def bfs_component_count(adjacency):
    seen = set()
    comps = 0
    for s in range(len(adjacency)):
        if s in seen:
            continue
        comps += 1
        stack = [s]
        seen.add(s)
        while stack:
            u = stack.pop()
            for v in adjacency[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
    return comps


def random_graph(rng, n, p):
    edges = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < p]
    return edges
