"""Pure numpy implementations of the hot kernels.

These define the reference semantics; the compiled core must agree with them.
"""
import numpy as np


def topk_indices(row, k):
    # stable sort on the negated row keeps the lowest index first among ties
    return np.argsort(-np.asarray(row, dtype=np.float64), kind="stable")[:k]


def topk_counts(S, labels, num_classes, k):
    S = np.asarray(S, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.zeros((S.shape[1], num_classes), dtype=np.int64)
    order = np.argsort(-S, axis=1, kind="stable")[:, :k]
    for j in range(S.shape[0]):
        counts[order[j], labels[j]] += 1
    return counts


def sq_distances(X, C):
    X = np.asarray(X, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    diff = X[:, None, :] - C[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def kmeans_assign(X, C):
    d = sq_distances(X, C)
    labels = np.argmin(d, axis=1)
    return labels.astype(np.int64), d[np.arange(len(labels)), labels]


def rbf_gram(X, gamma):
    X = np.asarray(X, dtype=np.float64)
    d = sq_distances(X, X)
    return np.exp(-gamma * d)
