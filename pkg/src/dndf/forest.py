"""Soft decision trees and forests.

A tree of depth ``D`` has ``2**D - 1`` decision nodes numbered breadth-first
from 1 (children of node ``n`` are ``2n`` and ``2n + 1``) and ``2**D`` leaves
numbered left to right from 1.  Arrays are indexed from 0, so node ``n``
lives at column ``n - 1``.

Every decision node sends a sample left with probability ``sigmoid(f_n)``.
The probability of reaching a leaf is the product of the turn probabilities
along its path, and a tree predicts the routing-weighted mixture of its leaf
class distributions.  A forest averages its trees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError, ShapeError

#: Lower clamp applied inside ``-log`` so the loss stays finite.
LOG_EPS = 1e-12

LOSS_MODES = ("per-tree", "forest")


@dataclass(frozen=True)
class TreeTopology:
    """Shape of a full binary tree."""

    depth: int

    def __post_init__(self):
        if not isinstance(self.depth, (int, np.integer)) or self.depth < 1:
            raise InvalidInputError(f"tree depth must be a positive integer, got {self.depth!r}")

    @property
    def node_count(self) -> int:
        return 2**self.depth - 1

    @property
    def leaf_count(self) -> int:
        return 2**self.depth

    def path(self, leaf: int) -> list[tuple[int, bool]]:
        """Return ``(node, goes_left)`` pairs from the root down to ``leaf``.

        Both node and leaf numbers are 1-based.
        """
        if not 1 <= leaf <= self.leaf_count:
            raise InvalidInputError(f"leaf {leaf} outside 1..{self.leaf_count}")
        # In heap numbering the leaf sits at position leaf_count + leaf - 1.
        pos = self.leaf_count + leaf - 1
        steps = []
        while pos > 1:
            parent = pos // 2
            steps.append((parent, pos % 2 == 0))
            pos = parent
        return steps[::-1]


def sigmoid(x):
    """Logistic function, evaluated without overflow for large ``|x|``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def decision_probability(activation: float) -> float:
    """Probability of routing left for a single node activation."""
    a = float(activation)
    if not math.isfinite(a):
        raise InvalidInputError(f"activation must be finite, got {activation!r}")
    return float(sigmoid(np.array(a)))


def _check_activations(activations, topology):
    a = np.asarray(activations, dtype=np.float64)
    if a.ndim == 0 or a.shape[-1] != topology.node_count:
        raise ShapeError(
            f"expected {topology.node_count} node activations for depth {topology.depth}, "
            f"got shape {a.shape}"
        )
    return a


def route_probabilities(d, topology: TreeTopology):
    """Leaf reach probabilities from per-node left-turn probabilities.

    ``d`` has shape ``(..., node_count)``; the result ``(..., leaf_count)``.
    """
    d = np.asarray(d, dtype=np.float64)
    mu = np.ones(d.shape[:-1] + (1,))
    for level in range(topology.depth):
        lo = 2**level - 1
        dl = d[..., lo : 2 * lo + 1]
        nxt = np.empty(d.shape[:-1] + (2 * mu.shape[-1],))
        nxt[..., 0::2] = mu * dl
        nxt[..., 1::2] = mu * (1.0 - dl)
        mu = nxt
    return mu


def route(activations, topology: TreeTopology):
    """Routing vector ``mu`` for node activations of shape ``(..., node_count)``."""
    a = _check_activations(activations, topology)
    return route_probabilities(sigmoid(a), topology)


def tree_predict(mu, pi):
    """Class distribution of one tree: ``sum_l pi[l] * mu[l]``."""
    mu = np.asarray(mu, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    if pi.ndim != 2 or mu.shape[-1] != pi.shape[0]:
        raise ShapeError(f"routing of shape {mu.shape} does not match leaf table {pi.shape}")
    return mu @ pi


def forest_predict(tree_distributions: Sequence) -> np.ndarray:
    """Average the per-tree class distributions, summing left to right."""
    dists = [np.asarray(p, dtype=np.float64) for p in tree_distributions]
    if not dists:
        raise InvalidInputError("forest_predict needs at least one tree")
    shape = dists[0].shape
    if any(p.shape != shape for p in dists):
        raise ShapeError("all tree distributions must share one shape")
    total = np.zeros(shape)
    for p in dists:
        total = total + p
    return total / len(dists)


def sample_loss(prediction, label: int) -> float:
    p = np.asarray(prediction, dtype=np.float64)
    if not 0 <= label < p.shape[-1]:
        raise InvalidInputError(f"label {label} outside 0..{p.shape[-1] - 1}")
    return float(-np.log(max(p[label], LOG_EPS)))


def empirical_risk(losses: Iterable[float]) -> float:
    total = 0.0
    n = 0
    for v in losses:
        total += float(v)
        n += 1
    if n == 0:
        raise InvalidInputError("empirical risk of an empty sample")
    return total / n


def label_probability_gradient(activations, pi, labels, topology: TreeTopology):
    """Probability of the true label and its gradient w.r.t. node activations.

    ``activations`` is ``(B, node_count)``, ``pi`` is ``(leaf_count, C)`` and
    ``labels`` is ``(B,)``.  Returns ``(p, dp)`` with ``p`` of shape ``(B,)``
    and ``dp`` of shape ``(B, node_count)``.

    For node ``n`` with left subtree leaves ``Ln`` and right subtree ``Rn``:
    ``dP/df_n = (1 - d_n) * sum_{Ln} pi mu - d_n * sum_{Rn} pi mu``.
    """
    a = _check_activations(activations, topology)
    d = sigmoid(a)
    mu = route_probabilities(d, topology)
    weighted = mu * np.asarray(pi)[:, labels].T
    p = weighted.sum(axis=-1)
    dp = np.empty_like(a)
    sub = weighted
    for level in range(topology.depth - 1, -1, -1):
        left, right = sub[:, 0::2], sub[:, 1::2]
        lo = 2**level - 1
        dl = d[:, lo : 2 * lo + 1]
        dp[:, lo : 2 * lo + 1] = (1.0 - dl) * left - dl * right
        sub = left + right
    return p, dp


def loss_gradient_wrt_activations(activations, pi, label: int, topology: TreeTopology):
    """Gradient of ``-log P[label]`` for one sample w.r.t. its node activations."""
    a = _check_activations(activations, topology)
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape[0] != topology.leaf_count:
        raise ShapeError(f"leaf table has {pi.shape[0]} rows, tree has {topology.leaf_count} leaves")
    if not 0 <= label < pi.shape[1]:
        raise InvalidInputError(f"label {label} outside 0..{pi.shape[1] - 1}")
    p, dp = label_probability_gradient(a[None, :], pi, np.array([label]), topology)
    if p[0] < LOG_EPS:
        return np.zeros_like(a)
    return -dp[0] / p[0]


def uniform_leaves(tree_count: int, topology: TreeTopology, class_count: int) -> np.ndarray:
    """Leaf tables with every entry ``1 / class_count``."""
    return np.full((tree_count, topology.leaf_count, class_count), 1.0 / class_count)


@dataclass
class Forest:
    """Decision forest over a shared embedding.

    ``pi`` has shape ``(trees, leaves, classes)``.  ``assignment[h, n]`` is the
    embedding column that drives node ``n + 1`` of tree ``h``.
    """

    topology: TreeTopology
    pi: np.ndarray
    assignment: np.ndarray
    loss_mode: str = "per-tree"
    _ids: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=np.float64)
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        if self.pi.ndim != 3 or self.pi.shape[1] != self.topology.leaf_count:
            raise ShapeError(f"leaf table shape {self.pi.shape} does not fit depth {self.topology.depth}")
        if self.assignment.shape != (self.pi.shape[0], self.topology.node_count):
            raise ShapeError(
                f"node assignment shape {self.assignment.shape} does not match "
                f"{self.pi.shape[0]} trees x {self.topology.node_count} nodes"
            )
        if self.loss_mode not in LOSS_MODES:
            raise InvalidInputError(f"unknown loss mode {self.loss_mode!r}")
        self._ids = np.arange(self.tree_count)

    @classmethod
    def uniform(cls, topology, class_count, assignment, loss_mode="per-tree"):
        assignment = np.asarray(assignment)
        return cls(topology, uniform_leaves(assignment.shape[0], topology, class_count), assignment, loss_mode)

    @property
    def tree_count(self) -> int:
        return self.pi.shape[0]

    @property
    def class_count(self) -> int:
        return self.pi.shape[2]

    def node_activations(self, embedding) -> np.ndarray:
        """``(B, W)`` embedding to ``(B, trees, nodes)`` activations."""
        emb = np.asarray(embedding, dtype=np.float64)
        if emb.ndim != 2:
            raise ShapeError(f"embedding must be 2-D, got shape {emb.shape}")
        if self.assignment.size and self.assignment.max() >= emb.shape[1]:
            raise ShapeError(f"node assignment refers past embedding width {emb.shape[1]}")
        return emb[:, self.assignment]

    def tree_probabilities(self, embedding) -> np.ndarray:
        """Per-tree class distributions, shape ``(B, trees, classes)``."""
        mu = route(self.node_activations(embedding), self.topology)
        return np.einsum("bhl,hlc->bhc", mu, self.pi)

    def predict_proba(self, embedding) -> np.ndarray:
        per_tree = self.tree_probabilities(embedding)
        return forest_predict([per_tree[:, h] for h in range(self.tree_count)])

    def losses(self, embedding, labels) -> np.ndarray:
        """Per-sample training loss under the configured loss mode."""
        labels = np.asarray(labels)
        per_tree = self.tree_probabilities(embedding)
        rows = np.arange(len(labels))
        if self.loss_mode == "forest":
            p = forest_predict([per_tree[:, h] for h in range(self.tree_count)])[rows, labels]
            return -np.log(np.maximum(p, LOG_EPS))
        p = per_tree[rows, :, labels]
        return (-np.log(np.maximum(p, LOG_EPS))).mean(axis=1)

    def risk(self, embedding, labels) -> float:
        return empirical_risk(self.losses(embedding, labels))

    def loss_and_grad(self, embedding, labels):
        """Mean loss over the batch and its gradient w.r.t. the embedding."""
        emb = np.asarray(embedding, dtype=np.float64)
        labels = np.asarray(labels)
        acts = self.node_activations(emb)
        b, k = emb.shape[0], self.tree_count
        p = np.empty((b, k))
        dp = np.empty_like(acts)
        for h in range(k):
            p[:, h], dp[:, h] = label_probability_gradient(acts[:, h], self.pi[h], labels, self.topology)
        if self.loss_mode == "forest":
            pf = p.mean(axis=1)
            live = pf >= LOG_EPS
            losses = -np.log(np.maximum(pf, LOG_EPS))
            g = -dp / (k * np.where(live, pf, 1.0))[:, None, None]
            g[~live] = 0.0
        else:
            live = p >= LOG_EPS
            losses = (-np.log(np.maximum(p, LOG_EPS))).mean(axis=1)
            g = -dp / (k * np.where(live, p, 1.0))[:, :, None]
            g[~live] = 0.0
        g /= b
        grad = np.zeros((emb.shape[1], b))
        np.add.at(grad, self.assignment.ravel(), g.reshape(b, -1).T)
        return float(losses.mean()), grad.T


def leaf_update_step(pi, batches, topology: TreeTopology, loss_mode="per-tree"):
    """One multiplicative update of every tree's leaf table.

    ``batches`` yields ``(activations, labels)`` with activations of shape
    ``(b, trees, nodes)``.  Each class row entry becomes proportional to the
    summed posterior mass ``pi[l, y] * mu_l(x) / P[y | x]`` of the samples
    labelled ``y``; rows that receive no mass keep their old values.
    """
    pi = np.asarray(pi, dtype=np.float64)
    k, _, c = pi.shape
    acc = np.zeros_like(pi)
    seen = 0
    for acts, labels in batches:
        labels = np.asarray(labels)
        seen += len(labels)
        mu = route(acts, topology)
        p = np.einsum("bhl,hlb->bh", mu, pi[:, :, labels])
        if loss_mode == "forest":
            denom = np.broadcast_to(p.sum(axis=1, keepdims=True), p.shape)
        else:
            denom = p
        ratio = mu / np.maximum(denom, np.finfo(float).tiny)[:, :, None]
        onehot = np.zeros((len(labels), c))
        onehot[np.arange(len(labels)), labels] = 1.0
        acc += np.einsum("bhl,bc->hlc", ratio, onehot)
    if seen == 0:
        raise InvalidInputError("leaf update needs at least one sample")
    # pi[l, y] is constant over samples, so it is applied once after the pass.
    acc *= pi
    totals = acc.sum(axis=-1, keepdims=True)
    return np.where(totals > 0, acc / np.where(totals > 0, totals, 1.0), pi)


def update_leaf_distributions(
    pi,
    batches,
    topology: TreeTopology,
    iterations: int = 20,
    tolerance: float = 1e-6,
    loss_mode: str = "per-tree",
    callback=None,
):
    """Iterate :func:`leaf_update_step` to a fixed point or ``iterations`` steps.

    ``batches`` must be re-iterable (a list, or an object whose ``__iter__``
    restarts the pass).  ``callback(i, pi)`` is invoked after every step.
    Returns the new leaf tables and the number of steps taken.
    """
    pi = np.asarray(pi, dtype=np.float64)
    steps = 0
    for i in range(iterations):
        new = leaf_update_step(pi, batches, topology, loss_mode)
        change = np.abs(new - pi).max()
        pi = new
        steps = i + 1
        if callback is not None:
            callback(i, pi)
        if change < tolerance:
            break
    return pi, steps
