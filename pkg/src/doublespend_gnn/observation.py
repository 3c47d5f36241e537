"""Observer selection, three-valued node labels and neighbourhood label-count features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from doublespend_gnn.errors import InvalidInputError, InvalidParametersError
from doublespend_gnn.propagation import PAY, PropagationOutcome
from doublespend_gnn.topology import Topology

OBSERVER_WITHOUT_PAY = 0.0
NON_OBSERVER = 0.5
OBSERVER_WITH_PAY = 1.0

LABEL_VALUES = (OBSERVER_WITHOUT_PAY, NON_OBSERVER, OBSERVER_WITH_PAY)
FEATURE_DIM = 12


@dataclass(frozen=True)
class NodeLabelAssignment:
    labels: np.ndarray  # float64, values in LABEL_VALUES
    observer_set: tuple[int, ...]


def select_observers(n: int, k: int, seed: int | np.random.Generator) -> list[int]:
    """Pick ``k`` distinct nodes uniformly without replacement, returned sorted."""
    if k < 1 or k > n:
        raise InvalidParametersError(f"observer count must satisfy 1 <= k <= n, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    return sorted(int(v) for v in rng.choice(n, size=k, replace=False))


def assign_labels(outcome: PropagationOutcome, observers) -> NodeLabelAssignment:
    n = outcome.node_count
    obs = np.asarray(sorted(set(int(v) for v in observers)), dtype=np.int64)
    if obs.size and (obs[0] < 0 or obs[-1] >= n):
        raise InvalidParametersError("observer index out of range")
    labels = np.full(n, NON_OBSERVER)
    labels[obs] = np.where(outcome.holds[obs] == PAY, OBSERVER_WITH_PAY, OBSERVER_WITHOUT_PAY)
    return NodeLabelAssignment(labels, tuple(int(v) for v in obs))


def label_codes(labels: np.ndarray) -> np.ndarray:
    """Map label values 0.0 / 0.5 / 1.0 to column codes 0 / 1 / 2."""
    codes = np.rint(np.asarray(labels, dtype=np.float64) * 2).astype(np.int64)
    if codes.size and (codes.min() < 0 or codes.max() > 2
                       or not np.allclose(codes / 2.0, labels)):
        raise InvalidInputError("labels must be 0.0, 0.5 or 1.0")
    return codes


def extract_features(t: Topology, assignment: NodeLabelAssignment | np.ndarray) -> np.ndarray:
    """Per-node counts of neighbour labels and of non-backtracking 2-hop label pairs.

    Columns 0-2 count neighbours labelled 0.0, 0.5 and 1.0.  Columns 3-11 count
    walks v-u-w with w != v, indexed by ``3 + 3*code(u) + code(w)``.  Walks are
    counted with multiplicity.
    """
    labels = assignment.labels if isinstance(assignment, NodeLabelAssignment) else assignment
    if len(labels) != t.node_count:
        raise InvalidInputError("label assignment does not cover the topology")
    codes = label_codes(labels)
    n = t.node_count
    onehot = np.zeros((n, 3), dtype=np.int64)
    onehot[np.arange(n), codes] = 1
    adj = t.csr.astype(np.int64)
    one_hop = adj @ onehot
    # Sum over neighbours u of onehot(u) x one_hop(u), minus the backtrack walks
    # u -> v, which contribute one_hop(v) x onehot(v).
    outer = (onehot[:, :, None] * one_hop[:, None, :]).reshape(n, 9)
    two_hop = adj @ outer - (one_hop[:, :, None] * onehot[:, None, :]).reshape(n, 9)
    return np.hstack([one_hop, two_hop])

