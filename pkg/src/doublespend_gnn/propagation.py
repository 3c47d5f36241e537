"""Event-driven gossip of a payment transaction and a conflicting double-spend.

Every node keeps the first of the two conflicting transactions it sees and
relays it once to all neighbours; each delivery takes an independent
exponential time.  The attacker's node switches to the double-spend when it
is injected, whatever it held before.  The run ends when no deliveries are
pending.
"""

from __future__ import annotations

import enum
import heapq
import math
from dataclasses import dataclass

import numpy as np

from doublespend_gnn.errors import InvalidInputError, InvalidParametersError
from doublespend_gnn.topology import Topology, estimate_mean_path_length

EMPTY = 0
PAY = 1
ATTACK = 2


class Scenario(enum.Enum):
    NO_ATTACK = "no_attack"
    ATTACK = "attack"


class GraphLabel(enum.IntEnum):
    """Graph-level ground truth; the positive class is ``NO_ATTACK_ALL_HAVE_PAY``."""

    ATTACK_PRESENT = 0
    NO_ATTACK_ALL_HAVE_PAY = 1


@dataclass(frozen=True)
class ScenarioParams:
    scenario: Scenario
    pay_origin: int
    attack_origin: int = -1
    attack_delay: float = 0.0
    latency_mean: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.latency_mean > 0:
            raise InvalidParametersError("latency_mean must be positive")
        if self.scenario is Scenario.ATTACK:
            if self.attack_origin == self.pay_origin:
                raise InvalidParametersError("attack_origin must differ from pay_origin")
            if self.attack_origin < 0:
                raise InvalidParametersError("attack scenario needs an attack_origin")
            if not self.attack_delay >= 0:
                raise InvalidParametersError("attack_delay must be non-negative")


@dataclass(frozen=True)
class PropagationOutcome:
    holds: np.ndarray  # per node: PAY or ATTACK
    graph_label: GraphLabel
    pay_holder_count: int
    quiescence_time: float

    @property
    def node_count(self) -> int:
        return len(self.holds)


def graph_label_of(outcome: PropagationOutcome, n: int) -> GraphLabel:
    return graph_label_for_count(outcome.pay_holder_count, n)


def graph_label_for_count(pay_holder_count: int, n: int) -> GraphLabel:
    if pay_holder_count == n:
        return GraphLabel.NO_ATTACK_ALL_HAVE_PAY
    return GraphLabel.ATTACK_PRESENT


def run_propagation(t: Topology, p: ScenarioParams, check_connected: bool = True) -> PropagationOutcome:
    """Simulate both transactions to quiescence.

    Events are ordered by ``(time, insertion sequence)``, so results are
    deterministic for a fixed seed.
    """
    n = t.node_count
    attack = p.scenario is Scenario.ATTACK
    if not 0 <= p.pay_origin < n or (attack and not 0 <= p.attack_origin < n):
        raise InvalidParametersError(f"origin out of range for {n} nodes")
    if check_connected and not t.is_connected():
        raise InvalidInputError("propagation requires a connected topology")

    rng = np.random.default_rng(p.seed)
    holds = [EMPTY] * n
    adjacency = t.neighbor_lists()
    # Latencies are drawn in blocks; the draw order only depends on event order.
    block = np.empty(0)
    pos = 0

    queue: list[tuple[float, int, int, int]] = [(0.0, 0, p.pay_origin, PAY)]
    seq = 1
    if attack:
        queue.append((float(p.attack_delay), seq, p.attack_origin, -ATTACK))
        seq += 1
    heapq.heapify(queue)
    now = 0.0
    while queue:
        now, _, node, tx = heapq.heappop(queue)
        if tx < 0:
            # attacker injection: adopted regardless of what the node holds
            tx = -tx
        elif holds[node] != EMPTY:
            continue
        holds[node] = tx
        nbrs = adjacency[node]
        need = len(nbrs)
        if pos + need > len(block):
            block = rng.exponential(p.latency_mean, size=max(4096, need))
            pos = 0
        delays = block[pos:pos + need]
        pos += need
        for v, d in zip(nbrs, delays.tolist()):
            if holds[v] == EMPTY:
                heapq.heappush(queue, (now + d, seq, v, tx))
                seq += 1

    arr = np.array(holds, dtype=np.int8)
    if check_connected and (arr == EMPTY).any():
        raise InvalidInputError("some nodes never received a transaction")
    count = int((arr == PAY).sum())
    return PropagationOutcome(arr, graph_label_for_count(count, n), count, now)


def default_max_attack_delay(t: Topology, latency_mean: float = 1.0, factor: float = 2.0,
                             seed: int = 0) -> float:
    """Upper bound for uniformly drawn attack delays: factor * latency * ceil(mean path length)."""
    return factor * latency_mean * math.ceil(estimate_mean_path_length(t, seed=seed))


def sample_scenario(t: Topology, scenario: Scenario, rng: np.random.Generator,
                    latency_mean: float = 1.0, max_delay: float | None = None,
                    delay_factor: float = 2.0) -> ScenarioParams:
    """Draw origins (distinct, uniform), an attack delay in ``[0, max_delay]`` and a run seed."""
    n = t.node_count
    pay = int(rng.integers(n))
    attacker = -1
    delay = 0.0
    if scenario is Scenario.ATTACK:
        attacker = int(rng.integers(n))
        while attacker == pay:
            attacker = int(rng.integers(n))
        if max_delay is None:
            max_delay = default_max_attack_delay(t, latency_mean, delay_factor,
                                                 seed=int(rng.integers(2**63)))
        delay = float(rng.uniform(0.0, max_delay))
    run_seed = int(rng.integers(2**63))
    return ScenarioParams(scenario, pay, attacker, delay, latency_mean, run_seed)
