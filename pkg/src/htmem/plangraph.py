"""Dense scored digraph over candidate nodes and shortest-path extraction.

Nodes are observations (generated candidates plus the actual start and goal);
every ordered pair gets a directed logit from the connectivity model, turned
into positive edge weights under a selectable scheme. The normalized scheme
divides each column's total score mass by the edge's own score, so shortest
paths maximize a likelihood bound along the way (checkable via
``jensen_bound_check``).
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import derived_seed, logsumexp_np, sigmoid
from .cvae import CvaeModel, hallucinate

WEIGHT_SCHEMES = ("inverse", "normalized", "sptm_threshold", "sptm_exp")


class NoPathError(RuntimeError):
    """Goal unreachable; only possible when thresholding removes edges."""


@dataclass
class PlanGraph:
    observations: np.ndarray  # (n, obs_dim) node observations
    logits: np.ndarray  # (n, n); [i, j] scores the directed edge j -> i
    weights: np.ndarray  # (n, n); inf marks absent edges and the diagonal
    scheme: str
    s_shortcut: float | None = None

    @property
    def n_nodes(self) -> int:
        return len(self.observations)


@dataclass
class Plan:
    node_indices: list
    observations: np.ndarray
    edge_weights: np.ndarray
    edge_logits: np.ndarray
    total_weight: float
    scheme: str
    seed: int | None = None

    def __len__(self):
        return len(self.node_indices)

    def to_dict(self) -> dict:
        return {
            "node_indices": [int(i) for i in self.node_indices],
            "observations": self.observations.tolist(),
            "edge_weights": self.edge_weights.tolist(),
            "edge_logits": self.edge_logits.tolist(),
            "total_weight": self.total_weight,
            "scheme": self.scheme,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d) -> "Plan":
        return cls(
            list(d["node_indices"]),
            np.array(d["observations"]),
            np.array(d["edge_weights"]),
            np.array(d["edge_logits"]),
            d["total_weight"],
            d["scheme"],
            d.get("seed"),
        )


def scheme_weights(logits: np.ndarray, scheme: str, s_shortcut=0.5) -> np.ndarray:
    """Edge weights for a full logit matrix; diagonal comes back infinite.

    inverse:        w_ij = exp(-logit_ij), the reciprocal of the score
    normalized:     w_ij = sum_s exp(logit_sj) / exp(logit_ij); the column sum
                    includes every node, so each weight is >= 1
    sptm_threshold: unit weight where sigmoid(logit) >= s_shortcut, else no edge
    sptm_exp:       w_ij = exp(-sigmoid(logit_ij))
    """
    if scheme not in WEIGHT_SCHEMES:
        raise ValueError(f"unknown weight scheme {scheme!r}")
    n = logits.shape[0]
    if scheme == "inverse":
        w = np.exp(-logits)
    elif scheme == "normalized":
        col_lse = logsumexp_np(logits, axis=0)  # over sources of mass out of j
        w = np.exp(col_lse[None, :] - logits)
    elif scheme == "sptm_threshold":
        if not 0.0 < s_shortcut < 1.0:
            raise ValueError("s_shortcut must lie in (0, 1)")
        w = np.where(sigmoid(logits) >= s_shortcut, 1.0, np.inf)
    else:
        w = np.exp(-sigmoid(logits))
    np.fill_diagonal(w, np.inf)  # no self-loops
    return w


def build_graph(node_obs, scorer, ctx_encoding, scheme="normalized", s_shortcut=0.5) -> PlanGraph:
    """Score all ordered node pairs and apply the weight scheme."""
    node_obs = np.atleast_2d(np.asarray(node_obs, dtype=float))
    if len(node_obs) < 2:
        raise ValueError("graph needs at least start and goal nodes")
    logits = scorer.pairwise_logits(node_obs, ctx_encoding)
    weights = scheme_weights(logits, scheme, s_shortcut)
    return PlanGraph(node_obs, logits, weights, scheme, s_shortcut if scheme == "sptm_threshold" else None)


def shortest_path(graph: PlanGraph, start_idx: int, goal_idx: int) -> Plan:
    """Dijkstra over the dense digraph; weights are positive by construction.

    Heap labels carry (distance, path) so equal-cost ties resolve to the
    lexicographically smallest node-index sequence.
    """
    n = graph.n_nodes
    w = graph.weights
    if not (0 <= start_idx < n and 0 <= goal_idx < n):
        raise ValueError("start/goal index out of range")
    best: dict = {}
    heap = [(0.0, (start_idx,))]
    settled = set()
    goal_label = None
    while heap:
        dist, path = heapq.heappop(heap)
        u = path[-1]
        if u in settled:
            continue
        settled.add(u)
        if u == goal_idx:
            goal_label = (dist, path)
            break
        col = w[:, u]  # costs of edges u -> v live in column u
        for v in range(n):
            if v in settled or not np.isfinite(col[v]):
                continue
            cand = (dist + col[v], path + (v,))
            if v not in best or cand < best[v]:
                best[v] = cand
                heapq.heappush(heap, cand)
    if goal_label is None:
        raise NoPathError(f"no path from node {start_idx} to node {goal_idx}")
    dist, path = goal_label
    idx = list(path)
    edge_w = np.array([w[idx[t + 1], idx[t]] for t in range(len(idx) - 1)])
    edge_l = np.array([graph.logits[idx[t + 1], idx[t]] for t in range(len(idx) - 1)])
    return Plan(idx, graph.observations[idx], edge_w, edge_l, float(dist), graph.scheme)


@dataclass
class PlanningConfig:
    m_samples: int = 300
    scheme: str = "normalized"
    s_shortcut: float = 0.5


def plan_end_to_end(
    ctx_encoding,
    o_start,
    o_goal,
    cvae: CvaeModel,
    scorer,
    cfg: PlanningConfig,
    seed: int,
) -> tuple[Plan, PlanGraph]:
    """Sample candidate nodes, append start and goal, score, search.

    Node layout: candidates occupy 0..m-1, start is m, goal is m+1; with
    m = 0 the only route is the direct edge. Deterministic given the seed.
    """
    samples = hallucinate(cvae, ctx_encoding, cfg.m_samples, seed).observations
    nodes = np.concatenate(
        [samples, np.atleast_2d(o_start), np.atleast_2d(o_goal)], axis=0
    )
    graph = build_graph(nodes, scorer, ctx_encoding, cfg.scheme, cfg.s_shortcut)
    plan = shortest_path(graph, cfg.m_samples, cfg.m_samples + 1)
    plan.seed = seed
    return plan, graph


def jensen_bound_check(graph: PlanGraph, plan: Plan):
    """(log of mean edge weight, mean of log edge weights, bound holds).

    Valid only under the normalized scheme, where the weights approximate
    inverse transition likelihood ratios.
    """
    if graph.scheme != "normalized":
        raise ValueError("the likelihood bound is defined for the normalized scheme")
    if len(plan) < 2:
        raise ValueError("plan has no edges")
    omega = plan.edge_weights
    lhs = float(np.log(np.mean(omega)))
    rhs = float(np.mean(np.log(omega)))
    return lhs, rhs, lhs >= rhs - 1e-12


def save_plan(plan: Plan, path, provenance=None) -> None:
    payload = plan.to_dict()
    if provenance:
        payload["provenance"] = provenance
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_plan(path) -> Plan:
    with open(path) as fh:
        return Plan.from_dict(json.load(fh))
