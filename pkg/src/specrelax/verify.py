"""Verification engines: exact speculative acceptance and its similarity relaxation.

The exact engine walks the draft tree level by level, accepting a candidate
when a uniform draw falls under min(1, q/p) and sampling the residual
correction on rejection. The relaxed engine additionally transfers target
mass from feature-similar sibling tokens and feature-aligned child tokens
onto the candidate, never exceeding a per-call total-variation budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

from .core import (
    DegenerateResidual,
    GridPos,
    PROB_ATOL,
    ProbDist,
    RngStream,
    TokenId,
    cosine_sim,
    residual_dist,
)
from .models import Drafter, Target, TargetEval
from .tree import DraftNode, DraftTree, TOPK, TreeMask, sample_draft_tree

LITERAL = "literal"
RESIDUAL_ADJUSTED = "residual-adjusted"

AR = "ar"
VANILLA = "vanilla"
CASCADE = "cascade"
MODES = (AR, VANILLA, CASCADE)


@dataclass(frozen=True)
class RelaxConfig:
    """Thresholds and budget governing relaxed acceptance.

    Cosine thresholds are compared with >=; 1.01 makes a set unsatisfiable.
    The budget is reset once per verification call and shared by all levels.
    """

    tau_pos: float = 0.85
    tau_seq: float = 0.5
    tvd_budget: float = 0.5
    enable_interchange: bool = True
    enable_convergence: bool = True
    sibling_mode: str = LITERAL

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau_pos <= 1.01 or not 0.0 <= self.tau_seq <= 1.01:
            raise ValueError("cosine thresholds must lie in [0, 1.01]")
        if not 0.0 <= self.tvd_budget <= 1.0:
            raise ValueError("tvd budget must lie in [0, 1]")
        if self.sibling_mode not in (LITERAL, RESIDUAL_ADJUSTED):
            raise ValueError(f"unknown sibling mode {self.sibling_mode!r}")


class TreeEvals:
    """Target evaluations for a draft tree: the root conditional plus one per node."""

    __slots__ = ("root", "nodes")

    def __init__(self, root: TargetEval, nodes: list[TargetEval]) -> None:
        self.root = root
        self.nodes = nodes

    def for_node(self, node: DraftNode) -> TargetEval:
        return self.nodes[node.node_id]

    def parent_eval(self, node: DraftNode) -> TargetEval:
        return self.root if node.parent is None else self.nodes[node.parent.node_id]


def evaluate_tree(target: Target, tree: DraftTree) -> TreeEvals:
    """One simulated parallel target pass over root and every tree node.

    Node evaluations one step past the grid end reuse the final cell's
    position; only their features are ever consulted there.
    """
    root = target.evaluate(tree.prefix, tree.start_pos)
    cap = tree.side * tree.side - 1
    evals: list[TargetEval] = [None] * len(tree.nodes)  # type: ignore[list-item]
    paths: dict[int, tuple[TokenId, ...]] = {}
    for level_idx, level in enumerate(tree.levels):
        pos = GridPos.from_index(min(tree.start_index + level_idx + 1, cap), tree.side)
        for node in level:
            parent_path = tree.prefix if node.parent is None else paths[node.parent.node_id]
            path = parent_path + (node.token,)
            paths[node.node_id] = path
            evals[node.node_id] = target.evaluate(path, pos)
    return TreeEvals(root, evals)


@dataclass(frozen=True)
class SimilaritySets:
    """Feature-similar pairs: sibling pairs per level, and parent-child links."""

    inter_pairs: dict[int, frozenset[tuple[int, int]]]
    conv_pairs: frozenset[tuple[int, int]]
    _inter_adj: dict[int, tuple[int, ...]]
    _conv_adj: dict[int, tuple[int, ...]]

    def inter_partners(self, node_id: int) -> tuple[int, ...]:
        return self._inter_adj.get(node_id, ())

    def conv_children(self, node_id: int) -> tuple[int, ...]:
        return self._conv_adj.get(node_id, ())

    @classmethod
    def empty(cls) -> "SimilaritySets":
        return cls({}, frozenset(), {}, {})


def build_sets(tree: DraftTree, evals: TreeEvals, cfg: RelaxConfig) -> SimilaritySets:
    """Collect same-parent sibling pairs and parent-child links above threshold."""
    inter_pairs: dict[int, set[tuple[int, int]]] = {}
    inter_adj: dict[int, list[int]] = {}
    conv_pairs: set[tuple[int, int]] = set()
    conv_adj: dict[int, list[int]] = {}

    if cfg.enable_interchange and cfg.tau_pos <= 1.0:
        for level_idx, level in enumerate(tree.levels):
            pairs = inter_pairs.setdefault(level_idx + 1, set())
            groups: dict[int | None, list[DraftNode]] = {}
            for node in level:
                key = None if node.parent is None else node.parent.node_id
                groups.setdefault(key, []).append(node)
            for siblings in groups.values():
                for i, a in enumerate(siblings):
                    feat_a = evals.for_node(a).feature
                    for b in siblings[i + 1 :]:
                        if cosine_sim(feat_a, evals.for_node(b).feature) >= cfg.tau_pos:
                            lo, hi = sorted((a.node_id, b.node_id))
                            pairs.add((lo, hi))
                            inter_adj.setdefault(a.node_id, []).append(b.node_id)
                            inter_adj.setdefault(b.node_id, []).append(a.node_id)

    if cfg.enable_convergence and cfg.tau_seq <= 1.0:
        for level in tree.levels[:-1]:
            for node in level:
                feat = evals.for_node(node).feature
                for child in node.children:
                    if cosine_sim(feat, evals.for_node(child).feature) >= cfg.tau_seq:
                        conv_pairs.add((node.node_id, child.node_id))
                        conv_adj.setdefault(node.node_id, []).append(child.node_id)

    return SimilaritySets(
        {lvl: frozenset(p) for lvl, p in inter_pairs.items()},
        frozenset(conv_pairs),
        {k: tuple(v) for k, v in inter_adj.items()},
        {k: tuple(v) for k, v in conv_adj.items()},
    )


@dataclass(frozen=True)
class RelaxedDist:
    """A target conditional with extra mass granted to one boosted token.

    `added_mass` equals the total-variation distance between the base law and
    the implied transfer law; when the engine records the donor tokens in
    `transfers`, that law can be materialized and the identity checked.
    """

    base_q: ProbDist
    boosted_token: TokenId
    added_mass: float
    transfers: tuple[tuple[TokenId, float], ...] | None = None

    def __post_init__(self) -> None:
        if self.added_mass < -PROB_ATOL:
            raise ValueError("added mass must be non-negative")
        if self.boosted_prob() > 1.0 + PROB_ATOL:
            raise ValueError("boosted probability exceeds 1")

    def boosted_prob(self) -> float:
        return min(self.base_q[self.boosted_token] + self.added_mass, 1.0)

    def transfer_dist(self) -> ProbDist:
        """Materialize the relaxed law by moving donor mass onto the boosted token."""
        if self.transfers is None:
            raise ValueError("donor tokens were not recorded for this relaxation")
        mass = self.base_q.mass.copy()
        for token, amount in self.transfers:
            mass[token] -= amount
        mass[self.boosted_token] += self.added_mass
        mass[mass < 0.0] = 0.0  # guard against -1e-18 style dust
        return ProbDist(mass)


def _fit_masses(mass_i: float, mass_c: float, budget_left: float) -> tuple[float, float]:
    """All-or-nothing budget fitting: sibling mass first, then child mass."""
    applied_i = mass_i if mass_i <= budget_left + PROB_ATOL else 0.0
    remaining = budget_left - applied_i
    applied_c = mass_c if mass_c <= remaining + PROB_ATOL else 0.0
    return applied_i, applied_c


def relax_q(
    q: ProbDist,
    candidate: TokenId,
    set_mass_i: float,
    set_mass_c: float,
    budget_left: float,
) -> tuple[RelaxedDist, float]:
    """Boost `candidate` by whichever set masses fit the remaining budget.

    Each set is applied whole or not at all, sibling mass before child mass;
    a set that does not fit is skipped silently.
    """
    if set_mass_i < 0.0 or set_mass_c < 0.0:
        raise ValueError("set masses must be non-negative")
    if budget_left < -PROB_ATOL:
        raise ValueError("budget_left must be non-negative")
    applied_i, applied_c = _fit_masses(set_mass_i, set_mass_c, budget_left)
    consumed = applied_i + applied_c
    return RelaxedDist(q, candidate, consumed), consumed


class TraceRecord(NamedTuple):
    """One accept/reject decision, with the relaxation actually applied."""

    level: int
    sibling: int
    q: float
    p: float
    added_mass_i: float
    added_mass_c: float
    r: float
    decision: str
    budget_left: float

    def to_record(self) -> dict:
        return {
            "level": self.level,
            "sibling": self.sibling,
            "q": self.q,
            "p": self.p,
            "addedMassI": self.added_mass_i,
            "addedMassC": self.added_mass_c,
            "r": self.r,
            "decision": self.decision,
            "budgetLeft": self.budget_left,
        }


@dataclass
class VerifyOutcome:
    """Result of one verification call over a draft tree."""

    accepted_tokens: list[TokenId]
    correction_token: TokenId | None
    alpha: int
    tvd_consumed: float
    trace: list[TraceRecord] = field(default_factory=list)
    relaxations: list[RelaxedDist] = field(default_factory=list)

    @property
    def emitted_tokens(self) -> list[TokenId]:
        if self.correction_token is None:
            return list(self.accepted_tokens)
        return list(self.accepted_tokens) + [self.correction_token]


def _partner_masses(
    tree: DraftTree,
    sets: SimilaritySets,
    node: DraftNode,
    base: ProbDist,
) -> tuple[float, float, list[tuple[TokenId, float]], list[tuple[TokenId, float]]]:
    """Deduplicated donor masses for one candidate under the current conditional.

    Sibling partners never collide with the candidate; child tokens that equal
    the candidate or a sibling partner are dropped so the transfer stays
    realizable (every donor gives up mass it actually holds, exactly once).
    """
    donors_i: list[tuple[TokenId, float]] = []
    seen = {node.token}
    for partner_id in sets.inter_partners(node.node_id):
        token = tree.nodes[partner_id].token
        seen.add(token)
        donors_i.append((token, base[token]))
    donors_c: list[tuple[TokenId, float]] = []
    for child_id in sets.conv_children(node.node_id):
        token = tree.nodes[child_id].token
        if token in seen:
            continue
        seen.add(token)
        donors_c.append((token, base[token]))
    mass_i = math.fsum(m for _, m in donors_i)
    mass_c = math.fsum(m for _, m in donors_c)
    return mass_i, mass_c, donors_i, donors_c


def _run_verification(
    tree: DraftTree,
    evals: TreeEvals,
    rng: RngStream,
    sets: SimilaritySets | None,
    budget: float,
    sibling_mode: str,
) -> VerifyOutcome:
    accepted: list[DraftNode] = []
    trace: list[TraceRecord] = []
    relaxations: list[RelaxedDist] = []
    budget_used = 0.0
    correction: TokenId | None = None

    parent: DraftNode | None = None
    for level in tree.levels:
        siblings = tree.root_children() if parent is None else parent.children
        if not siblings:
            break
        q_dist = (evals.root if parent is None else evals.for_node(parent)).dist
        p_dist = tree.root_dist if parent is None else parent.child_dist
        q_work = q_dist
        chosen: DraftNode | None = None
        for sibling_idx, node in enumerate(siblings):
            r = rng.next_real()
            base = q_work if sibling_mode == RESIDUAL_ADJUSTED else q_dist
            q_x = base[node.token]
            applied_i = applied_c = 0.0
            if sets is not None:
                mass_i, mass_c, donors_i, donors_c = _partner_masses(tree, sets, node, base)
                _, consumed = relax_q(base, node.token, mass_i, mass_c, budget - budget_used)
                applied_i, applied_c = _fit_masses(mass_i, mass_c, budget - budget_used)
                transfers: list[tuple[TokenId, float]] = []
                if applied_i > 0.0:
                    transfers.extend(donors_i)
                if applied_c > 0.0:
                    transfers.extend(donors_c)
                relaxed = RelaxedDist(base, node.token, consumed, tuple(transfers))
                relaxations.append(relaxed)
                budget_used += consumed
                q_eff = relaxed.boosted_prob()
            else:
                q_eff = q_x
            accept = r < min(1.0, q_eff / node.drafter_prob)
            trace.append(
                TraceRecord(
                    node.level,
                    sibling_idx,
                    q_x,
                    node.drafter_prob,
                    applied_i,
                    applied_c,
                    r,
                    "accept" if accept else "reject",
                    budget - budget_used,
                )
            )
            if accept:
                chosen = node
                break
            if sibling_mode == RESIDUAL_ADJUSTED:
                try:
                    q_work = residual_dist(q_work, p_dist)
                except DegenerateResidual:
                    pass  # p already covers q_work; keep sampling law unchanged
        if chosen is None:
            # Correction stays exactly target-shaped: the unrelaxed conditional
            # minus the drafter (or, residual-adjusted, the running residual).
            if sibling_mode == RESIDUAL_ADJUSTED:
                corr_dist = q_work
            else:
                try:
                    corr_dist = residual_dist(q_dist, p_dist)
                except DegenerateResidual:
                    corr_dist = q_dist
            correction = corr_dist.sample(rng)
            break
        accepted.append(chosen)
        parent = chosen

    tokens = [node.token for node in accepted]
    return VerifyOutcome(tokens, correction, len(tokens), budget_used, trace, relaxations)


def verify_vanilla(
    tree: DraftTree,
    evals: TreeEvals,
    rng: RngStream,
    sibling_mode: str = LITERAL,
) -> VerifyOutcome:
    """Exact acceptance: r < min(1, q/p) per candidate, residual correction on reject."""
    return _run_verification(tree, evals, rng, None, 0.0, sibling_mode)


def verify_cascade(
    tree: DraftTree,
    evals: TreeEvals,
    cfg: RelaxConfig,
    rng: RngStream,
) -> VerifyOutcome:
    """Relaxed acceptance under `cfg`, with the budget reset for this call."""
    sets = build_sets(tree, evals, cfg)
    return _run_verification(tree, evals, rng, sets, cfg.tvd_budget, cfg.sibling_mode)


@dataclass
class DecodeStats:
    """Raw counters accumulated across one decoded sequence."""

    tokens_emitted: int = 0
    target_calls: int = 0
    drafter_calls: int = 0
    verify_calls: int = 0
    accepted_draft_tokens: int = 0
    accumulated_tvd: float = 0.0


def decode_sequence(
    target: Target,
    drafter: Drafter | None,
    mode: str,
    mask: TreeMask,
    cfg: RelaxConfig,
    length: int,
    rng: RngStream,
    candidate_mode: str = TOPK,
    on_outcome: Callable[[int, VerifyOutcome], None] | None = None,
) -> tuple[list[TokenId], DecodeStats]:
    """Generate `length` tokens in one of three modes.

    `ar` samples the target directly. `vanilla` and `cascade` repeat
    draft/verify cycles, appending accepted tokens plus the correction token
    when a rejection occurs; the drafted-but-unverified deepest token of a
    fully accepted cycle is never emitted. Target cost is one parallel pass
    per cycle; drafter cost is one pass per drafted level.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    side = target.grid_side or max(1, math.isqrt(max(length - 1, 0)) + 1)
    if length > side * side:
        raise ValueError(f"length {length} exceeds the {side}x{side} grid")
    stats = DecodeStats()
    tokens: list[TokenId] = []

    if mode == AR:
        for t in range(length):
            ev = target.evaluate(tokens, GridPos.from_index(t, side))
            tokens.append(ev.dist.sample(rng))
            stats.target_calls += 1
        stats.tokens_emitted = length
        return tokens, stats

    if drafter is None:
        raise ValueError(f"mode {mode!r} requires a drafter")

    cycle = 0
    while len(tokens) < length:
        depth_left = length - len(tokens)
        eff_mask = mask.clipped(depth_left)
        start_pos = GridPos.from_index(len(tokens), side)
        tree = sample_draft_tree(
            drafter, tokens, start_pos, eff_mask, rng, mode=candidate_mode, side=side
        )
        evals = evaluate_tree(target, tree)
        if mode == CASCADE:
            outcome = verify_cascade(tree, evals, cfg, rng)
        else:
            outcome = verify_vanilla(tree, evals, rng, cfg.sibling_mode)
        stats.verify_calls += 1
        stats.target_calls += 1
        stats.drafter_calls += tree.depth
        stats.accepted_draft_tokens += outcome.alpha
        stats.accumulated_tvd += outcome.tvd_consumed
        tokens.extend(outcome.emitted_tokens)
        if on_outcome is not None:
            on_outcome(cycle, outcome)
        cycle += 1
        if not outcome.emitted_tokens:
            # Unreachable for sane trees (a rejection always emits a correction),
            # but guards against infinite loops on empty instantiations.
            raise RuntimeError("verification cycle emitted no tokens")
    stats.tokens_emitted = len(tokens)
    return tokens, stats
