# app/services/joint_decoder.py
"""Document-level joint decoding with AD3.

Variables: one trigger variable per trigger candidate, one role variable per
(trigger, same-sentence entity candidate) and one entity variable per entity
candidate. Factors are dense pairwise tables: (t_i, r_ij), (r_ij, a_j) and
(t_i, t_i'). An entity variable shared by several events is one variable, so
agreement holds by construction.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.core.config import AD3Config
from app.core.errors import ModelError, NumericalError
from app.services.event_pair import PairParams, pair_log_table, select_pairs
from app.services.utils.corpus import CandidateSet, Document
from app.services.utils.schema import LabelSchema
from app.services.within_event import NEG, WithinEventParams, export_joint_tables

logger = logging.getLogger(__name__)

BRUTE_FORCE_LIMIT = 10 ** 7
INTEGRAL_EXACT = "integral_exact"
FRACTIONAL_ROUNDED = "fractional_rounded"
ITERATION_LIMIT = "iteration_limit"


@dataclass(frozen=True)
class Factor:
    left: int
    right: int
    scores: np.ndarray  # n_left x n_right
    allowed: np.ndarray  # bool, same shape
    kind: str  # "tr" | "ra" | "tt"

    def __post_init__(self):
        if not self.allowed.any():
            raise ValueError(f"{self.kind} factor ({self.left}, {self.right}) has no allowed configuration")

    @property
    def masked(self) -> np.ndarray:
        return np.where(self.allowed, self.scores, NEG)


@dataclass
class JointProblem:
    schema: LabelSchema
    domains: List[int]
    unary: List[np.ndarray]
    factors: List[Factor]
    trigger_vars: List[int]
    role_vars: Dict[Tuple[int, int], int]  # (trigger i, entity j) -> variable
    entity_vars: List[int]

    @property
    def n_vars(self) -> int:
        return len(self.domains)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_vars, dtype=np.int64)
        for f in self.factors:
            deg[f.left] += 1
            deg[f.right] += 1
        return deg

    def objective(self, assignment: Sequence[int]) -> float:
        total = sum(float(self.unary[v][x]) for v, x in enumerate(assignment))
        for f in self.factors:
            x, y = assignment[f.left], assignment[f.right]
            if not f.allowed[x, y]:
                return -math.inf
            total += float(f.scores[x, y])
        return total

    def is_valid(self, assignment: Sequence[int]) -> bool:
        for (i, j), v in self.role_vars.items():
            t, r, a = assignment[self.trigger_vars[i]], assignment[v], assignment[self.entity_vars[j]]
            if t == 0 and r != 0:
                return False
            if not self.schema.valid_tr[t, r] or not self.schema.valid_ra[r, a]:
                return False
        return True


def assemble_problem(schema: LabelSchema, trigger_unary: Sequence[np.ndarray], entity_unary: Sequence[np.ndarray],
                     links: Sequence[Tuple[int, int, np.ndarray, np.ndarray]],
                     pairs: Sequence[Tuple[int, int, np.ndarray]] = ()) -> JointProblem:
    """links: (i, j, log p(t_i, r_ij) table, log p(r_ij, a_j) table); pairs: (i, i', R table)."""
    E, R, A = schema.n_events, schema.n_roles, schema.n_entities
    domains: List[int] = []
    unary: List[np.ndarray] = []

    def new_var(size: int, u: Optional[np.ndarray]) -> int:
        domains.append(size)
        unary.append(np.zeros(size) if u is None else np.asarray(u, dtype=np.float64))
        return len(domains) - 1

    trigger_vars = [new_var(E, u) for u in trigger_unary]
    entity_vars = [new_var(A, u) for u in entity_unary]
    role_vars: Dict[Tuple[int, int], int] = {}
    factors: List[Factor] = []
    for i, j, tr, ra in links:
        v = new_var(R, None)
        role_vars[(i, j)] = v
        factors.append(Factor(trigger_vars[i], v, np.asarray(tr, dtype=np.float64), schema.valid_tr, "tr"))
        factors.append(Factor(v, entity_vars[j], np.asarray(ra, dtype=np.float64), schema.valid_ra, "ra"))
    for i, k, tt in pairs:
        factors.append(Factor(trigger_vars[i], trigger_vars[k], np.asarray(tt, dtype=np.float64),
                              np.ones((E, E), dtype=bool), "tt"))
    return JointProblem(schema, domains, unary, factors, trigger_vars, role_vars, entity_vars)


def build_problem(doc: Document, candidates: CandidateSet, we_params: WithinEventParams,
                  pair_params: Optional[PairParams], schema: LabelSchema, mode: str = "joint") -> JointProblem:
    """Scores: within-event log-marginal tables, event-pair tables (unless ``joint_no_pairs``)
    and entity span log-marginals from the candidates (unless ``joint_no_entities``)."""
    we_params.check_schema(schema)
    if pair_params is not None and pair_params.n_events != schema.n_events:
        raise ModelError("event-pair parameters were trained under a different schema")
    trigger_unary, links = [], []
    for i, trig in enumerate(candidates.triggers):
        scope = candidates.per_trigger_args[i]
        args = [candidates.entities[j] for j in scope]
        tables = export_joint_tables(we_params, doc, trig.span, [a.span for a in args],
                                     [(a.label, a.confidence) for a in args])
        trigger_unary.append(tables.log_t)
        for m, j in enumerate(scope):
            links.append((i, j, tables.log_tr[m], tables.log_ra[m]))
    entity_unary = []
    for ent in candidates.entities:
        if ent.type_scores.shape != (schema.n_entities,):
            raise ModelError("entity candidate scores do not match the schema's entity types")
        entity_unary.append(None if mode == "joint_no_entities" else ent.type_scores)
    pairs = []
    if mode != "joint_no_pairs" and pair_params is not None:
        spans = [t.span for t in candidates.triggers]
        for i, k in select_pairs(doc, spans):
            pairs.append((i, k, pair_log_table(pair_params, doc, spans[i], spans[k])))
    return assemble_problem(schema, trigger_unary, entity_unary, links, pairs)


# --------------------------------------------------------------------------
# per-factor quadratic subproblem
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FactorQP:
    q_left: np.ndarray
    q_right: np.ndarray
    active: Tuple[int, ...]  # flat configuration ids (x * n_right + y)
    weights: np.ndarray


def dense_factor_subproblem(scores: np.ndarray, allowed: np.ndarray, z_left: np.ndarray, z_right: np.ndarray,
                            eta: float, warm: Optional[Sequence[int]] = None, max_steps: int = 1000) -> FactorQP:
    """Minimise 0.5 * ||M alpha - z||^2 - scores . alpha / eta over distributions alpha on allowed cells.

    M maps a distribution over cells to its two marginals. Active-set method:
    equality-constrained solves on the support, ratio steps when a weight
    would turn negative, and a null-space step when the support's marginal
    vectors are affinely dependent.
    """
    n1, n2 = scores.shape
    cells = np.flatnonzero(allowed.ravel())
    if cells.size == 0:
        raise ValueError("factor has no allowed configuration")
    xs, ys = np.divmod(cells, n2)
    c = scores.ravel()[cells] / eta
    pos = {int(s): k for k, s in enumerate(cells)}

    def marginals(act: List[int], w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return (np.bincount(xs[act], weights=w, minlength=n1), np.bincount(ys[act], weights=w, minlength=n2))

    def constraint_matrix(act: List[int]) -> np.ndarray:
        K = np.zeros((n1 + n2 + 1, len(act)))
        K[xs[act], np.arange(len(act))] = 1.0
        K[n1 + ys[act], np.arange(len(act))] = 1.0
        K[-1] = 1.0
        return K

    def kkt(act: List[int]) -> np.ndarray:
        xa, ya = xs[act], ys[act]
        G = (xa[:, None] == xa[None, :]).astype(float) + (ya[:, None] == ya[None, :])
        n = len(act)
        lhs = np.zeros((n + 1, n + 1))
        lhs[:n, :n] = G
        lhs[:n, n] = lhs[n, :n] = 1.0
        rhs = np.append(z_left[xa] + z_right[ya] + c[act], 1.0)
        return np.linalg.solve(lhs, rhs)[:n]

    vertex = int(np.argmax(c + z_left[xs] + z_right[ys]))
    active, w = [vertex], np.array([1.0])
    if warm:
        cand = [pos[s] for s in warm if s in pos]
        if cand and np.linalg.matrix_rank(constraint_matrix(cand)) == len(cand):
            beta = kkt(cand)
            if (beta >= 0).all():
                active, w = cand, beta

    for _ in range(max_steps):
        K = constraint_matrix(active)
        _, sv, vt = np.linalg.svd(K)
        rank = int((sv > 1e-10 * max(1.0, sv[0])).sum())
        if rank < len(active):
            null = vt[rank:]
            d = null[int(np.argmax(np.abs(null[:, -1])))]
            if abs(d[-1]) > 1e-12:
                d = d * np.sign(d[-1])
            else:
                q1, q2 = marginals(active, w)
                g = (q1 - z_left)[xs[active]] + (q2 - z_right)[ys[active]] - c[active]
                d = -d if g @ d > 0 else d
            shrink = np.flatnonzero(d < -1e-15)
            k = shrink[int(np.argmin(w[shrink] / -d[shrink]))]
            w = w + (w[k] / -d[k]) * d
            active.pop(k)
            w = np.clip(np.delete(w, k), 0.0, None)
            continue
        beta = kkt(active)
        neg = np.flatnonzero(beta < -1e-14)
        if neg.size:
            ratios = w[neg] / (w[neg] - beta[neg])
            k = neg[int(np.argmin(ratios))]
            w = w + ratios.min() * (beta - w)
            active.pop(k)
            w = np.clip(np.delete(w, k), 0.0, None)
            continue
        w = np.clip(beta, 0.0, None)
        w = w / w.sum()
        q1, q2 = marginals(active, w)
        g = (q1 - z_left)[xs] + (q2 - z_right)[ys] - c
        best = int(np.argmin(g))
        if best in active or g[best] >= g[active].min() - 1e-12:
            break
        active.append(best)
        w = np.append(w, 0.0)
    else:
        logger.warning("factor QP over %dx%d cells stopped after %d active-set steps without converging",
                       n1, n2, max_steps)

    q1, q2 = marginals(active, w)
    return FactorQP(q1, q2, tuple(int(cells[k]) for k in active), w)


# --------------------------------------------------------------------------
# rounding, oracle, solver
# --------------------------------------------------------------------------

def round_and_repair(posteriors: Sequence[np.ndarray], problem: JointProblem) -> Tuple[int, ...]:
    """Per-variable argmax (lowest index on ties), then make every (t, r, a) triple schema-valid."""
    x = [int(np.argmax(p)) for p in posteriors]
    schema = problem.schema
    for (i, j), v in problem.role_vars.items():
        if not schema.valid_tr[x[problem.trigger_vars[i]], x[v]]:
            x[v] = 0
    by_entity: Dict[int, List[int]] = {}
    for (i, j), v in problem.role_vars.items():
        by_entity.setdefault(j, []).append(v)
    for j, roles in sorted(by_entity.items()):
        a_var = problem.entity_vars[j]
        # keep the most confident roles as long as some entity type satisfies all of them
        ordered = sorted((v for v in roles if x[v] != 0), key=lambda v: (-posteriors[v][x[v]], v))
        ok = np.ones(problem.domains[a_var], dtype=bool)
        for v in ordered:
            narrowed = ok & schema.valid_ra[x[v]]
            if narrowed.any():
                ok = narrowed
            else:
                x[v] = 0
        if not ok[x[a_var]]:
            post = np.where(ok, posteriors[a_var], -np.inf)
            x[a_var] = int(np.argmax(post))
    return tuple(x)


@dataclass(frozen=True)
class BruteForceResult:
    assignment: Tuple[int, ...]
    objective: float
    margin: float  # best minus second-best valid objective (inf when only one is valid)


def brute_force_solve(problem: JointProblem, chunk: int = 1 << 16) -> BruteForceResult:
    """Exhaustive argmax; the first optimum in lexicographic order (variable 0 most significant) wins."""
    total = int(np.prod(problem.domains, dtype=np.float64)) if problem.domains else 1
    if total > BRUTE_FORCE_LIMIT:
        raise NumericalError(f"brute force over {total} assignments exceeds {BRUTE_FORCE_LIMIT}")
    tables = [np.where(f.allowed, f.scores, -np.inf) for f in problem.factors]
    best_val, best_idx, second = -math.inf, 0, -math.inf
    for lo in range(0, total, chunk):
        idx = np.arange(lo, min(total, lo + chunk))
        digits = np.unravel_index(idx, problem.domains) if problem.domains else ()
        vals = np.zeros(len(idx))
        for v, d in enumerate(digits):
            vals += problem.unary[v][d]
        for f, tab in zip(problem.factors, tables):
            vals += tab[digits[f.left], digits[f.right]]
        order = np.argsort(-vals, kind="stable")[:2]
        for k in order:
            val = float(vals[k])
            if val > best_val:
                best_val, best_idx, second = val, int(idx[k]), best_val
            elif val > second:
                second = val
    assignment = tuple(int(d) for d in np.unravel_index(best_idx, problem.domains)) if problem.domains else ()
    return BruteForceResult(assignment, best_val, best_val - second)


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    dual: float
    best_dual: float
    primal: float
    primal_residual: float
    dual_residual: float
    eta: float


@dataclass
class JointSolution:
    posteriors: List[np.ndarray]
    assignment: Tuple[int, ...]
    status: str
    primal: float
    dual: float
    iterations: int
    trace: List[TraceRow] = field(default_factory=list)


def trace_frame(solution: JointSolution) -> pd.DataFrame:
    cols = ["iteration", "dual", "best_dual", "primal", "primal_residual", "dual_residual", "eta"]
    return pd.DataFrame([r.__dict__ for r in solution.trace], columns=cols)


def _dual_value(problem: JointProblem, masked: List[np.ndarray], share: List[np.ndarray],
                lam: List[List[np.ndarray]], isolated: List[int]) -> float:
    total = sum(float(np.max(problem.unary[v])) for v in isolated)
    for f, m, (l_left, l_right) in zip(problem.factors, masked, lam):
        total += float(np.max(m + (share[f.left] + l_left)[:, None] + (share[f.right] + l_right)[None, :]))
    return total


def ad3_solve(problem: JointProblem, cfg: Optional[AD3Config] = None) -> JointSolution:
    cfg = cfg or AD3Config()
    deg = problem.degrees()
    isolated = [v for v in range(problem.n_vars) if deg[v] == 0]
    fixed = {v: int(np.argmax(problem.unary[v])) for v in isolated}

    def onehot(v: int) -> np.ndarray:
        out = np.zeros(problem.domains[v])
        out[fixed[v]] = 1.0
        return out

    if not problem.factors:
        post = [onehot(v) for v in range(problem.n_vars)]
        assignment = tuple(fixed[v] for v in range(problem.n_vars))
        value = problem.objective(assignment)
        return JointSolution(post, assignment, INTEGRAL_EXACT, value, value, 1)

    # each unary is centred on its max; the constants come back through `offset`
    peaks = [float(np.max(u)) for u in problem.unary]
    offset = sum(peaks[v] for v in range(problem.n_vars) if deg[v])
    share = [(problem.unary[v] - peaks[v]) / max(int(deg[v]), 1) for v in range(problem.n_vars)]
    masked = [f.masked for f in problem.factors]
    p = [onehot(v) if deg[v] == 0 else np.full(d, 1.0 / d) for v, d in enumerate(problem.domains)]
    lam = [[np.zeros(problem.domains[f.left]), np.zeros(problem.domains[f.right])] for f in problem.factors]
    warm: List[Optional[Tuple[int, ...]]] = [None] * len(problem.factors)
    n_entries = sum(problem.domains[f.left] + problem.domains[f.right] for f in problem.factors)

    eta = cfg.eta
    best_dual, best_primal = math.inf, -math.inf
    best_assignment: Tuple[int, ...] = tuple(0 for _ in problem.domains)
    trace: List[TraceRow] = []
    status = ITERATION_LIMIT
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        local = []
        for k, f in enumerate(problem.factors):
            z_left = p[f.left] + (share[f.left] + lam[k][0]) / eta
            z_right = p[f.right] + (share[f.right] + lam[k][1]) / eta
            res = dense_factor_subproblem(masked[k], f.allowed, z_left, z_right, eta, warm[k])
            warm[k] = res.active
            local.append((res.q_left, res.q_right))

        acc = [np.zeros(d) for d in problem.domains]
        for f, (ql, qr) in zip(problem.factors, local):
            acc[f.left] += ql
            acc[f.right] += qr
        p_new = [acc[v] / deg[v] if deg[v] else p[v] for v in range(problem.n_vars)]

        primal_sq = dual_sq = 0.0
        for k, (f, (ql, qr)) in enumerate(zip(problem.factors, local)):
            for side, var, q in ((0, f.left, ql), (1, f.right, qr)):
                diff = q - p_new[var]
                primal_sq += float(diff @ diff)
                lam[k][side] -= eta * diff
                step = p_new[var] - p[var]
                dual_sq += float(step @ step)
        p = p_new
        r_primal, r_dual = math.sqrt(primal_sq / n_entries), math.sqrt(dual_sq / n_entries)

        dual = _dual_value(problem, masked, share, lam, isolated) + offset
        best_dual = min(best_dual, dual)
        candidate = round_and_repair(p, problem)
        value = problem.objective(candidate)
        if value > best_primal:
            best_primal, best_assignment = value, candidate
        trace.append(TraceRow(it, dual, best_dual, best_primal, r_primal, r_dual, eta))
        logger.debug("ad3 iter %d: dual=%.8g best=%.8g primal=%.8g rp=%.2e rd=%.2e eta=%.3g",
                     it, dual, best_dual, best_primal, r_primal, r_dual, eta)

        if best_dual - best_primal <= cfg.residual_tolerance:
            status = INTEGRAL_EXACT
            break
        if r_primal <= cfg.residual_tolerance and r_dual <= cfg.residual_tolerance:
            integral = all(float(np.max(q)) >= 1.0 - cfg.integrality_tolerance for q in p)
            status = INTEGRAL_EXACT if integral else FRACTIONAL_ROUNDED
            break
        if cfg.eta_adapt:
            if r_primal > cfg.adapt_ratio * r_dual:
                eta = min(eta * cfg.adapt_factor, cfg.eta_max)
            elif r_dual > cfg.adapt_ratio * r_primal:
                eta = max(eta / cfg.adapt_factor, cfg.eta_min)

    if status == ITERATION_LIMIT:
        logger.warning("ad3 hit the iteration limit (%d); returning the best rounded assignment", it)
    return JointSolution(p, best_assignment, status, best_primal, best_dual, it, trace)
