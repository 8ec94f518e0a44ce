"""Genetic search over per-node rule assignments.

Evolves a population of RuleAssignments against two objectives, modeled
runtime and sRGB L2 error versus a ground-truth render, and returns the
Pareto frontier of the union of all restarts. Selection is NSGA-style
(non-domination rank, crowding-distance tie-break) with classical elitism:
elites are copied through unchanged and exempt from the operators.

Every stochastic decision draws from a generator seeded by (master seed,
restart, generation, slot), so frontiers are identical regardless of how
many workers evaluate fitness.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from . import rng
from .compile import EvaluationError, all_rule_assignment, compile_program
from .ir import ProgramGraph, dfs_order, subtree_nodes
from .render import l2_error_srgb, render_image
from .rules import (MC_SAMPLE_COUNTS, RHO_MODES, RHO_OPS, RULE_KINDS,
                    COMPACT_KERNELS, RuleAssignment, RuleTag)

TUNE_GRID = 64          # fitness renders at 64x64; final reports go larger
INFEASIBLE = (float("inf"), float("inf"))

_STREAM_GA = 0x66       # tuner's own stream tag, distinct from evaluation

# deterministic kind order for all uniform draws
_KINDS = tuple(RULE_KINDS)
_SPANS = ("1", "2", "4", "subtree")


@dataclass
class GAConfig:
    population: int = 40
    generations: int = 20
    restarts: int = 3
    p_crossover: float = 0.4
    elite_fraction: float = 0.25
    p_mutation: float = 0.35
    tournament: int = 4
    seed_crossover_p: float = 0.5

    def __post_init__(self):
        for name in ("p_crossover", "elite_fraction", "p_mutation",
                     "seed_crossover_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.population < 2:
            raise ValueError("population must be at least 2")
        if self.generations < 1 or self.restarts < 1:
            raise ValueError("generations and restarts must be positive")
        if self.tournament < 1:
            raise ValueError("tournament size must be positive")
        if self.elite_count >= self.population:
            raise ValueError("elite fraction leaves no room for offspring")

    @property
    def elite_count(self) -> int:
        return int(self.elite_fraction * self.population)


@dataclass
class Individual:
    assignment: RuleAssignment
    generation: int = 0
    fitness: tuple[float, float] | None = None  # (runtime ms, L2 error)

    @property
    def feasible(self) -> bool:
        return self.fitness is not None and self.fitness != INFEASIBLE


@dataclass(frozen=True)
class ParetoEntry:
    runtime_ms: float
    l2_error: float
    assignment: RuleAssignment
    sigma_scales: dict[str, float] = field(default_factory=dict)
    generation: int = 0
    restart: int = 0

    @property
    def variant_id(self) -> str:
        return variant_id(self.assignment, self.sigma_scales)


def variant_id(assignment: RuleAssignment,
               sigma_scales: dict[str, float] | None = None) -> str:
    """Stable short id of what the variant does: tags plus scale factors.

    Trained rho constants are excluded on purpose; they are a deterministic
    function of the tags and the master seed, and they appear on the
    assignment only after a compile.
    """
    payload = json.dumps([_tags_key(assignment),
                          sorted((sigma_scales or {}).items())])
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def _tags_key(assignment: RuleAssignment) -> list:
    return [(nid, t.kind, t.n, t.rho_mode, t.kernel)
            for nid, t in sorted(assignment.tags.items())]


# ---------------------------------------------------------------------------
# tag drawing and variation operators

def _tag_for(node, kind: str, rand: np.random.Generator) -> RuleTag:
    """One uniformly drawn tag of the given kind, valid for this node."""
    if kind == "mc":
        return RuleTag("mc", n=int(rand.choice(MC_SAMPLE_COUNTS)))
    if kind == "compact":
        return RuleTag("compact", kernel=str(rand.choice(COMPACT_KERNELS)))
    if kind == "adaptive" and (node.op in RHO_OPS or node.op == "select"):
        return RuleTag("adaptive", rho_mode=str(rand.choice(RHO_MODES)))
    return RuleTag(kind)


def _random_assignment(g: ProgramGraph,
                       rand: np.random.Generator) -> RuleAssignment:
    tags = {}
    for node in g.nodes:
        if node.op == "input":
            continue
        tags[node.id] = _tag_for(node, _KINDS[int(rand.integers(len(_KINDS)))],
                                 rand)
    return RuleAssignment(tags)


def _prune_constants(assignment: RuleAssignment,
                     sources: dict[int, RuleAssignment]) -> None:
    """Carry trained rho constants through variation for the nodes whose
    tag still wants them; everything else starts untrained."""
    for nid, tag in assignment.tags.items():
        if tag.rho_mode != "sampled":
            continue
        src = sources.get(nid)
        if src is not None and nid in src.rho_constants \
                and src.tags[nid] == tag:
            assignment.rho_constants[nid] = src.rho_constants[nid]


def mutate(ind: Individual, g: ProgramGraph, rand: np.random.Generator,
           generation: int = 0) -> Individual:
    """Exactly one mutation event: one freshly drawn rule applied to a span
    of 1, 2 or 4 adjacent nodes in depth-first order, or to the whole
    subtree of one node, all span choices equiprobable."""
    order = dfs_order(g)
    kind = _KINDS[int(rand.integers(len(_KINDS)))]
    # the event's rule is drawn once and stamped on every node in the span
    n = int(rand.choice(MC_SAMPLE_COUNTS)) if kind == "mc" else None
    kernel = str(rand.choice(COMPACT_KERNELS)) if kind == "compact" else None
    rho = str(rand.choice(RHO_MODES)) if kind == "adaptive" else None
    span = _SPANS[int(rand.integers(len(_SPANS)))]
    if span == "subtree":
        root = order[int(rand.integers(len(order)))]
        targets = [nid for nid in order if nid in subtree_nodes(g, root)]
    else:
        k = int(rand.integers(len(order)))
        targets = order[k:k + int(span)]
    tags = dict(ind.assignment.tags)
    for nid in targets:
        node = g.nodes[nid]
        ok_rho = rho if (node.op in RHO_OPS or node.op == "select") else None
        tags[nid] = RuleTag(kind, n=n, kernel=kernel,
                            rho_mode=ok_rho if kind == "adaptive" else None)
    child = RuleAssignment(tags)
    _prune_constants(child, {nid: ind.assignment for nid in tags})
    return Individual(child, generation=generation)


def crossover(a: Individual, b: Individual, g: ProgramGraph,
              rand: np.random.Generator, generation: int = 0) -> Individual:
    """Single-point crossover over depth-first node order: positions before
    the point come from a, the rest from b (point 0 reproduces b)."""
    if set(a.assignment.tags) != set(b.assignment.tags):
        raise ValueError("crossover requires assignments over the same "
                         "graph")
    order = dfs_order(g)
    point = int(rand.integers(len(order) + 1))
    tags = {}
    sources = {}
    for pos, nid in enumerate(order):
        parent = a if pos < point else b
        tags[nid] = parent.assignment.tags[nid]
        sources[nid] = parent.assignment
    child = RuleAssignment(tags)
    _prune_constants(child, sources)
    return Individual(child, generation=generation)


def seed_population(g: ProgramGraph, cfg: GAConfig,
                    seed: int = 0) -> list[Individual]:
    """Initial guesses: one all-X assignment per rule kind, pairwise
    uniform crossovers of those at the configured probability, then random
    assignments up to the population size."""
    base = [Individual(all_rule_assignment(g, kind)) for kind in _KINDS]
    pop = list(base)
    rand = np.random.default_rng(int(rng.hash_key(seed, _STREAM_GA, 0)))
    for i in range(len(base)):
        for j in range(i + 1, len(base)):
            tags = {}
            for nid in base[i].assignment.tags:
                pick = base[i] if rand.random() < cfg.seed_crossover_p \
                    else base[j]
                tags[nid] = pick.assignment.tags[nid]
            pop.append(Individual(RuleAssignment(tags)))
    while len(pop) < cfg.population:
        pop.append(Individual(_random_assignment(g, rand)))
    return pop[:cfg.population]


# ---------------------------------------------------------------------------
# fitness

def fitness(ind: Individual, g: ProgramGraph, truth: np.ndarray,
            size: int = TUNE_GRID, seed: int = 0, workers: int = 1,
            memo: dict | None = None) -> tuple[float, float]:
    """(modeled runtime ms, sRGB L2 error) against the ground-truth image.

    Runtime comes from the deterministic cost model so fitness, and with it
    the frontier, is identical across machines and worker counts. Variants
    that cannot be evaluated (singularities, random modulus) are marked
    infeasible and never reach the frontier.
    """
    if ind.fitness is not None:
        return ind.fitness
    key = json.dumps(_tags_key(ind.assignment))
    if memo is not None and key in memo:
        ind.fitness = memo[key]
        return ind.fitness
    try:
        p = compile_program(g, ind.assignment, seed=seed)
        img = render_image(p, size, size, workers=workers)
        result = (p.model_runtime_ms(size, size),
                  l2_error_srgb(img, truth))
    except (EvaluationError, ValueError):
        result = INFEASIBLE
    ind.fitness = result
    if memo is not None:
        memo[key] = result
    return result


def _evaluate_all(pop: list[Individual], g: ProgramGraph, truth: np.ndarray,
                  size: int, seed: int, workers: int, memo: dict) -> None:
    todo = [ind for ind in pop if ind.fitness is None]
    if workers > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda i: fitness(i, g, truth, size, seed,
                                            memo=memo), todo))
    else:
        for ind in todo:
            fitness(ind, g, truth, size, seed, memo=memo)


# ---------------------------------------------------------------------------
# NSGA-style ranking

def _dominates(f1: tuple[float, float], f2: tuple[float, float]) -> bool:
    return (f1[0] <= f2[0] and f1[1] <= f2[1]) and f1 != f2


def _rank_and_crowding(fits: list[tuple[float, float]]) \
        -> tuple[list[int], list[float]]:
    n = len(fits)
    rank = [0] * n
    dominated_by = [0] * n
    dominates_set: list[list[int]] = [[] for _ in range(n)]
    for i in range(n):
        for j in range(n):
            if i != j and _dominates(fits[i], fits[j]):
                dominates_set[i].append(j)
        dominated_by[i] = sum(1 for j in range(n)
                              if j != i and _dominates(fits[j], fits[i]))
    front = [i for i in range(n) if dominated_by[i] == 0]
    level = 0
    fronts = []
    while front:
        fronts.append(front)
        for i in front:
            rank[i] = level
        nxt = []
        for i in front:
            for j in dominates_set[i]:
                dominated_by[j] -= 1
                if dominated_by[j] == 0:
                    nxt.append(j)
        front = sorted(set(nxt))
        level += 1
    crowd = [0.0] * n
    for front in fronts:
        for obj in (0, 1):
            ordered = sorted(front, key=lambda i: fits[i][obj])
            lo, hi = fits[ordered[0]][obj], fits[ordered[-1]][obj]
            crowd[ordered[0]] = crowd[ordered[-1]] = float("inf")
            if hi == lo or not np.isfinite(hi - lo):
                continue
            for k in range(1, len(ordered) - 1):
                gap = fits[ordered[k + 1]][obj] - fits[ordered[k - 1]][obj]
                crowd[ordered[k]] += gap / (hi - lo)
    return rank, crowd


def _tournament(pop: list[Individual], rank: list[int], crowd: list[float],
                size: int, rand: np.random.Generator) -> Individual:
    picks = [int(i) for i in rand.integers(len(pop), size=size)]
    best = min(picks, key=lambda i: (rank[i], -crowd[i], i))
    return pop[best]


# ---------------------------------------------------------------------------
# frontier construction

def pareto_frontier(entries: list[ParetoEntry]) -> list[ParetoEntry]:
    """Mutually non-dominated subset, sorted by runtime with strictly
    decreasing error; duplicate (runtime, error) points keep one entry."""
    ordered = sorted(entries,
                     key=lambda e: (e.runtime_ms, e.l2_error, e.variant_id))
    out: list[ParetoEntry] = []
    best = float("inf")
    for e in ordered:
        if e.l2_error < best:  # also drops duplicate (runtime, error) points
            out.append(e)
            best = e.l2_error
    return out


def evolve(g: ProgramGraph, truth: np.ndarray, cfg: GAConfig | None = None,
           seed: int = 0, size: int = TUNE_GRID,
           workers: int = 1) -> list[ParetoEntry]:
    """Run the GA: per-restart populations, tournament selection (rank then
    crowding), elites copied unchanged, union of restart frontiers with
    dominated entries removed. Deterministic for a given master seed."""
    cfg = cfg or GAConfig()
    memo: dict = {}
    candidates: list[ParetoEntry] = []
    for restart in range(cfg.restarts):
        pop = seed_population(g, cfg,
                              seed=int(rng.hash_key(seed, _STREAM_GA,
                                                    restart, 0xBEEF)))
        _evaluate_all(pop, g, truth, size, seed, workers, memo)
        archive = {_archive_key(ind): ind for ind in pop if ind.feasible}
        for gen in range(1, cfg.generations + 1):
            fits = [ind.fitness for ind in pop]
            rank, crowd = _rank_and_crowding(fits)
            by_quality = sorted(range(len(pop)),
                                key=lambda i: (rank[i], -crowd[i], i))
            elites = [pop[i] for i in by_quality[:cfg.elite_count]]
            children: list[Individual] = []
            for slot in range(cfg.population - len(elites)):
                rand = np.random.default_rng(
                    int(rng.hash_key(seed, _STREAM_GA, restart, gen, slot)))
                parent = _tournament(pop, rank, crowd, cfg.tournament, rand)
                if rand.random() < cfg.p_crossover:
                    other = _tournament(pop, rank, crowd, cfg.tournament,
                                        rand)
                    child = crossover(parent, other, g, rand, generation=gen)
                else:
                    child = replace(parent)  # keeps the fitness cache
                if rand.random() < cfg.p_mutation:
                    child = mutate(child, g, rand, generation=gen)
                children.append(child)
            pop = elites + children
            _evaluate_all(pop, g, truth, size, seed, workers, memo)
            for ind in pop:
                if ind.feasible:
                    archive.setdefault(_archive_key(ind), ind)
        candidates.extend(
            ParetoEntry(runtime_ms=ind.fitness[0], l2_error=ind.fitness[1],
                        assignment=ind.assignment,
                        generation=ind.generation, restart=restart)
            for ind in pareto_individuals(archive.values()))
    return pareto_frontier(candidates)


def _archive_key(ind: Individual) -> str:
    return json.dumps(_tags_key(ind.assignment))


def pareto_individuals(inds) -> list[Individual]:
    inds = sorted(inds, key=lambda i: (i.fitness[0], i.fitness[1],
                                       _archive_key(i)))
    out: list[Individual] = []
    best = float("inf")
    for ind in inds:
        if ind.fitness[1] < best:
            out.append(ind)
            best = ind.fitness[1]
    return out


# ---------------------------------------------------------------------------
# sigma-scale refinement

def sigma_scale_classes(assignment: RuleAssignment) -> list[str]:
    """One multiplicative factor per rule kind present in the assignment."""
    return sorted({t.kind for t in assignment.tags.values()})


def expand_sigma_scales(g: ProgramGraph, assignment: RuleAssignment,
                        class_scales: dict[str, float]) -> dict[int, float]:
    """Tie the per-class factors back to the per-node map compile uses."""
    scales: dict[int, float] = {}
    for node in g.nodes:
        cls = "input" if node.op == "input" \
            else assignment.tags[node.id].kind
        if cls in class_scales:
            scales[node.id] = class_scales[cls]
    return scales


def refine_sigma_scales(entry: ParetoEntry, g: ProgramGraph,
                        truth: np.ndarray, size: int = TUNE_GRID,
                        seed: int = 0, max_iter: int = 200,
                        tol: float = 1e-4) -> ParetoEntry:
    """Nelder-Mead over log scale factors, one per rule class; the refined
    entry is kept only if its error did not get worse."""
    p = compile_program(g, entry.assignment, seed=seed)
    classes = sigma_scale_classes(entry.assignment)

    def err_for(log_factors: np.ndarray) -> float:
        factors = {c: float(np.exp(v)) for c, v in zip(classes, log_factors)}
        try:
            img = render_image(
                p.with_sigma_scales(
                    expand_sigma_scales(g, entry.assignment, factors)),
                size, size)
        except EvaluationError:
            return float("inf")
        return l2_error_srgb(img, truth)

    x0 = np.zeros(len(classes))
    base_err = err_for(x0)
    # scipy's default simplex around an all-zero start is microscopic;
    # open with factor-2 moves per class instead
    simplex = np.zeros((len(classes) + 1, len(classes)))
    for j in range(len(classes)):
        simplex[j + 1, j] = np.log(2.0)
    res = minimize(err_for, x0, method="Nelder-Mead",
                   options={"maxiter": max_iter, "fatol": tol, "xatol": tol,
                            "initial_simplex": simplex})
    if not np.isfinite(res.fun) or res.fun > base_err:
        return entry
    factors = {c: float(np.exp(v)) for c, v in zip(classes, res.x)}
    return replace(entry, sigma_scales=factors, l2_error=float(res.fun))


# ---------------------------------------------------------------------------
# usage statistics

def _kind_percentages(assignment: RuleAssignment) -> dict[str, float]:
    total = len(assignment.tags)
    counts = {kind: 0 for kind in _KINDS}
    for tag in assignment.tags.values():
        counts[tag.kind] += 1
    return {kind: 100.0 * c / total for kind, c in counts.items()}


def rule_usage_stats(frontiers) -> dict:
    """Which rules the frontier actually chose.

    Accepts one frontier (list of entries, sorted by runtime) or a mapping
    of shader name to frontier; in the mapping form each shader contributes
    equally to the aggregate regardless of frontier length.
    """
    if isinstance(frontiers, dict):
        per_shader = {name: rule_usage_stats(f)
                      for name, f in frontiers.items()}
        agg = {kind: float(np.mean([s["aggregate"][kind]
                                    for s in per_shader.values()]))
               for kind in _KINDS}
        return {"shaders": per_shader, "aggregate": agg}
    frontier = list(frontiers)
    if not frontier:
        raise ValueError("usage stats need a non-empty frontier")
    variants = [{"variant_id": e.variant_id, "runtime_ms": e.runtime_ms,
                 "l2_error": e.l2_error,
                 "percent": _kind_percentages(e.assignment)}
                for e in frontier]
    agg = {kind: float(np.mean([v["percent"][kind] for v in variants]))
           for kind in _KINDS}
    return {"variants": variants, "aggregate": agg,
            "fastest": variants[0]["percent"],
            "median": variants[len(variants) // 2]["percent"],
            "slowest": variants[-1]["percent"]}


# ---------------------------------------------------------------------------
# persistence

def save_frontier(frontier: list[ParetoEntry], path) -> None:
    """One JSON object per line, in frontier order."""
    lines = []
    for e in frontier:
        lines.append(json.dumps({
            "variant_id": e.variant_id,
            "runtime_ms": e.runtime_ms,
            "l2_error": e.l2_error,
            "sigma_scales": dict(sorted(e.sigma_scales.items())),
            "generation": e.generation,
            "restart": e.restart,
            "assignment": json.loads(e.assignment.to_json()),
        }, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def load_frontier(path) -> list[ParetoEntry]:
    entries = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        blob = json.loads(line)
        entries.append(ParetoEntry(
            runtime_ms=blob["runtime_ms"], l2_error=blob["l2_error"],
            assignment=RuleAssignment.from_json(
                json.dumps(blob["assignment"])),
            sigma_scales=blob["sigma_scales"],
            generation=blob["generation"], restart=blob["restart"]))
    return entries


def write_frontier_csv(frontier: list[ParetoEntry], path) -> None:
    """The tuner's exchange CSV; floats via repr so identical frontiers
    serialize byte-identically."""
    rows = ["runtime_ms,l2_error,variant_id"]
    rows += [f"{e.runtime_ms!r},{e.l2_error!r},{e.variant_id}"
             for e in frontier]
    Path(path).write_text("\n".join(rows) + "\n")


__all__ = [
    "GAConfig", "Individual", "ParetoEntry", "TUNE_GRID", "variant_id",
    "seed_population", "mutate", "crossover", "fitness", "evolve",
    "pareto_frontier", "refine_sigma_scales", "expand_sigma_scales",
    "sigma_scale_classes", "rule_usage_stats", "save_frontier",
    "load_frontier", "write_frontier_csv",
]
