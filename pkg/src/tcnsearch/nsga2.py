"""Elitist multi-objective genetic engine (NSGA-II).

Minimization throughout. Two genome encodings are provided: bounded real
vectors (simulated binary crossover + polynomial mutation) and network
structures (rectangular block-swap crossover on the adjacency matrix plus
bit-flip / combiner-redraw mutation).

Randomness is fully deterministic: every variation event draws from an
independent stream derived from (seed, generation, slot), so results do not
depend on evaluation order or parallelism. Evaluators must be pure and draw
no randomness of their own.

Objective vectors may carry NaN in dimensions that are unscorable for the
whole run; the mask must be identical across individuals. A NaN outside the
mask marks the individual as failed: it receives +inf objectives and is
reported in the result, rather than aborting the run.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .errors import ConfigurationError, ValidationError
from .model import COMBINERS, NetworkStructure

_U64 = 0xFFFFFFFFFFFFFFFF
_BIG = 1e300  # stand-in for +/-inf when computing crowding gaps


@dataclass(frozen=True)
class GaConfig:
    """Hyperparameters for one evolutionary run.

    ``mutation_rate`` and ``bit_flip_rate`` default (None) to 1/genome_length
    and 2/K**2 respectively. ``block_swap_rate`` is the probability that a
    structure crossover event actually swaps an adjacency block.
    """

    population_size: int = 20
    generations: int = 25
    crossover_rate: float = 0.9
    mutation_rate: float | None = None
    sbx_eta: float = 15.0
    polynomial_eta: float = 20.0
    block_swap_rate: float = 1.0
    bit_flip_rate: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.population_size < 4 or self.population_size % 2:
            raise ValidationError("population_size must be an even count >= 4")
        if self.generations < 1:
            raise ValidationError("generations must be >= 1")
        for name in ("crossover_rate", "block_swap_rate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"{name} must be in [0, 1]")
        for name in ("mutation_rate", "bit_flip_rate"):
            v = getattr(self, name)
            if v is not None and not (0.0 <= v <= 1.0):
                raise ValidationError(f"{name} must be in [0, 1]")
        if self.sbx_eta <= 0 or self.polynomial_eta <= 0:
            raise ValidationError("distribution indices must be positive")


@dataclass
class Individual:
    genome: Any
    objectives: np.ndarray
    rank: int = 0
    crowding: float = 0.0


@dataclass(frozen=True)
class FrontMember:
    genome: Any
    objectives: np.ndarray


@dataclass(frozen=True)
class GenerationStats:
    generation: int
    best: np.ndarray
    median: np.ndarray


@dataclass(frozen=True)
class EvalFailure:
    generation: int
    slot: int
    message: str


@dataclass
class EvolutionResult:
    population: list[Individual]
    front: list[FrontMember]
    trace: list[GenerationStats]
    failures: list[EvalFailure]
    front_history: list[list[FrontMember]] | None = None
    population_history: list[list[Individual]] | None = None


# ---------------------------------------------------------------------------
# dominance, sorting, crowding


def _valid_columns(objs: np.ndarray) -> np.ndarray:
    """Columns usable for comparison; NaN pattern must agree across rows."""
    nan = np.isnan(objs)
    if nan.size and np.any(nan != nan[0]):
        raise ValidationError("inconsistent unscorable pattern across objective vectors")
    return ~nan[0] if len(objs) else np.ones(objs.shape[1], dtype=bool)


def dominates(a, b) -> bool:
    """True iff a is no worse than b everywhere and strictly better somewhere."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError("objective vectors must be 1-D and of equal length")
    valid = _valid_columns(np.stack([a, b]))
    if not valid.any():
        return False
    av, bv = a[valid], b[valid]
    return bool(np.all(av <= bv) and np.any(av < bv))


def _dominance_matrix(objs: np.ndarray) -> np.ndarray:
    le = np.all(objs[:, None, :] <= objs[None, :, :], axis=-1)
    lt = np.any(objs[:, None, :] < objs[None, :, :], axis=-1)
    return le & lt


def fast_nondominated_sort(objectives) -> list[list[int]]:
    """Partition indices into fronts: front 0 is non-dominated, front i+1 is
    non-dominated once fronts <= i are removed."""
    objs = np.asarray(objectives, dtype=float)
    n = len(objs)
    if n == 0:
        return []
    valid = _valid_columns(objs)
    if not valid.any():
        return [list(range(n))]
    dom = _dominance_matrix(objs[:, valid])
    counts = dom.sum(axis=0).astype(np.int64)
    assigned = np.zeros(n, dtype=bool)
    fronts: list[list[int]] = []
    while not assigned.all():
        current = np.flatnonzero(~assigned & (counts == 0))
        fronts.append(current.tolist())
        assigned[current] = True
        counts = counts - dom[current].sum(axis=0)
    return fronts


def crowding_distance(front_objectives) -> np.ndarray:
    """Diversity measure within one front: boundary members per objective get
    +inf, interior members the sum of normalized neighbor gaps. Fronts of
    size <= 2 are all +inf."""
    objs = np.asarray(front_objectives, dtype=float)
    n = len(objs)
    if n == 0:
        raise ValidationError("crowding_distance requires a non-empty front")
    if n <= 2:
        return np.full(n, np.inf)
    valid = _valid_columns(objs)
    dist = np.zeros(n)
    for j in np.flatnonzero(valid):
        col = np.clip(objs[:, j], -_BIG, _BIG)
        order = np.argsort(col, kind="stable")
        dist[order[0]] = dist[order[-1]] = np.inf
        span = col[order[-1]] - col[order[0]]
        if span <= 0.0:
            continue
        gaps = (col[order[2:]] - col[order[:-2]]) / span
        dist[order[1:-1]] += gaps
    return dist


def tournament_select(population: Sequence[Individual], rng: np.random.Generator) -> int:
    """Binary tournament: lower rank wins, then larger crowding, then coin flip."""
    n = len(population)
    i, j = rng.integers(0, n, size=2)
    a, b = population[i], population[j]
    if a.rank != b.rank:
        return int(i if a.rank < b.rank else j)
    if a.crowding != b.crowding:
        return int(i if a.crowding > b.crowding else j)
    return int(i if rng.random() < 0.5 else j)


# ---------------------------------------------------------------------------
# variation operators


def real_crossover_mutate(
    a: np.ndarray,
    b: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    cfg: GaConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """SBX per gene at ``crossover_rate``, then polynomial mutation per gene
    at ``mutation_rate``; children clamped to bounds."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValidationError("parents must have matching genome lengths")
    n = a.size
    c1, c2 = a.copy(), b.copy()
    if n == 0:
        return c1, c2
    cross = rng.random(n) < cfg.crossover_rate
    u = rng.random(n)
    with np.errstate(divide="ignore"):
        beta = np.where(
            u <= 0.5,
            (2.0 * u) ** (1.0 / (cfg.sbx_eta + 1.0)),
            (1.0 / (2.0 * (1.0 - u))) ** (1.0 / (cfg.sbx_eta + 1.0)),
        )
    x1 = 0.5 * ((1.0 + beta) * a + (1.0 - beta) * b)
    x2 = 0.5 * ((1.0 - beta) * a + (1.0 + beta) * b)
    c1[cross] = x1[cross]
    c2[cross] = x2[cross]

    m_rate = cfg.mutation_rate if cfg.mutation_rate is not None else 1.0 / n
    span = upper - lower
    for child in (c1, c2):
        mutate = rng.random(n) < m_rate
        r = rng.random(n)
        delta = np.where(
            r < 0.5,
            (2.0 * r) ** (1.0 / (cfg.polynomial_eta + 1.0)) - 1.0,
            1.0 - (2.0 * (1.0 - r)) ** (1.0 / (cfg.polynomial_eta + 1.0)),
        )
        child[mutate] += (delta * span)[mutate]
        np.clip(child, lower, upper, out=child)
    np.clip(c1, lower, upper, out=c1)
    np.clip(c2, lower, upper, out=c2)
    return c1, c2


def swap_block(
    adj_a: np.ndarray, adj_b: np.ndarray, rows: slice, cols: slice
) -> tuple[np.ndarray, np.ndarray]:
    """Exchange an axis-aligned adjacency sub-block between two matrices."""
    a, b = adj_a.copy(), adj_b.copy()
    a[rows, cols], b[rows, cols] = adj_b[rows, cols].copy(), adj_a[rows, cols].copy()
    return a, b


def matrix_crossover_mutate(
    a: NetworkStructure,
    b: NetworkStructure,
    cfg: GaConfig,
    rng: np.random.Generator,
) -> tuple[NetworkStructure, NetworkStructure]:
    """Two-dimensional crossover for structure genomes.

    A crossover event (probability ``crossover_rate``) swaps a uniformly
    chosen rectangular adjacency block between the parents (gated by
    ``block_swap_rate``) and exchanges each concept's combiner with
    probability 0.5. Mutation then flips each off-diagonal connection bit
    with ``bit_flip_rate`` and redraws each combiner uniformly with
    ``mutation_rate``. The diagonal stays off.
    """
    if a.k != b.k:
        raise ValidationError("parents must have the same concept count")
    k = a.k
    adj_a, adj_b = a.adjacency.copy(), b.adjacency.copy()
    comb_a, comb_b = list(a.combiners), list(b.combiners)

    if rng.random() < cfg.crossover_rate:
        if rng.random() < cfg.block_swap_rate:
            r0 = int(rng.integers(0, k))
            r1 = int(rng.integers(r0, k))
            c0 = int(rng.integers(0, k))
            c1 = int(rng.integers(c0, k))
            adj_a, adj_b = swap_block(adj_a, adj_b, slice(r0, r1 + 1), slice(c0, c1 + 1))
        swap = rng.random(k) < 0.5
        for j in np.flatnonzero(swap):
            comb_a[j], comb_b[j] = comb_b[j], comb_a[j]

    flip_rate = cfg.bit_flip_rate if cfg.bit_flip_rate is not None else 2.0 / k**2
    redraw_rate = cfg.mutation_rate if cfg.mutation_rate is not None else 1.0 / k**2
    children = []
    for adj, comb in ((adj_a, comb_a), (adj_b, comb_b)):
        flips = rng.random((k, k)) < flip_rate
        adj = adj ^ flips
        np.fill_diagonal(adj, False)
        redraw = rng.random(k) < redraw_rate
        picks = rng.integers(0, len(COMBINERS), size=k)
        for j in np.flatnonzero(redraw):
            comb[j] = COMBINERS[picks[j]]
        children.append(NetworkStructure(adjacency=adj, combiners=tuple(comb)))
    return children[0], children[1]


# ---------------------------------------------------------------------------
# encodings


@dataclass(frozen=True)
class RealVectorEncoding:
    """Bounded real genome; one (lower, upper) pair per gene."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValidationError("bounds must be 1-D arrays of equal length")
        if np.any(lo > hi):
            raise ValidationError("lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def n_genes(self) -> int:
        return self.lower.size

    def random_genome(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lower, self.upper)

    def crossover_mutate(self, a, b, cfg: GaConfig, rng: np.random.Generator):
        return real_crossover_mutate(a, b, self.lower, self.upper, cfg, rng)

    def check_genome(self, genome: np.ndarray) -> bool:
        return bool(np.all(genome >= self.lower) and np.all(genome <= self.upper))

    def genome_key(self, genome: np.ndarray) -> bytes:
        return np.asarray(genome, dtype=float).tobytes()


@dataclass(frozen=True)
class StructureEncoding:
    """Network-structure genome over k concepts."""

    k: int
    init_edge_prob: float = 0.25

    def __post_init__(self):
        if self.k < 2:
            raise ValidationError("need at least 2 concepts")
        if not (0.0 <= self.init_edge_prob <= 1.0):
            raise ValidationError("init_edge_prob must be in [0, 1]")

    def random_genome(self, rng: np.random.Generator) -> NetworkStructure:
        adj = rng.random((self.k, self.k)) < self.init_edge_prob
        np.fill_diagonal(adj, False)
        combiners = tuple(COMBINERS[i] for i in rng.integers(0, len(COMBINERS), size=self.k))
        return NetworkStructure(adjacency=adj, combiners=combiners)

    def crossover_mutate(self, a, b, cfg: GaConfig, rng: np.random.Generator):
        return matrix_crossover_mutate(a, b, cfg, rng)

    def check_genome(self, genome: NetworkStructure) -> bool:
        return genome.k == self.k and not genome.adjacency.diagonal().any()

    def genome_key(self, genome: NetworkStructure) -> bytes:
        return genome.key()


# ---------------------------------------------------------------------------
# the generational engine


def _generation_base(seed: int, generation: int) -> np.random.Philox:
    key = np.random.SeedSequence((seed & _U64, generation)).generate_state(2, np.uint64)
    return np.random.Philox(key=key)


def _slot_rng(base: np.random.Philox, slot: int) -> np.random.Generator:
    return np.random.Generator(base.jumped(slot))


class _Instance:
    """One independent evolutionary run inside a (possibly) lockstep batch."""

    def __init__(self, cfg: GaConfig, mask: np.ndarray | None, n_objectives: int):
        self.cfg = cfg
        self.mask = mask
        self.m = n_objectives
        self.population: list[Individual] = []
        self.archive: dict[bytes, FrontMember] = {}
        self.trace: list[GenerationStats] = []
        self.failures: list[EvalFailure] = []
        self.front_history: list[list[FrontMember]] = []
        self.population_history: list[list[Individual]] = []

    def sanitize(self, objs: np.ndarray, generation: int) -> np.ndarray:
        objs = np.array(objs, dtype=float)
        if objs.shape != (objs.shape[0], self.m):
            raise ConfigurationError(
                f"evaluator returned shape {objs.shape}, expected (n, {self.m})"
            )
        if self.mask is not None:
            objs[:, self.mask] = np.nan
            valid = ~self.mask
        else:
            valid = np.ones(self.m, dtype=bool)
        bad = np.isnan(objs[:, valid]).any(axis=1)
        for idx in np.flatnonzero(bad):
            objs[idx, valid] = np.inf
            self.failures.append(EvalFailure(generation, int(idx), "non-finite objective"))
        return objs


def _rank_and_crowd(population: list[Individual]) -> None:
    objs = np.stack([ind.objectives for ind in population])
    for rank, front in enumerate(fast_nondominated_sort(objs)):
        crowd = crowding_distance(objs[front])
        for pos, idx in enumerate(front):
            population[idx].rank = rank
            population[idx].crowding = float(crowd[pos])


def _environmental_selection(merged: list[Individual], size: int) -> list[Individual]:
    objs = np.stack([ind.objectives for ind in merged])
    chosen: list[Individual] = []
    for rank, front in enumerate(fast_nondominated_sort(objs)):
        crowd = crowding_distance(objs[front])
        for pos, idx in enumerate(front):
            merged[idx].rank = rank
            merged[idx].crowding = float(crowd[pos])
        if len(chosen) + len(front) <= size:
            chosen.extend(merged[i] for i in front)
        else:
            order = np.argsort(-crowd, kind="stable")
            need = size - len(chosen)
            chosen.extend(merged[front[i]] for i in order[:need])
        if len(chosen) >= size:
            break
    return chosen


def _update_archive(inst: _Instance, encoding, merged: list[Individual]) -> None:
    objs = np.stack([ind.objectives for ind in merged])
    front0 = fast_nondominated_sort(objs)[0]
    for idx in front0:
        key = encoding.genome_key(merged[idx].genome)
        if key not in inst.archive:
            inst.archive[key] = FrontMember(merged[idx].genome, merged[idx].objectives.copy())
    members = list(inst.archive.items())
    arch_objs = np.stack([m.objectives for _, m in members])
    keep = fast_nondominated_sort(arch_objs)[0]
    keep_set = set(keep)
    inst.archive = {members[i][0]: members[i][1] for i in range(len(members)) if i in keep_set}


def _record(inst: _Instance, generation: int, record_history: bool) -> None:
    objs = np.stack([ind.objectives for ind in inst.population])
    best = np.full(inst.m, np.nan)
    median = np.full(inst.m, np.nan)
    for j in range(inst.m):
        col = objs[:, j]
        col = col[~np.isnan(col)]
        if col.size:
            best[j] = col.min()
            median[j] = float(np.median(col))
    inst.trace.append(GenerationStats(generation, best, median))
    if record_history:
        inst.front_history.append(list(inst.archive.values()))
        inst.population_history.append(
            [Individual(i.genome, i.objectives.copy(), i.rank, i.crowding) for i in inst.population]
        )


def _call_joint(evaluate_joint, batches, instances, generation):
    try:
        outs = evaluate_joint([list(b) for b in batches])
        return [np.array(o, dtype=float) for o in outs]
    except Exception:
        pass
    outs = []
    for inst, batch in zip(instances, batches):
        try:
            outs.append(np.array(evaluate_joint([list(batch)])[0], dtype=float))
            continue
        except Exception:
            rows = np.full((len(batch), inst.m), np.inf)
            for slot, genome in enumerate(batch):
                try:
                    rows[slot] = np.array(evaluate_joint([[genome]])[0], dtype=float)[0]
                except Exception as exc:
                    inst.failures.append(EvalFailure(generation, slot, repr(exc)))
            outs.append(rows)
    return outs


def evolve_lockstep(
    evaluate_joint: Callable[[list[list[Any]]], Sequence[np.ndarray]],
    encoding,
    cfgs: Sequence[GaConfig],
    n_objectives: int,
    objective_masks: Sequence[np.ndarray | None] | None = None,
    record_history: bool = False,
) -> list[EvolutionResult]:
    """Run several independent NSGA-II instances generation-synchronized.

    All offspring of a generation, across instances, are evaluated in one
    call to ``evaluate_joint`` (a list of genome batches, one per instance,
    returning one (n, n_objectives) array per instance). Results are
    identical to running each instance alone with its own config.
    """
    if not cfgs:
        raise ConfigurationError("need at least one instance")
    generations = cfgs[0].generations
    if any(c.generations != generations for c in cfgs):
        raise ConfigurationError("lockstep instances must share the generation count")
    if objective_masks is None:
        objective_masks = [None] * len(cfgs)
    instances = []
    for cfg, mask in zip(cfgs, objective_masks):
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if mask.all():
                raise ConfigurationError("all objectives are masked out")
        instances.append(_Instance(cfg, mask, n_objectives))

    # initial populations (generation 0 streams)
    batches = []
    for inst in instances:
        base = _generation_base(inst.cfg.seed, 0)
        batches.append(
            [encoding.random_genome(_slot_rng(base, s)) for s in range(inst.cfg.population_size)]
        )
    outs = _call_joint(evaluate_joint, batches, instances, 0)
    for inst, genomes, objs in zip(instances, batches, outs):
        objs = inst.sanitize(objs, 0)
        inst.population = [Individual(g, objs[i]) for i, g in enumerate(genomes)]
        _rank_and_crowd(inst.population)
        _update_archive(inst, encoding, inst.population)
        if record_history:
            inst.front_history.append(list(inst.archive.values()))
            inst.population_history.append(
                [Individual(i.genome, i.objectives.copy(), i.rank, i.crowding)
                 for i in inst.population]
            )

    for generation in range(1, generations + 1):
        batches = []
        for inst in instances:
            base = _generation_base(inst.cfg.seed, generation)
            offspring = []
            for slot in range(inst.cfg.population_size // 2):
                rng = _slot_rng(base, slot)
                p1 = inst.population[tournament_select(inst.population, rng)].genome
                p2 = inst.population[tournament_select(inst.population, rng)].genome
                c1, c2 = encoding.crossover_mutate(p1, p2, inst.cfg, rng)
                offspring.append(c1)
                offspring.append(c2)
            batches.append(offspring)
        outs = _call_joint(evaluate_joint, batches, instances, generation)
        for inst, offspring, objs in zip(instances, batches, outs):
            objs = inst.sanitize(objs, generation)
            merged = inst.population + [Individual(g, objs[i]) for i, g in enumerate(offspring)]
            inst.population = _environmental_selection(merged, inst.cfg.population_size)
            _update_archive(inst, encoding, merged)
            _record(inst, generation, record_history)

    results = []
    for inst in instances:
        results.append(
            EvolutionResult(
                population=inst.population,
                front=list(inst.archive.values()),
                trace=inst.trace,
                failures=inst.failures,
                front_history=inst.front_history if record_history else None,
                population_history=inst.population_history if record_history else None,
            )
        )
    return results


def evolve(
    evaluate: Callable[[list[Any]], Any],
    encoding,
    cfg: GaConfig,
    n_objectives: int,
    objective_mask: np.ndarray | None = None,
    record_history: bool = False,
) -> EvolutionResult:
    """Standard generational NSGA-II over one problem.

    ``evaluate`` maps a list of genomes to an (n, n_objectives) array; it
    must be pure. The returned front is the accumulated non-dominated archive
    over the whole run (it always covers the final population's front 0).
    """

    def joint(batches):
        return [evaluate(batches[0])]

    return evolve_lockstep(
        joint, encoding, [cfg], n_objectives, [objective_mask], record_history
    )[0]
