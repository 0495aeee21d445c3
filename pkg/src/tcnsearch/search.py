"""Two-stage model structure estimation.

Stage 1 evolves network structures (connections plus combining functions).
Evaluating one structure requires stage 2: an inner NSGA-II run per client
that fits connection weights and dynamics parameters by minimizing the
per-concept error of a two-week forecast of the test window. Each client's
per-concept minima over the inner Pareto set are averaged over clients and
handed back to stage 1 as its objective vector.

Stage-2 seeds derive deterministically from (master seed, structure, client
index), so re-evaluating a structure reproduces its objectives exactly, and
parallel evaluation is bit-identical to the serial path. All inner runs for
one structure advance in lockstep so their forecast simulations can share
one vectorized batch.
"""

from __future__ import annotations

import hashlib
import os
import struct
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .baselines import METHODS, baseline_errors
from .ema import ClientSeries, Cohort, SplitSpec, split_client
from .errors import ConfigurationError, ValidationError
from .model import (
    CombiningFunction,
    ModelParameters,
    NetworkStructure,
    SIGMA_MAX,
    SimulationPlan,
    TemporalCausalModel,
    initial_state_from,
    score,
    simulate,
    simulate_batch,
)
from .nsga2 import (
    EvalFailure,
    GaConfig,
    GenerationStats,
    RealVectorEncoding,
    StructureEncoding,
    evolve,
    evolve_lockstep,
)
from .reporting import ReportRow, ValidationReport

CHAMPION_METHOD = "champion"
SIGMA_SEARCH_MIN = 0.1
ETA_SEARCH_MAX = 1.0

_U64 = 0xFFFFFFFFFFFFFFFF


def derive_seed(master_seed: int, structure: NetworkStructure, client_index: int, salt: int = 0) -> int:
    """Deterministic per-(structure, client) seed for stage-2 runs."""
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<QQQ", master_seed & _U64, client_index & _U64, salt & _U64))
    h.update(structure.key())
    return int.from_bytes(h.digest(), "little")


class ParameterLayout:
    """Flat real-vector genome for one structure.

    Gene order: one weight per active edge (row-major), one speed factor per
    concept, one scale per scaled-sum concept, then steepness and threshold
    per simple-logistic concept.
    """

    def __init__(self, structure: NetworkStructure):
        self.structure = structure
        k = structure.k
        edges = structure.edges()
        self.edge_rows = np.array([i for i, _ in edges], dtype=int)
        self.edge_cols = np.array([j for _, j in edges], dtype=int)
        self.sum_concepts = np.array(
            [j for j, c in enumerate(structure.combiners) if c is CombiningFunction.SCALED_SUM],
            dtype=int,
        )
        self.log_concepts = np.array(
            [j for j, c in enumerate(structure.combiners) if c is CombiningFunction.SIMPLE_LOGISTIC],
            dtype=int,
        )
        n_e, n_s, n_l = len(edges), self.sum_concepts.size, self.log_concepts.size
        self._ofs_eta = n_e
        self._ofs_lam = n_e + k
        self._ofs_sigma = self._ofs_lam + n_s
        self._ofs_tau = self._ofs_sigma + n_l
        self.n_genes = self._ofs_tau + n_l
        lower = np.concatenate([
            np.full(n_e, -1.0),
            np.zeros(k),
            np.ones(n_s),
            np.full(n_l, SIGMA_SEARCH_MIN),
            np.zeros(n_l),
        ])
        upper = np.concatenate([
            np.ones(n_e),
            np.full(k, ETA_SEARCH_MAX),
            np.full(n_s, float(k)),
            np.full(n_l, SIGMA_MAX),
            np.ones(n_l),
        ])
        self._encoding = RealVectorEncoding(lower=lower, upper=upper)

    def encoding(self) -> RealVectorEncoding:
        return self._encoding

    def decode_batch(self, genomes: np.ndarray):
        """(P, n_genes) -> weight/eta/lam/sigma/tau arrays for simulate_batch."""
        genomes = np.asarray(genomes, dtype=float)
        p = genomes.shape[0]
        k = self.structure.k
        weights = np.zeros((p, k, k))
        if self.edge_rows.size:
            weights[:, self.edge_rows, self.edge_cols] = genomes[:, : self._ofs_eta]
        eta = genomes[:, self._ofs_eta:self._ofs_lam]
        lam = np.ones((p, k))
        if self.sum_concepts.size:
            lam[:, self.sum_concepts] = genomes[:, self._ofs_lam:self._ofs_sigma]
        sigma = np.ones((p, k))
        tau = np.full((p, k), 0.5)
        if self.log_concepts.size:
            sigma[:, self.log_concepts] = genomes[:, self._ofs_sigma:self._ofs_tau]
            tau[:, self.log_concepts] = genomes[:, self._ofs_tau:]
        return weights, eta, lam, sigma, tau

    def decode(self, genome: np.ndarray) -> ModelParameters:
        w, eta, lam, sigma, tau = self.decode_batch(np.asarray(genome)[None, :])
        return ModelParameters.for_structure(
            self.structure, weights=w[0], eta=eta[0], lam=lam[0], sigma=sigma[0], tau=tau[0]
        )


@dataclass
class StageTwoResult:
    """Per-client outcome of a stage-2 parameter fit.

    ``minima[j]`` is the smallest test error for concept j over the Pareto
    archive (NaN where unscorable) and ``min_source[j]`` the archive index
    that attained it (-1 where unscorable).
    """

    client_id: str
    minima: np.ndarray
    front: list[tuple[ModelParameters, np.ndarray]]
    min_source: np.ndarray


@dataclass
class _ClientContext:
    client_id: str
    initial: np.ndarray
    target: np.ndarray       # (horizon, k) with NaN for unobserved cells
    valid: np.ndarray        # (horizon, k) bool
    counts: np.ndarray       # (k,) observed test days per concept
    unscorable: np.ndarray   # (k,) bool


def _present_counts(series: ClientSeries, k: int) -> np.ndarray:
    counts = np.zeros(k)
    for obs in series.observations:
        for j, v in enumerate(obs.values):
            if v is not None:
                counts[j] += 1
    return counts


def _client_context(
    structure: NetworkStructure, train: ClientSeries, test: ClientSeries, horizon_days: int, k: int
) -> _ClientContext:
    has_parents = structure.adjacency.any(axis=0)
    if not train.observations:
        return _ClientContext(
            client_id=train.client_id,
            initial=np.full(k, 0.5),
            target=np.full((horizon_days, k), np.nan),
            valid=np.zeros((horizon_days, k), dtype=bool),
            counts=np.zeros(k),
            unscorable=np.ones(k, dtype=bool),
        )
    start = train.last_day + 1  # forecasts begin the day after the last training row
    target = test.to_matrix(k, first_day=start, n_days=horizon_days)
    valid = np.isfinite(target)
    counts = valid.sum(axis=0).astype(float)
    train_counts = _present_counts(train, k)
    unscorable = (counts == 0) | (has_parents & (train_counts == 0))
    return _ClientContext(
        client_id=train.client_id,
        initial=initial_state_from(train, k),
        target=target,
        valid=valid,
        counts=counts,
        unscorable=unscorable,
    )


def _make_joint_evaluator(structure, layout, contexts, horizon_days, steps_per_day):
    plan = SimulationPlan(structure)
    k = structure.k
    targets = [np.nan_to_num(ctx.target) for ctx in contexts]

    def joint(batches):
        sizes = [len(b) for b in batches]
        genomes = np.vstack([np.asarray(b, dtype=float) for b in batches])
        weights, eta, lam, sigma, tau = layout.decode_batch(genomes)
        initials = np.vstack(
            [np.tile(ctx.initial, (n, 1)) for ctx, n in zip(contexts, sizes)]
        )
        traj = simulate_batch(
            structure, weights, eta, lam, sigma, tau, initials, horizon_days, steps_per_day, plan
        )
        outs = []
        offset = 0
        for ctx, target0, n in zip(contexts, targets, sizes):
            part = traj[offset:offset + n]
            sq = np.where(ctx.valid[None, :, :], (part - target0[None, :, :]) ** 2, 0.0)
            totals = sq.sum(axis=1)
            mse = np.where(ctx.counts > 0, totals / np.maximum(ctx.counts, 1.0), np.nan)
            mse[:, ctx.unscorable] = np.nan
            outs.append(mse)
            offset += n
        return outs

    return joint


def _front_minima(front_objs: list[np.ndarray], k: int) -> tuple[np.ndarray, np.ndarray]:
    minima = np.full(k, np.nan)
    source = np.full(k, -1, dtype=int)
    if front_objs:
        objs = np.stack(front_objs)
        for j in range(k):
            col = objs[:, j]
            finite = np.flatnonzero(~np.isnan(col))
            if finite.size:
                best = finite[np.argmin(col[finite])]
                minima[j] = col[best]
                source[j] = int(best)
    return minima, source


def _fit_clients(
    structure: NetworkStructure,
    splits: Sequence[tuple[ClientSeries, ClientSeries]],
    cfgs: Sequence[GaConfig],
    horizon_days: int,
    steps_per_day: int,
) -> list[StageTwoResult]:
    """Stage-2 fits for several clients of one structure, run in lockstep."""
    k = structure.k
    layout = ParameterLayout(structure)
    contexts = [_client_context(structure, tr, te, horizon_days, k) for tr, te in splits]
    results: list[StageTwoResult | None] = [None] * len(splits)
    runnable = [i for i, ctx in enumerate(contexts) if not ctx.unscorable.all()]
    for i, ctx in enumerate(contexts):
        if i not in runnable:
            results[i] = StageTwoResult(
                client_id=ctx.client_id,
                minima=np.full(k, np.nan),
                front=[],
                min_source=np.full(k, -1, dtype=int),
            )
    if runnable:
        active = [contexts[i] for i in runnable]
        joint = _make_joint_evaluator(structure, layout, active, horizon_days, steps_per_day)
        outcomes = evolve_lockstep(
            joint,
            layout.encoding(),
            [cfgs[i] for i in runnable],
            n_objectives=k,
            objective_masks=[ctx.unscorable for ctx in active],
        )
        for i, ctx, res in zip(runnable, active, outcomes):
            front = [(layout.decode(m.genome), m.objectives) for m in res.front]
            minima, source = _front_minima([m.objectives for m in res.front], k)
            results[i] = StageTwoResult(
                client_id=ctx.client_id, minima=minima, front=front, min_source=source
            )
    return results  # type: ignore[return-value]


def fit_client_params(
    structure: NetworkStructure,
    client_split: tuple[ClientSeries, ClientSeries],
    cfg: GaConfig,
    horizon_days: int = 14,
    steps_per_day: int = 10,
) -> StageTwoResult:
    """Fit one client's parameters for a fixed structure.

    Candidate parameter vectors are scored by forecasting the test window
    from the end of the training segment; the result carries the Pareto
    archive and each concept's minimal test error over it.
    """
    return _fit_clients(structure, [client_split], [cfg], horizon_days, steps_per_day)[0]


def evaluate_structure(
    structure: NetworkStructure,
    cohort_splits: Sequence[tuple[ClientSeries, ClientSeries]],
    cfg: GaConfig,
    horizon_days: int = 14,
    steps_per_day: int = 10,
) -> np.ndarray:
    """Stage-1 objective vector: per-concept stage-2 minima averaged over the
    clients where the concept is scorable. ``cfg.seed`` acts as the master
    seed; per-client seeds derive from it together with the structure."""
    cfgs = [
        replace(cfg, seed=derive_seed(cfg.seed, structure, i))
        for i in range(len(cohort_splits))
    ]
    results = _fit_clients(structure, cohort_splits, cfgs, horizon_days, steps_per_day)
    k = structure.k
    minima = np.stack([r.minima for r in results]) if results else np.empty((0, k))
    objectives = np.full(k, np.nan)
    for j in range(k):
        col = minima[:, j]
        col = col[~np.isnan(col)]
        if col.size:
            objectives[j] = float(col.mean())
    return objectives


def _structure_objectives_task(args):
    structure, splits, cfg, horizon_days, steps_per_day = args
    return evaluate_structure(structure, splits, cfg, horizon_days, steps_per_day)


@dataclass
class _StructureEvaluator:
    splits: list
    stage2_cfg: GaConfig
    horizon_days: int
    steps_per_day: int
    jobs: int

    def __call__(self, structures):
        if self.jobs <= 1 or len(structures) < 2:
            rows = [
                evaluate_structure(
                    s, self.splits, self.stage2_cfg, self.horizon_days, self.steps_per_day
                )
                for s in structures
            ]
        else:
            args = [
                (s, self.splits, self.stage2_cfg, self.horizon_days, self.steps_per_day)
                for s in structures
            ]
            with ProcessPoolExecutor(max_workers=min(self.jobs, len(structures))) as pool:
                rows = list(pool.map(_structure_objectives_task, args))
        return np.stack(rows)


def resolve_jobs(jobs: int) -> int:
    return jobs if jobs > 0 else (os.cpu_count() or 1)


@dataclass
class StructureCandidate:
    structure: NetworkStructure
    objectives: np.ndarray
    archive: StageTwoResult  # representative stage-2 archive (first usable client)


@dataclass
class StructureSearchResult:
    front: list[StructureCandidate]
    trace: list[GenerationStats]
    failures: list[EvalFailure]
    dropped_clients: list[str]
    objective_mask: np.ndarray
    splits: list[tuple[ClientSeries, ClientSeries, ClientSeries]]


def _run_objective_mask(splits, k: int) -> np.ndarray:
    """Concepts unscorable for the whole run: never observed in any client's
    training data, or never observed in any client's test window."""
    train_any = np.zeros(k, dtype=bool)
    test_any = np.zeros(k, dtype=bool)
    for train, test, _ in splits:
        train_any |= _present_counts(train, k) > 0
        test_any |= _present_counts(test, k) > 0
    return ~(train_any & test_any)


def search_structures(
    cohort: Cohort,
    split_spec: SplitSpec,
    stage1_cfg: GaConfig,
    stage2_cfg: GaConfig,
    horizon_days: int = 14,
    steps_per_day: int = 10,
    jobs: int = 1,
    record_history: bool = False,
) -> StructureSearchResult:
    """Run the outer structure search over a cohort.

    Clients whose series cannot be split are dropped with a warning. Returns
    the final non-dominated structures with their objectives, each carrying a
    representative stage-2 parameter archive refit on the first usable client.
    """
    k = cohort.catalog.k
    usable = []
    dropped = []
    for client in cohort.clients:
        try:
            usable.append(split_client(client, split_spec))
        except ValidationError as exc:
            warnings.warn(f"dropping client: {exc}", stacklevel=2)
            dropped.append(client.client_id)
    if not usable:
        raise ConfigurationError(
            f"no client spans the required {split_spec.total_days} days"
        )
    mask = _run_objective_mask(usable, k)
    if mask.all():
        raise ConfigurationError("no concept is scorable anywhere in the cohort")

    stage2_splits = [(train, test) for train, test, _ in usable]
    evaluator = _StructureEvaluator(
        splits=stage2_splits,
        stage2_cfg=stage2_cfg,
        horizon_days=horizon_days,
        steps_per_day=steps_per_day,
        jobs=resolve_jobs(jobs),
    )
    outcome = evolve(
        evaluator,
        StructureEncoding(k=k),
        stage1_cfg,
        n_objectives=k,
        objective_mask=mask,
        record_history=record_history,
    )
    front = []
    for member in outcome.front:
        cfg0 = replace(stage2_cfg, seed=derive_seed(stage2_cfg.seed, member.genome, 0))
        archive = fit_client_params(
            member.genome, stage2_splits[0], cfg0, horizon_days, steps_per_day
        )
        front.append(StructureCandidate(member.genome, member.objectives, archive))
    return StructureSearchResult(
        front=front,
        trace=outcome.trace,
        failures=outcome.failures,
        dropped_clients=dropped,
        objective_mask=mask,
        splits=usable,
    )


@dataclass(frozen=True)
class ChampionEntry:
    concept_index: int
    structure: NetworkStructure
    objectives: np.ndarray
    archive: StageTwoResult | None


@dataclass(frozen=True)
class ConceptChampionSet:
    """One champion per concept (entries may share a structure); ``None``
    where no front member could be scored, with the reason alongside."""

    entries: tuple[ChampionEntry | None, ...]
    reasons: tuple[str | None, ...]


def select_concept_champions(front: Sequence[StructureCandidate]) -> ConceptChampionSet:
    """Per concept, the front member with the lowest objective; ties break to
    fewer edges, then to the canonical genome ordering."""
    if not front:
        raise ValidationError("cannot select champions from an empty front")
    k = len(front[0].objectives)
    entries: list[ChampionEntry | None] = []
    reasons: list[str | None] = []
    for j in range(k):
        eligible = [c for c in front if not np.isnan(c.objectives[j])]
        if not eligible:
            entries.append(None)
            reasons.append("concept unscorable on every front member")
            continue
        best = min(c.objectives[j] for c in eligible)
        tied = [c for c in eligible if c.objectives[j] == best]
        tied.sort(key=lambda c: (c.structure.n_edges, c.structure.key()))
        chosen = tied[0]
        entries.append(
            ChampionEntry(
                concept_index=j,
                structure=chosen.structure,
                objectives=chosen.objectives,
                archive=chosen.archive,
            )
        )
        reasons.append(None)
    return ConceptChampionSet(entries=tuple(entries), reasons=tuple(reasons))


def _merge_segments(train: ClientSeries, test: ClientSeries) -> ClientSeries:
    return ClientSeries(
        client_id=train.client_id,
        observations=tuple(train.observations) + tuple(test.observations),
    )


def validate_champions(
    champions: ConceptChampionSet,
    splits: Sequence[tuple[ClientSeries, ClientSeries, ClientSeries]],
    concepts: Sequence[str],
    stage2_cfg: GaConfig,
    horizon_days: int = 14,
    steps_per_day: int = 10,
) -> ValidationReport:
    """Score champions and baselines on the held-out validation windows.

    Per champion and client, parameters are refit on train+test (a fresh
    stage-2 run that never sees validation data); the front member with the
    lowest test error in the champion's concept then forecasts the validation
    window from the end of train+test. Baselines are fit on the same data and
    scored on the same windows.
    """
    k = len(concepts)
    if len(champions.entries) != k:
        raise ValidationError("champion set size does not match concept count")
    for train, _, validation in splits:
        if not validation.observations:
            raise ConfigurationError(f"client {train.client_id}: empty validation window")

    unique: dict[bytes, NetworkStructure] = {}
    for entry in champions.entries:
        if entry is not None:
            unique.setdefault(entry.structure.key(), entry.structure)
    refits: dict[bytes, list[StageTwoResult]] = {}
    for key, structure in unique.items():
        cfgs = [
            replace(stage2_cfg, seed=derive_seed(stage2_cfg.seed, structure, i, salt=1))
            for i in range(len(splits))
        ]
        refits[key] = _fit_clients(
            structure, [(tr, te) for tr, te, _ in splits], cfgs, horizon_days, steps_per_day
        )

    champ_errors: list[list[float]] = [[] for _ in range(k)]
    base_errors: dict[str, list[list[float]]] = {m: [[] for _ in range(k)] for m in METHODS}
    for i, (train, test, validation) in enumerate(splits):
        merged = _merge_segments(train, test)
        if not merged.observations:
            continue
        start = merged.last_day + 1
        horizon = min(validation.last_day - start + 1, horizon_days)
        if horizon < 1:
            continue
        for method, errs in baseline_errors(merged, validation, k, horizon_days).items():
            for j in range(k):
                if not np.isnan(errs[j]):
                    base_errors[method][j].append(float(errs[j]))
        initial = initial_state_from(merged, k)
        prediction_cache: dict[tuple[bytes, int], np.ndarray] = {}
        for j, entry in enumerate(champions.entries):
            if entry is None:
                continue
            refit = refits[entry.structure.key()][i]
            if not refit.front:
                continue
            objs = np.stack([o for _, o in refit.front])
            col = objs[:, j]
            finite = np.flatnonzero(~np.isnan(col))
            if not finite.size:
                continue
            member = int(finite[np.argmin(col[finite])])
            cache_key = (entry.structure.key(), member)
            if cache_key not in prediction_cache:
                model = TemporalCausalModel(entry.structure, refit.front[member][0])
                prediction_cache[cache_key] = simulate(model, initial, horizon, steps_per_day)
            err = score(prediction_cache[cache_key], validation, start)[j]
            if not np.isnan(err):
                champ_errors[j].append(float(err))

    rows = []
    for j, concept in enumerate(concepts):
        per_method = {CHAMPION_METHOD: champ_errors[j]}
        per_method.update({m: base_errors[m][j] for m in METHODS})
        for method in (CHAMPION_METHOD, *METHODS):
            vals = per_method[method]
            rows.append(
                ReportRow(
                    concept=concept,
                    method=method,
                    mse_mean=float(np.mean(vals)) if vals else float("nan"),
                    mse_sd=float(np.std(vals)) if vals else float("nan"),
                    n_clients=len(vals),
                )
            )
    return ValidationReport(concepts=tuple(concepts), rows=tuple(rows))
