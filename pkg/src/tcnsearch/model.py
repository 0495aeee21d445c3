"""Temporal-causal network models.

A model is a directed network over K concepts. Each concept j relaxes toward
the combined weighted impact of its parents:

    dY_j/dt = eta_j * (C_j(w_1j * Y_1, ..., w_kj * Y_k) - Y_j)

where the sum runs over parents of j only. Integration is explicit Euler with
a configurable number of steps per day; states are clamped to [0, 1] after
every step, which keeps trajectories bounded even with inhibitory (negative)
weights. Concepts without parents hold their value.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ema import ClientSeries
from .errors import ConfigurationError, ValidationError

FORMAT_VERSION = 1

WEIGHT_MIN, WEIGHT_MAX = -1.0, 1.0
ETA_MAX = 1.0
SIGMA_MAX = 40.0

# Canonical values stored in the slots of concepts whose combiner does not
# use the parameter; keeps equality and persistence well-defined.
LAM_DEFAULT = 1.0
SIGMA_DEFAULT = 1.0
TAU_DEFAULT = 0.5


class CombiningFunction(enum.Enum):
    SCALED_SUM = "scaled_sum"
    PRODUCT = "product"
    MAX = "max"
    MIN = "min"
    SIMPLE_LOGISTIC = "simple_logistic"


COMBINERS = tuple(CombiningFunction)


def combine(
    fn: CombiningFunction,
    impacts,
    *,
    lam: float = LAM_DEFAULT,
    sigma: float = SIGMA_DEFAULT,
    tau: float = TAU_DEFAULT,
) -> float:
    """Aggregate weighted impacts (w_i * Y_i values) into one drive value."""
    impacts = np.asarray(impacts, dtype=float)
    if impacts.size == 0:
        raise ValidationError("combine() requires at least one impact")
    if fn is CombiningFunction.SCALED_SUM:
        return float(np.clip(impacts.sum() / lam, 0.0, 1.0))
    if fn is CombiningFunction.PRODUCT:
        return float(np.prod(impacts))
    if fn is CombiningFunction.MAX:
        return float(impacts.max())
    if fn is CombiningFunction.MIN:
        return float(impacts.min())
    if fn is CombiningFunction.SIMPLE_LOGISTIC:
        arg = np.clip(sigma * (impacts.sum() - tau), -500.0, 500.0)
        return float(1.0 / (1.0 + np.exp(-arg)))
    raise ValidationError(f"unknown combining function {fn!r}")


@dataclass(frozen=True, eq=False)
class NetworkStructure:
    """K x K boolean adjacency (entry [i, j]: i influences j) plus one
    combining function per concept. No self-connections."""

    adjacency: np.ndarray
    combiners: tuple[CombiningFunction, ...]

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=bool)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise ValidationError("adjacency must be a square matrix")
        if adj.shape[0] < 2:
            raise ValidationError("need at least 2 concepts")
        if adj.diagonal().any():
            raise ValidationError("self-connections are not allowed")
        if len(self.combiners) != adj.shape[0]:
            raise ValidationError("one combiner per concept required")
        adj = adj.copy()
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)

    @property
    def k(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_edges(self) -> int:
        return int(self.adjacency.sum())

    def parents(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.adjacency[:, j])

    def edges(self) -> list[tuple[int, int]]:
        """Active edges in row-major (from, to) order."""
        rows, cols = np.nonzero(self.adjacency)
        return list(zip(rows.tolist(), cols.tolist()))

    def key(self) -> bytes:
        """Canonical byte encoding, stable across processes."""
        combo = bytes(COMBINERS.index(c) for c in self.combiners)
        return self.k.to_bytes(4, "little") + np.packbits(self.adjacency).tobytes() + combo

    def __eq__(self, other) -> bool:
        return isinstance(other, NetworkStructure) and self.key() == other.key()

    def __hash__(self) -> int:
        return hash(self.key())


def structure_hash(structure: NetworkStructure) -> int:
    """Stable 64-bit digest of a structure, used for seed derivation."""
    return int.from_bytes(hashlib.blake2b(structure.key(), digest_size=8).digest(), "little")


def structure_from_edges(
    k: int,
    edges,
    combiners=None,
) -> NetworkStructure:
    adj = np.zeros((k, k), dtype=bool)
    for i, j in edges:
        adj[i, j] = True
    if combiners is None:
        combiners = (CombiningFunction.SCALED_SUM,) * k
    return NetworkStructure(adjacency=adj, combiners=tuple(combiners))


@dataclass(frozen=True, eq=False)
class ModelParameters:
    """Connection weights and per-concept dynamics parameters.

    ``weights[i, j]`` is the strength of i -> j and must be zero where the
    structure has no edge. ``lam`` applies to scaled-sum concepts, ``sigma``
    and ``tau`` to simple-logistic ones; unused slots carry the canonical
    defaults.
    """

    weights: np.ndarray
    eta: np.ndarray
    lam: np.ndarray
    sigma: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        for name in ("weights", "eta", "lam", "sigma", "tau"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def for_structure(
        cls,
        structure: NetworkStructure,
        weights,
        eta,
        lam=None,
        sigma=None,
        tau=None,
    ) -> "ModelParameters":
        """Build canonical parameters, zeroing inactive weight entries and
        filling defaults into unused shape-parameter slots."""
        k = structure.k
        w = np.array(weights, dtype=float) * structure.adjacency
        eta = np.array(eta, dtype=float)

        def _fill(values, default, used_mask):
            out = np.full(k, default)
            if values is not None:
                vals = np.array(values, dtype=float)
                out[used_mask] = vals[used_mask]
            return out

        is_sum = np.array([c is CombiningFunction.SCALED_SUM for c in structure.combiners])
        is_log = np.array([c is CombiningFunction.SIMPLE_LOGISTIC for c in structure.combiners])
        return cls(
            weights=w,
            eta=eta,
            lam=_fill(lam, LAM_DEFAULT, is_sum),
            sigma=_fill(sigma, SIGMA_DEFAULT, is_log),
            tau=_fill(tau, TAU_DEFAULT, is_log),
        )

    def validate(self, structure: NetworkStructure, eta_max: float = ETA_MAX) -> None:
        k = structure.k
        if self.weights.shape != (k, k):
            raise ValidationError("weights shape does not match structure")
        if any(arr.shape != (k,) for arr in (self.eta, self.lam, self.sigma, self.tau)):
            raise ValidationError("per-concept parameter arrays must have length K")
        if np.any(self.weights[~structure.adjacency] != 0.0):
            raise ValidationError("weight present on an inactive connection")
        active = self.weights[structure.adjacency]
        if active.size and (active.min() < WEIGHT_MIN or active.max() > WEIGHT_MAX):
            raise ValidationError(f"weights must lie in [{WEIGHT_MIN}, {WEIGHT_MAX}]")
        if np.any(self.eta < 0.0) or np.any(self.eta > eta_max):
            raise ValidationError(f"speed factors must lie in [0, {eta_max}]")
        for j, fn in enumerate(structure.combiners):
            if fn is CombiningFunction.SCALED_SUM and not (1.0 <= self.lam[j] <= k):
                raise ValidationError(f"scale for concept {j} outside [1, {k}]")
            if fn is CombiningFunction.SIMPLE_LOGISTIC:
                if not (0.0 < self.sigma[j] <= SIGMA_MAX):
                    raise ValidationError(f"steepness for concept {j} outside (0, {SIGMA_MAX}]")
                if not (0.0 <= self.tau[j] <= 1.0):
                    raise ValidationError(f"threshold for concept {j} outside [0, 1]")

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelParameters):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("weights", "eta", "lam", "sigma", "tau")
        )


@dataclass(frozen=True)
class TemporalCausalModel:
    structure: NetworkStructure
    params: ModelParameters

    def __post_init__(self):
        self.params.validate(self.structure)

    @property
    def k(self) -> int:
        return self.structure.k


class SimulationPlan:
    """Precomputed per-structure bookkeeping for the batched Euler kernel."""

    def __init__(self, structure: NetworkStructure):
        self.structure = structure
        k = structure.k
        self.has_parents = structure.adjacency.any(axis=0)
        self.sum_like = []  # (j, is_logistic) for scaled-sum / logistic concepts
        self.reduce_like = []  # (j, parent indices, reduction) for product/max/min
        for j in range(k):
            if not self.has_parents[j]:
                continue
            fn = structure.combiners[j]
            if fn is CombiningFunction.SCALED_SUM:
                self.sum_like.append((j, False))
            elif fn is CombiningFunction.SIMPLE_LOGISTIC:
                self.sum_like.append((j, True))
            else:
                red = {CombiningFunction.PRODUCT: np.prod,
                       CombiningFunction.MAX: np.max,
                       CombiningFunction.MIN: np.min}[fn]
                self.reduce_like.append((j, structure.parents(j), red))
        self.sum_cols = np.array([j for j, _ in self.sum_like], dtype=int)
        self.needs_matmul = bool(self.sum_like)


def step_batch(
    plan: SimulationPlan,
    states: np.ndarray,
    weights: np.ndarray,
    eta: np.ndarray,
    lam: np.ndarray,
    sigma: np.ndarray,
    tau: np.ndarray,
    dt: float,
) -> np.ndarray:
    """One Euler step for a batch of P parameterizations of one structure.

    ``states`` is (P, K), ``weights`` is (P, K, K), the rest are (P, K).
    """
    drives = states  # concepts without parents keep their value
    combined = np.empty_like(states)
    if plan.needs_matmul:
        sums = np.matmul(states[:, None, :], weights)[:, 0, :]
    for j, is_logistic in plan.sum_like:
        if is_logistic:
            arg = np.clip(sigma[:, j] * (sums[:, j] - tau[:, j]), -500.0, 500.0)
            combined[:, j] = 1.0 / (1.0 + np.exp(-arg))
        else:
            combined[:, j] = np.clip(sums[:, j] / lam[:, j], 0.0, 1.0)
    for j, parents, reduce_fn in plan.reduce_like:
        impacts = states[:, parents] * weights[:, parents, j]
        combined[:, j] = reduce_fn(impacts, axis=1)
    delta = eta * dt * (combined - states)
    delta[:, ~plan.has_parents] = 0.0
    return np.clip(drives + delta, 0.0, 1.0)


def simulate_batch(
    structure: NetworkStructure,
    weights: np.ndarray,
    eta: np.ndarray,
    lam: np.ndarray,
    sigma: np.ndarray,
    tau: np.ndarray,
    initial: np.ndarray,
    horizon_days: int,
    steps_per_day: int,
    plan: SimulationPlan | None = None,
) -> np.ndarray:
    """Daily trajectories, shape (P, horizon_days, K), for P parameter sets."""
    if horizon_days < 1 or steps_per_day < 1:
        raise ConfigurationError("horizon_days and steps_per_day must be >= 1")
    dt = 1.0 / steps_per_day
    if float(np.max(eta, initial=0.0)) * dt > 1.0 + 1e-12:
        raise ConfigurationError("dt * eta exceeds 1; increase steps_per_day")
    plan = plan or SimulationPlan(structure)
    states = np.array(initial, dtype=float)
    out = np.empty((states.shape[0], horizon_days, states.shape[1]))
    for day in range(horizon_days):
        for _ in range(steps_per_day):
            states = step_batch(plan, states, weights, eta, lam, sigma, tau, dt)
        out[:, day, :] = states
    return out


def _batched(model: TemporalCausalModel):
    p = model.params
    return (p.weights[None], p.eta[None], p.lam[None], p.sigma[None], p.tau[None])


def euler_step(state: np.ndarray, model: TemporalCausalModel, dt: float) -> np.ndarray:
    """Advance one state vector by one Euler step of size ``dt`` (days)."""
    state = np.asarray(state, dtype=float)
    if state.shape != (model.k,):
        raise ValidationError(f"state must have shape ({model.k},)")
    if dt <= 0 or float(model.params.eta.max(initial=0.0)) * dt > 1.0 + 1e-12:
        raise ConfigurationError("need 0 < dt and dt * eta <= 1 for every concept")
    plan = SimulationPlan(model.structure)
    w, eta, lam, sigma, tau = _batched(model)
    return step_batch(plan, state[None], w, eta, lam, sigma, tau, dt)[0]


def simulate(
    model: TemporalCausalModel,
    initial: np.ndarray,
    horizon_days: int,
    steps_per_day: int,
) -> np.ndarray:
    """Daily states for ``horizon_days`` days, shape (horizon_days, K)."""
    initial = np.asarray(initial, dtype=float)
    if initial.shape != (model.k,):
        raise ValidationError(f"initial state must have shape ({model.k},)")
    w, eta, lam, sigma, tau = _batched(model)
    return simulate_batch(
        model.structure, w, eta, lam, sigma, tau, initial[None], horizon_days, steps_per_day
    )[0]


def initial_state_from(series: ClientSeries, k: int) -> np.ndarray:
    """Per-concept starting state: last observed value, else the segment
    mean, else 0.5."""
    state = series.last_observed(k)
    means = series.concept_means(k)
    state = np.where(np.isnan(state), means, state)
    return np.where(np.isnan(state), 0.5, state)


def predict(
    model: TemporalCausalModel,
    train_tail: ClientSeries,
    horizon_days: int,
    steps_per_day: int,
) -> np.ndarray:
    """Forecast the ``horizon_days`` days following the training window."""
    initial = initial_state_from(train_tail, model.k)
    return simulate(model, initial, horizon_days, steps_per_day)


def score(predicted: np.ndarray, observed: ClientSeries, first_day: int) -> np.ndarray:
    """Per-concept MSE of daily predictions against present observations.

    ``predicted[i]`` is taken to be the state on day ``first_day + i``.
    Concepts with no present observation in the window come back as NaN
    (unscorable).
    """
    predicted = np.asarray(predicted, dtype=float)
    h, k = predicted.shape
    sq_sums = np.zeros(k)
    counts = np.zeros(k)
    for obs in observed.observations:
        idx = obs.day - first_day
        if 0 <= idx < h:
            for j, v in enumerate(obs.values):
                if v is not None:
                    sq_sums[j] += (predicted[idx, j] - v) ** 2
                    counts[j] += 1
    with np.errstate(invalid="ignore"):
        return np.where(counts > 0, sq_sums / np.maximum(counts, 1), np.nan)


def export_dot(
    structure: NetworkStructure,
    names,
    params: ModelParameters | None = None,
) -> str:
    """Graphviz DOT text for a structure, optionally labeling edges with
    weights at 3 decimals. Node and edge order is deterministic."""
    if len(names) != structure.k:
        raise ValidationError("one name per concept required")
    lines = ["digraph network {", "  rankdir=LR;"]
    for name in names:
        lines.append(f'  "{name}";')
    for i, j in structure.edges():
        if params is not None:
            lines.append(f'  "{names[i]}" -> "{names[j]}" [label="{params.weights[i, j]:.3f}"];')
        else:
            lines.append(f'  "{names[i]}" -> "{names[j]}";')
    lines.append("}")
    return "\n".join(lines) + "\n"


def model_to_document(model: TemporalCausalModel, names) -> dict:
    """JSON-compatible document holding names, structure, and parameters at
    full precision."""
    if len(names) != model.k:
        raise ValidationError("one name per concept required")
    s, p = model.structure, model.params
    used_lam = [c is CombiningFunction.SCALED_SUM for c in s.combiners]
    used_log = [c is CombiningFunction.SIMPLE_LOGISTIC for c in s.combiners]
    return {
        "format_version": FORMAT_VERSION,
        "concepts": list(names),
        "adjacency": s.adjacency.astype(int).tolist(),
        "combiners": [c.value for c in s.combiners],
        "weights": [[float(v) for v in row] for row in p.weights],
        "eta": [float(v) for v in p.eta],
        "lam": [float(p.lam[j]) if used_lam[j] else None for j in range(model.k)],
        "sigma": [float(p.sigma[j]) if used_log[j] else None for j in range(model.k)],
        "tau": [float(p.tau[j]) if used_log[j] else None for j in range(model.k)],
    }


def model_from_document(doc: dict) -> tuple[TemporalCausalModel, tuple[str, ...]]:
    try:
        version = doc["format_version"]
        if version != FORMAT_VERSION:
            raise ValidationError(f"unsupported format_version {version!r}")
        names = tuple(doc["concepts"])
        structure = NetworkStructure(
            adjacency=np.array(doc["adjacency"], dtype=bool),
            combiners=tuple(CombiningFunction(c) for c in doc["combiners"]),
        )
        params = ModelParameters.for_structure(
            structure,
            weights=np.array(doc["weights"], dtype=float),
            eta=np.array(doc["eta"], dtype=float),
            lam=np.array([LAM_DEFAULT if v is None else v for v in doc["lam"]]),
            sigma=np.array([SIGMA_DEFAULT if v is None else v for v in doc["sigma"]]),
            tau=np.array([TAU_DEFAULT if v is None else v for v in doc["tau"]]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise ValidationError(f"malformed model document: {exc}") from exc
    return TemporalCausalModel(structure=structure, params=params), names


def save_model(model: TemporalCausalModel, names, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_document(model, names), indent=2, sort_keys=True) + "\n")


def load_model(path: str | Path) -> tuple[TemporalCausalModel, tuple[str, ...]]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed model document {path}: {exc}") from exc
    return model_from_document(doc)


# Built-in seven-concept example network used by the synthetic-data command.
# Edges follow the commonly drawn EMA interaction pattern (13 connections);
# weights and speeds are chosen so cohorts show slow multi-week drift.
_EXAMPLE_EDGES = {
    (1, 0): -0.5,  # Worry -> Mood
    (5, 0): 0.9,   # Enjoyed activities -> Mood
    (2, 1): -0.6,  # Self-Esteem -> Worry
    (6, 1): 0.4,   # Social contact -> Worry
    (6, 2): 0.7,   # Social contact -> Self-Esteem
    (4, 2): 0.4,   # Activities done -> Self-Esteem
    (0, 3): 0.8,   # Mood -> Sleep
    (1, 3): -0.5,  # Worry -> Sleep
    (6, 4): 0.9,   # Social contact -> Activities done
    (0, 5): 0.5,   # Mood -> Enjoyed activities
    (3, 5): 0.5,   # Sleep -> Enjoyed activities
    (3, 6): 0.5,   # Sleep -> Social contact
    (2, 6): 0.5,   # Self-Esteem -> Social contact
}

_EXAMPLE_ETA = (0.15, 0.12, 0.10, 0.18, 0.14, 0.16, 0.11)


def builtin_example_model() -> TemporalCausalModel:
    """Known ground-truth model over the default seven concepts."""
    structure = structure_from_edges(7, _EXAMPLE_EDGES.keys())
    weights = np.zeros((7, 7))
    for (i, j), w in _EXAMPLE_EDGES.items():
        weights[i, j] = w
    params = ModelParameters.for_structure(structure, weights=weights, eta=np.array(_EXAMPLE_ETA))
    return TemporalCausalModel(structure=structure, params=params)
