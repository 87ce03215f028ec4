"""Feature attribution for trained Q-networks via Kernel SHAP.

Coalitions are drawn with the Shapley kernel; masked features are imputed
from a background sample of real states (interventional convention).  The
weighted regression enforces the efficiency constraint exactly, so local
accuracy (base + sum(phi) = f(x)) holds by construction.  A brute-force
enumeration oracle is included for small player counts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Sequence

import numpy as np

from .schema import FeatureSchema

__all__ = [
    "AttributionReport",
    "BackgroundSet",
    "ShapValues",
    "attribute_sessions",
    "exact_shap",
    "kernel_shap",
    "sample_background",
    "shapley_kernel_weight",
]

EXACT_SHAP_MAX_PLAYERS = 12


@dataclass(frozen=True)
class ShapValues:
    """Additive attribution: f(x) ~= base_value + phi.sum()."""

    phi: np.ndarray
    base_value: float
    fx: float

    @property
    def local_accuracy_error(self) -> float:
        return abs(self.base_value + float(self.phi.sum()) - self.fx)


@dataclass
class BackgroundSet:
    """Reference states used to impute masked features."""

    states: np.ndarray
    seed: int
    schema_fingerprint: str | None = None

    def __post_init__(self):
        if self.states.ndim != 2 or self.states.shape[0] == 0:
            raise ValueError("background must be a non-empty 2-D array")


def sample_background(sessions: Sequence, encoder, size: int = 100,
                      seed: int = 0) -> BackgroundSet:
    """Uniform sample of encoded records to serve as the background."""
    from .schema import encode_records
    schema = getattr(encoder, "schema_", encoder)
    states = np.concatenate(
        [encode_records(s.records, schema) for s in sessions], axis=0)
    if states.shape[0] > size:
        idx = np.random.default_rng(seed).choice(states.shape[0], size=size,
                                                 replace=False)
        states = states[idx]
    return BackgroundSet(states, seed, schema.fingerprint())


def shapley_kernel_weight(n_players: int, coalition_size: int) -> float:
    """pi(s) = (M-1) / (C(M,s) * s * (M-s)); infinite ends are excluded."""
    m, s = n_players, coalition_size
    if not 0 < s < m:
        raise ValueError("coalition size must be strictly between 0 and M")
    return (m - 1) / (math.comb(m, s) * s * (m - s))


def _size_mass(m: int, s: int) -> float:
    # total kernel weight carried by all coalitions of one size
    return (m - 1) / (s * (m - s))


def _coalition_design(m: int, n_samples: int, rng: np.random.Generator):
    """Binary coalition matrix Z and regression weights.

    Sizes are enumerated exhaustively from the outside in (paired s and
    M-s) while the budget allows; leftover budget is spent sampling the
    remaining sizes proportionally to their kernel mass, with duplicate
    coalitions collapsed into counts.
    """
    rows: list[np.ndarray] = []
    weights: list[float] = []
    budget = n_samples
    remaining: list[int] = []
    half = m // 2
    for s in range(1, half + 1):
        sizes = (s,) if s == m - s else (s, m - s)
        count = math.comb(m, s) * len(sizes)
        if count <= budget:
            for size in sizes:
                w = shapley_kernel_weight(m, size)
                for members in combinations(range(m), size):
                    z = np.zeros(m, dtype=bool)
                    z[list(members)] = True
                    rows.append(z)
                    weights.append(w)
            budget -= count
        else:
            remaining.extend(sizes)
    if remaining and budget > 0:
        mass = np.array([_size_mass(m, s) for s in remaining])
        picks = rng.choice(len(remaining), size=budget, p=mass / mass.sum())
        counts: dict[tuple[int, ...], int] = {}
        for k in picks:
            size = remaining[int(k)]
            members = tuple(sorted(rng.choice(m, size=size, replace=False).tolist()))
            counts[members] = counts.get(members, 0) + 1
        total_mass = float(mass.sum())
        for members, count in counts.items():
            z = np.zeros(m, dtype=bool)
            z[list(members)] = True
            rows.append(z)
            weights.append(total_mass * count / budget)
    return np.array(rows), np.array(weights)


def _player_columns(width: int, groups) -> list[np.ndarray]:
    if groups is None:
        return [np.array([j]) for j in range(width)]
    cols = [np.asarray(g, dtype=int).ravel() for g in groups]
    seen = np.concatenate(cols) if cols else np.array([], dtype=int)
    if len(cols) < 2:
        raise ValueError("need at least 2 players")
    if len(np.unique(seen)) != seen.size or seen.size and (seen.max() >= width or seen.min() < 0):
        raise ValueError("groups must be disjoint column indices within range")
    return cols


def _coalition_values(f, x: np.ndarray, background: np.ndarray,
                      Z: np.ndarray, cols: list[np.ndarray],
                      chunk_rows: int = 200_000) -> np.ndarray:
    """v(z) = E_background[ f(x with off-coalition columns imputed) ]."""
    width = x.size
    keep = np.zeros((Z.shape[0], width), dtype=bool)
    for j, c in enumerate(cols):
        keep[:, c] = Z[:, [j]]
    B = background.shape[0]
    out = np.empty(Z.shape[0])
    step = max(1, chunk_rows // B)
    for lo in range(0, Z.shape[0], step):
        mask = keep[lo:lo + step]
        comp = np.where(mask[:, None, :], x[None, None, :], background[None, :, :])
        vals = np.asarray(f(comp.reshape(-1, width)), dtype=float)
        out[lo:lo + step] = vals.reshape(mask.shape[0], B).mean(axis=1)
    return out


def kernel_shap(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
                background: np.ndarray | BackgroundSet, n_samples: int = 200,
                rng: np.random.Generator | int | None = None,
                groups: Sequence[np.ndarray] | None = None) -> ShapValues:
    """Kernel SHAP attribution of f(x) onto players (columns or groups).

    ``f`` maps an (n, width) array to n scalars.  When the budget covers
    every non-trivial coalition the estimate equals exact enumeration up
    to solver round-off.  The efficiency constraint is eliminated
    analytically, so local accuracy is exact regardless of budget.
    """
    x = np.asarray(x, dtype=float).ravel()
    bg = background.states if isinstance(background, BackgroundSet) else np.asarray(background, dtype=float)
    if bg.ndim != 2 or bg.shape[1] != x.size:
        raise ValueError("background width does not match x")
    cols = _player_columns(x.size, groups)
    m = len(cols)
    if n_samples < m + 2:
        raise ValueError(f"n_samples must be at least M+2 = {m + 2}")
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)

    base = float(np.mean(np.asarray(f(bg), dtype=float)))
    fx = float(np.asarray(f(x[None, :]), dtype=float)[0])

    for attempt in range(4):
        Z, w = _coalition_design(m, n_samples, rng)
        v = _coalition_values(f, x, bg, Z, cols)
        # Fold the efficiency constraint into the regression by
        # substituting phi_M = (fx - base) - sum(other phi).
        zm = Z[:, -1].astype(float)
        X = Z[:, :-1].astype(float) - zm[:, None]
        y = v - base - zm * (fx - base)
        sw = np.sqrt(w)
        beta, _, rank, _ = np.linalg.lstsq(sw[:, None] * X, sw * y, rcond=None)
        if rank == m - 1:
            break
    else:
        raise RuntimeError("coalition design stayed singular after retries")
    phi = np.empty(m)
    phi[:-1] = beta
    phi[-1] = (fx - base) - beta.sum()
    return ShapValues(phi=phi, base_value=base, fx=fx)


def exact_shap(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray,
               background: np.ndarray | BackgroundSet,
               groups: Sequence[np.ndarray] | None = None) -> ShapValues:
    """Exact Shapley values by full coalition enumeration (M <= 12)."""
    x = np.asarray(x, dtype=float).ravel()
    bg = background.states if isinstance(background, BackgroundSet) else np.asarray(background, dtype=float)
    cols = _player_columns(x.size, groups)
    m = len(cols)
    if m > EXACT_SHAP_MAX_PLAYERS:
        raise ValueError(
            f"exact enumeration supports at most {EXACT_SHAP_MAX_PLAYERS} "
            f"players, got {m}")

    Z = np.zeros((2 ** m, m), dtype=bool)
    for mask in range(2 ** m):
        for j in range(m):
            Z[mask, j] = (mask >> j) & 1
    v = _coalition_values(f, x, bg, Z, cols)

    # phi_i = sum over S without i of |S|!(M-|S|-1)!/M! * (v(S+i) - v(S))
    size_w = [math.factorial(s) * math.factorial(m - s - 1) / math.factorial(m)
              for s in range(m)]
    phi = np.zeros(m)
    sizes = Z.sum(axis=1)
    for mask in range(2 ** m):
        s = int(sizes[mask])
        for j in range(m):
            if not (mask >> j) & 1:
                phi[j] += size_w[s] * (v[mask | (1 << j)] - v[mask])
    return ShapValues(phi=phi, base_value=float(v[0]), fx=float(v[-1]))


# ---------------------------------------------------------------------------
# Report assembly over sessions

def _make_target(net, kind: str) -> Callable[[np.ndarray], np.ndarray]:
    if kind == "q_margin":
        return lambda X: (lambda q: q[:, 1] - q[:, 0])(np.atleast_2d(net.forward(X)))
    if kind == "q_skip":
        return lambda X: np.atleast_2d(net.forward(X))[:, 1]
    if kind == "q_noskip":
        return lambda X: np.atleast_2d(net.forward(X))[:, 0]
    raise ValueError(f"unknown attribution target {kind!r}")


@dataclass
class AttributionReport:
    """Ranked per-slot attributions plus per-descriptor aggregates.

    ``rows`` covers every active schema slot, sorted by mean |phi|
    descending.  ``descriptor_rows`` aggregates players at whole-feature
    granularity from a separate coalition run, which keeps one-hot blocks
    together.
    """

    rows: list[dict]
    descriptor_rows: list[dict]
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"rows": self.rows, "descriptor_rows": self.descriptor_rows,
                "meta": self.meta}

    def to_csv(self) -> str:
        lines = ["feature,group,type,mean_abs_shap"]
        for r in self.rows:
            lines.append(f"{r['feature']},{r['group']},{r['ftype']},"
                         f"{r['mean_abs_shap']:.10g}")
        return "\n".join(lines) + "\n"

    def top_slots(self, k: int = 10) -> list[str]:
        return [r["feature"] for r in self.rows[:k]]

    def rank_of_type(self, ftype: str) -> int | None:
        """Best (1-based) rank of any slot with the given feature type."""
        for r in self.rows:
            if r["ftype"] == ftype:
                return r["rank"]
        return None


def attribute_sessions(model, sessions: Sequence, encoder=None,
                       n_episodes: int = 50, n_samples: int = 200,
                       background: BackgroundSet | None = None,
                       background_size: int = 100, target: str = "q_margin",
                       per_descriptor: bool = True,
                       seed: int = 0) -> AttributionReport:
    """Kernel-SHAP attribution over records of sampled sessions.

    Explains the ``target`` output of the model on every record of
    ``n_episodes`` sessions drawn without replacement.  Slots are the
    players of the main run; a second run at whole-descriptor granularity
    is included unless ``per_descriptor`` is false.
    """
    from .evaluation import _resolve_model
    from .schema import encode_records

    sessions = list(sessions)
    if not sessions:
        raise ValueError("no sessions to attribute")
    net, encoder = _resolve_model(model, encoder)
    schema: FeatureSchema = getattr(encoder, "schema_", encoder)
    if net.input_dim != schema.width:
        raise ValueError("model width does not match encoder schema")

    rng = np.random.default_rng(seed)
    if background is None:
        background = sample_background(sessions, schema, size=background_size,
                                       seed=seed)
    if background.states.shape[1] != schema.width:
        raise ValueError("background width does not match schema")

    n_pick = min(n_episodes, len(sessions))
    chosen = [sessions[i] for i in
              rng.choice(len(sessions), size=n_pick, replace=False)]
    states = np.concatenate(
        [encode_records(s.records, schema) for s in chosen], axis=0)

    f = _make_target(net, target)
    slots = schema.slot_table()
    width = schema.width

    # percentile of each explained value within the background distribution
    bg_sorted = np.sort(background.states, axis=0)
    pcts = np.empty_like(states)
    for j in range(width):
        pcts[:, j] = (np.searchsorted(bg_sorted[:, j], states[:, j],
                                      side="right") / bg_sorted.shape[0])

    slot_abs = np.zeros(width)
    signed: list[list[tuple[float, float]]] = [[] for _ in range(width)]
    max_err = 0.0
    for i in range(states.shape[0]):
        sv = kernel_shap(f, states[i], background, n_samples=n_samples,
                         rng=rng)
        slot_abs += np.abs(sv.phi)
        max_err = max(max_err, sv.local_accuracy_error)
        for j in range(width):
            signed[j].append((float(pcts[i, j]), float(sv.phi[j])))
    slot_abs /= states.shape[0]

    order = np.argsort(-slot_abs)
    rows = []
    for rank, j in enumerate(order, start=1):
        d, category = slots[j]
        rows.append({
            "rank": rank,
            "feature": d.slot_names()[0] if category is None
                       else f"{d.name}={category}",
            "descriptor": d.name,
            "category": category,
            "ftype": d.ftype,
            "group": d.group,
            "mean_abs_shap": float(slot_abs[j]),
            "signed": signed[j],
        })

    descriptor_rows: list[dict] = []
    if per_descriptor:
        spans = schema.block_slices()
        names = list(spans)
        groups = [np.arange(spans[n].start, spans[n].stop) for n in names]
        desc_abs = np.zeros(len(names))
        for i in range(states.shape[0]):
            sv = kernel_shap(f, states[i], background, n_samples=n_samples,
                             rng=rng, groups=groups)
            desc_abs += np.abs(sv.phi)
            max_err = max(max_err, sv.local_accuracy_error)
        desc_abs /= states.shape[0]
        by_name = {d.name: d for d in schema.active_descriptors()}
        for rank, j in enumerate(np.argsort(-desc_abs), start=1):
            d = by_name[names[j]]
            descriptor_rows.append({
                "rank": rank, "feature": d.name, "ftype": d.ftype,
                "group": d.group, "mean_abs_shap": float(desc_abs[j]),
            })

    meta = {
        "target": target,
        "n_episodes": n_pick,
        "n_records": int(states.shape[0]),
        "n_samples": n_samples,
        "background_size": int(background.states.shape[0]),
        "background_seed": background.seed,
        "schema_fingerprint": schema.fingerprint(),
        "max_local_accuracy_error": max_err,
        "seed": seed,
    }
    return AttributionReport(rows=rows, descriptor_rows=descriptor_rows,
                             meta=meta)
