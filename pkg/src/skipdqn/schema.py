"""Feature schema: descriptors, standardization, state encoding, masking.

A listening-session record is turned into a fixed-width state vector by a
:class:`FeatureSchema`.  The schema is an ordered tuple of feature
descriptors, each mapping one record field (or one track-feature column) to
one or more vector slots.  Schemas are immutable; fitting standardization
statistics or masking feature types produces a new schema.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

__all__ = [
    "FeatureDescriptor",
    "FeatureSchema",
    "SchemaError",
    "StateEncoder",
    "apply_mask",
    "build_schema",
    "corrected_schema",
    "encode_record",
    "encode_records",
    "fit_standardizer",
    "schema_dump",
    "CORRECTED_EXCLUDED_TYPES",
    "FEATURE_TYPES",
    "TRACK_FEATURE_NAMES",
]

# Feature taxonomy.  Groups: UB = user behaviour within the session,
# CX = listening context, CN = track content.  Types index the taxonomy at
# the granularity used for masking and ablation.
GROUPS = ("UB", "CX", "CN")
FEATURE_TYPES = ("RE", "RS", "PA", "SC", "PS", "SL", "SP", "HD", "PT", "PR", "SH", "TR")
GROUP_OF_TYPE = {
    "RE": "UB",  # reason playback ended
    "RS": "UB",  # reason playback started
    "PA": "UB",  # pause duration bucket
    "SC": "UB",  # seek counts
    "PS": "UB",  # playback context switch
    "SL": "CX",  # session length
    "SP": "CX",  # position in session
    "HD": "CX",  # hour of day
    "PT": "CX",  # playlist/context type
    "PR": "CX",  # premium account
    "SH": "CX",  # shuffle mode
    "TR": "CN",  # track content features
}

ENCODINGS = ("numeric-standardized", "numeric-raw", "boolean", "one-hot")

# Leaking inputs: the end-of-playback reason encodes the label outright and
# the session-length feature lets position anchor against the session end.
CORRECTED_EXCLUDED_TYPES = ("RE", "SL")

OTHER_CATEGORY = "other"

# Category vocabularies for the one-hot fields.  "appload" only ever starts
# playback, so the end-reason list omits it; both lists reserve "other" for
# rare codes.  Context types have no rare tail in the logs, so "catalog"
# doubles as the overflow bucket there.
REASON_START_CATEGORIES = (
    "trackdone", "fwdbtn", "backbtn", "clickrow", "playbtn", "endplay",
    "remote", "appload", "trackerror", "popup", "uriopen", "clickside",
    OTHER_CATEGORY,
)
REASON_END_CATEGORIES = (
    "trackdone", "fwdbtn", "backbtn", "clickrow", "playbtn", "endplay",
    "remote", "trackerror", "popup", "uriopen", "clickside",
    OTHER_CATEGORY,
)
CONTEXT_TYPE_CATEGORIES = (
    "editorial_playlist", "user_collection", "personalized_playlist",
    "radio", "charts", "catalog",
)

# Track-feature columns in canonical order.  Records carry these as a float
# array aligned with this tuple ("mode" is parsed as major=1.0, minor=0.0).
TRACK_FEATURE_NAMES = (
    "duration", "release_year", "us_popularity_estimate", "acousticness",
    "beat_strength", "bounciness", "danceability", "dyn_range_mean",
    "energy", "flatness", "instrumentalness", "key", "liveness", "loudness",
    "mechanism", "mode", "organism", "speechiness", "tempo",
    "time_signature",
    "acoustic_vector_0", "acoustic_vector_1", "acoustic_vector_2",
    "acoustic_vector_3", "acoustic_vector_4", "acoustic_vector_5",
    "acoustic_vector_6", "acoustic_vector_7",
)


class SchemaError(ValueError):
    """Invalid schema configuration or misuse of an unfitted schema."""


@dataclass(frozen=True)
class FeatureDescriptor:
    """One record field mapped to one or more state-vector slots.

    ``source`` names a record attribute; for track features it is the
    column index into the record's track-feature array.  ``overflow`` is
    the category that absorbs unseen values of a one-hot field.
    """

    name: str
    ftype: str
    encoding: str
    source: str | int
    categories: tuple[str, ...] | None = None
    overflow: str | None = None

    def __post_init__(self):
        if self.ftype not in GROUP_OF_TYPE:
            raise SchemaError(f"unknown feature type {self.ftype!r}")
        if self.encoding not in ENCODINGS:
            raise SchemaError(f"unknown encoding {self.encoding!r}")
        if self.encoding == "one-hot":
            if not self.categories:
                raise SchemaError(f"{self.name}: one-hot requires categories")
            if len(set(self.categories)) != len(self.categories):
                raise SchemaError(f"{self.name}: duplicate categories")
            over = self.overflow if self.overflow is not None else (
                OTHER_CATEGORY if OTHER_CATEGORY in self.categories
                else self.categories[-1])
            if over not in self.categories:
                raise SchemaError(f"{self.name}: overflow {over!r} not a category")
            object.__setattr__(self, "overflow", over)
        elif self.categories is not None or self.overflow is not None:
            raise SchemaError(f"{self.name}: categories only valid for one-hot")

    @property
    def group(self) -> str:
        return GROUP_OF_TYPE[self.ftype]

    @property
    def width(self) -> int:
        return len(self.categories) if self.encoding == "one-hot" else 1

    def slot_names(self) -> list[str]:
        if self.encoding == "one-hot":
            return [f"{self.name}={c}" for c in self.categories]
        return [self.name]


def _default_descriptors(standardize_counts: bool = False,
                         standardize_context: bool = False) -> tuple[FeatureDescriptor, ...]:
    numeric = "numeric-standardized"
    counts = numeric if standardize_counts else "numeric-raw"
    context = numeric if standardize_context else "numeric-raw"
    rows: list[FeatureDescriptor] = [
        FeatureDescriptor("reason_end", "RE", "one-hot", "reason_end",
                          REASON_END_CATEGORIES),
        FeatureDescriptor("reason_start", "RS", "one-hot", "reason_start",
                          REASON_START_CATEGORIES),
        FeatureDescriptor("no_pause_before_play", "PA", "boolean", "no_pause_before_play"),
        FeatureDescriptor("short_pause_before_play", "PA", "boolean", "short_pause_before_play"),
        FeatureDescriptor("long_pause_before_play", "PA", "boolean", "long_pause_before_play"),
        FeatureDescriptor("n_seekfwd", "SC", counts, "n_seekfwd"),
        FeatureDescriptor("n_seekback", "SC", counts, "n_seekback"),
        FeatureDescriptor("context_switch", "PS", "boolean", "context_switch"),
        FeatureDescriptor("session_length", "SL", context, "session_length"),
        FeatureDescriptor("session_position", "SP", context, "session_position"),
        FeatureDescriptor("hour_of_day", "HD", context, "hour_of_day"),
        FeatureDescriptor("context_type", "PT", "one-hot", "context_type",
                          CONTEXT_TYPE_CATEGORIES),
        FeatureDescriptor("premium", "PR", "boolean", "premium"),
        FeatureDescriptor("shuffle", "SH", "boolean", "shuffle"),
    ]
    for idx, name in enumerate(TRACK_FEATURE_NAMES):
        rows.append(FeatureDescriptor(f"track.{name}", "TR", numeric, idx))
    return tuple(rows)


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered descriptors plus an active mask and standardization stats.

    ``stats`` maps descriptor name to (mean, std) for fitted standardized
    features.  All mutating operations return a new schema.
    """

    descriptors: tuple[FeatureDescriptor, ...]
    active: tuple[bool, ...]
    stats: Mapping[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.descriptors) != len(self.active):
            raise SchemaError("active mask length mismatch")
        names = [d.name for d in self.descriptors]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate descriptor names")
        if not any(self.active):
            raise SchemaError("schema has no active features")
        object.__setattr__(self, "stats", dict(self.stats))

    def active_descriptors(self) -> tuple[FeatureDescriptor, ...]:
        return tuple(d for d, a in zip(self.descriptors, self.active) if a)

    @property
    def width(self) -> int:
        return sum(d.width for d in self.active_descriptors())

    def slot_names(self) -> list[str]:
        out: list[str] = []
        for d in self.active_descriptors():
            out.extend(d.slot_names())
        return out

    def slot_table(self) -> list[tuple[FeatureDescriptor, str | None]]:
        """(descriptor, category) per active slot; category None if scalar."""
        out: list[tuple[FeatureDescriptor, str | None]] = []
        for d in self.active_descriptors():
            if d.encoding == "one-hot":
                out.extend((d, c) for c in d.categories)
            else:
                out.append((d, None))
        return out

    def block_slices(self) -> dict[str, slice]:
        """Column span of each active descriptor in the encoded vector."""
        spans: dict[str, slice] = {}
        offset = 0
        for d in self.active_descriptors():
            spans[d.name] = slice(offset, offset + d.width)
            offset += d.width
        return spans

    def standardized_names(self) -> list[str]:
        return [d.name for d in self.active_descriptors()
                if d.encoding == "numeric-standardized"]

    @property
    def is_fitted(self) -> bool:
        return all(name in self.stats for name in self.standardized_names())

    def require_fitted(self):
        missing = [n for n in self.standardized_names() if n not in self.stats]
        if missing:
            raise SchemaError(
                "schema is not fitted; missing standardization stats for "
                + ", ".join(missing))

    def to_json(self) -> dict:
        return schema_dump(self)

    @classmethod
    def from_json(cls, doc: Mapping) -> "FeatureSchema":
        descriptors = tuple(
            FeatureDescriptor(
                name=row["name"], ftype=row["ftype"], encoding=row["encoding"],
                source=row["source"],
                categories=tuple(row["categories"]) if row.get("categories") else None,
                overflow=row.get("overflow"),
            )
            for row in doc["descriptors"])
        active = tuple(bool(row["active"]) for row in doc["descriptors"])
        stats = {k: (float(v[0]), float(v[1]))
                 for k, v in doc.get("stats", {}).items()}
        schema = cls(descriptors, active, stats)
        want = doc.get("fingerprint")
        if want is not None and schema.fingerprint() != want:
            raise SchemaError("schema fingerprint mismatch on load")
        return schema

    def fingerprint(self) -> str:
        doc = schema_dump(self)
        doc.pop("fingerprint", None)
        payload = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()


def schema_dump(schema: FeatureSchema) -> dict:
    """Versioned JSON document describing the schema, slots and stats."""
    rows = []
    for d, a in zip(schema.descriptors, schema.active):
        rows.append({
            "name": d.name,
            "group": d.group,
            "ftype": d.ftype,
            "encoding": d.encoding,
            "source": d.source,
            "categories": list(d.categories) if d.categories else None,
            "overflow": d.overflow,
            "active": a,
            "width": d.width,
        })
    doc = {
        "version": 1,
        "descriptor_set": "mssd",
        # Field layout is a built-in default; category vocabularies are
        # configurable when logs disagree with it.
        "layout_provenance": "built-in default",
        "descriptors": rows,
        "width": schema.width,
        "slot_names": schema.slot_names(),
        "stats": {k: [v[0], v[1]] for k, v in sorted(schema.stats.items())},
    }
    doc["fingerprint"] = hashlib.sha256(
        json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()
    return doc


def build_schema(config: Mapping | None = None) -> FeatureSchema:
    """Build a schema from a config mapping.

    Recognised keys: ``exclude_types``, ``exclude_features`` (descriptor
    names), ``category_overrides`` (descriptor name -> category list),
    ``standardize_counts``, ``standardize_context``.  Unknown keys or names
    raise :class:`SchemaError`.
    """
    config = dict(config or {})
    known = {"exclude_types", "exclude_features", "category_overrides",
             "standardize_counts", "standardize_context"}
    unknown = set(config) - known
    if unknown:
        raise SchemaError(f"unknown schema config keys: {sorted(unknown)}")

    descriptors = list(_default_descriptors(
        standardize_counts=bool(config.get("standardize_counts", False)),
        standardize_context=bool(config.get("standardize_context", False)),
    ))

    overrides = config.get("category_overrides") or {}
    by_name = {d.name: i for i, d in enumerate(descriptors)}
    for name, cats in overrides.items():
        if name not in by_name:
            raise SchemaError(f"category override for unknown feature {name!r}")
        d = descriptors[by_name[name]]
        if d.encoding != "one-hot":
            raise SchemaError(f"{name} is not categorical")
        descriptors[by_name[name]] = replace(d, categories=tuple(cats), overflow=None)

    schema = FeatureSchema(tuple(descriptors), (True,) * len(descriptors))
    excluded = list(config.get("exclude_types", ())) + list(config.get("exclude_features", ()))
    if excluded:
        schema = apply_mask(schema, excluded)
    return schema


def apply_mask(schema: FeatureSchema, excluded: Iterable[str]) -> FeatureSchema:
    """Deactivate feature types or individual features by name.

    Masked descriptors are omitted from encoded vectors entirely.  Raises
    if a name is unknown or nothing would remain active.
    """
    excluded = list(excluded)
    known_names = {d.name for d in schema.descriptors}
    for item in excluded:
        if item not in FEATURE_TYPES and item not in known_names:
            raise SchemaError(f"unknown feature or type {item!r}")
    types = {e for e in excluded if e in FEATURE_TYPES}
    names = {e for e in excluded if e in known_names}
    active = tuple(
        a and d.ftype not in types and d.name not in names
        for d, a in zip(schema.descriptors, schema.active))
    if not any(active):
        raise SchemaError("mask removes every active feature")
    stats = {k: v for k, v in schema.stats.items()}
    return FeatureSchema(schema.descriptors, active, stats)


def corrected_schema(schema: FeatureSchema) -> FeatureSchema:
    """Mask the leaking feature types (end reason, session length)."""
    return apply_mask(schema, CORRECTED_EXCLUDED_TYPES)


def _record_value(record, source):
    if isinstance(source, int):
        return record.track_features[source]
    return getattr(record, source)


def fit_standardizer(schema: FeatureSchema, sessions: Iterable) -> FeatureSchema:
    """Fit per-feature mean/std on a session stream (one pass, Welford).

    Uses the population convention (denominator n).  Raises on an empty
    stream or on a constant standardized feature.
    """
    targets = [d for d in schema.active_descriptors()
               if d.encoding == "numeric-standardized"]
    if not targets:
        return replace(schema, stats=dict(schema.stats))

    k = len(targets)
    count = 0
    mean = np.zeros(k)
    m2 = np.zeros(k)
    row = np.empty(k)
    for session in sessions:
        for record in session.records:
            for j, d in enumerate(targets):
                row[j] = _record_value(record, d.source)
            count += 1
            delta = row - mean
            mean += delta / count
            m2 += delta * (row - mean)
    if count == 0:
        raise SchemaError("cannot fit standardizer on an empty session stream")
    std = np.sqrt(m2 / count)
    bad = [d.name for j, d in enumerate(targets) if not std[j] > 0]
    if bad:
        raise SchemaError(f"constant features cannot be standardized: {bad}")
    stats = dict(schema.stats)
    for j, d in enumerate(targets):
        stats[d.name] = (float(mean[j]), float(std[j]))
    return replace(schema, stats=stats)


def encode_record(record, schema: FeatureSchema,
                  counters: dict | None = None) -> np.ndarray:
    """Encode one record to a float vector of ``schema.width`` slots.

    Pure when ``counters`` is None; otherwise unseen categorical values
    increment ``counters['unknown_category']`` as they are folded into the
    overflow slot.
    """
    schema.require_fitted()
    out = np.zeros(schema.width)
    pos = 0
    for d in schema.active_descriptors():
        value = _record_value(record, d.source)
        if d.encoding == "one-hot":
            try:
                idx = d.categories.index(value)
            except ValueError:
                idx = d.categories.index(d.overflow)
                if counters is not None:
                    counters["unknown_category"] = counters.get("unknown_category", 0) + 1
            out[pos + idx] = 1.0
            pos += d.width
            continue
        if d.encoding == "boolean":
            out[pos] = 1.0 if value else 0.0
        elif d.encoding == "numeric-raw":
            out[pos] = float(value)
        else:
            mu, sd = schema.stats[d.name]
            out[pos] = (float(value) - mu) / sd
        pos += 1
    return out


def encode_records(records: Sequence, schema: FeatureSchema,
                   counters: dict | None = None) -> np.ndarray:
    """Encode a record sequence to an (n, width) array."""
    out = np.empty((len(records), schema.width))
    for i, record in enumerate(records):
        out[i] = encode_record(record, schema, counters)
    return out


class StateEncoder(TransformerMixin, BaseEstimator):
    """Stateful wrapper turning sessions into model-ready state matrices.

    ``fit`` builds the schema and learns standardization statistics from
    training sessions; ``transform`` encodes sessions (or bare record
    sequences) into a single stacked array.
    """

    def __init__(self, exclude_types=(), exclude_features=(),
                 category_overrides=None, standardize_counts=False,
                 standardize_context=False):
        self.exclude_types = exclude_types
        self.exclude_features = exclude_features
        self.category_overrides = category_overrides
        self.standardize_counts = standardize_counts
        self.standardize_context = standardize_context

    def _config(self) -> dict:
        return {
            "exclude_types": tuple(self.exclude_types),
            "exclude_features": tuple(self.exclude_features),
            "category_overrides": self.category_overrides,
            "standardize_counts": self.standardize_counts,
            "standardize_context": self.standardize_context,
        }

    def fit(self, X, y=None):
        sessions = list(X)
        if not sessions:
            raise SchemaError("cannot fit encoder on an empty session list")
        schema = build_schema(self._config())
        self.schema_ = fit_standardizer(schema, sessions)
        self.unknown_category_count_ = 0
        return self

    @classmethod
    def from_schema(cls, schema: FeatureSchema) -> "StateEncoder":
        """Wrap an already-fitted schema (e.g. loaded from a checkpoint)."""
        schema.require_fitted()
        enc = cls()
        enc.schema_ = schema
        enc.unknown_category_count_ = 0
        return enc

    def _check_fitted(self):
        if not hasattr(self, "schema_"):
            raise NotFittedError(
                "this StateEncoder instance is not fitted yet; call fit first")

    @property
    def width_(self) -> int:
        self._check_fitted()
        return self.schema_.width

    def transform(self, X) -> np.ndarray:
        """Encode sessions (or a flat record sequence) to (n, width)."""
        self._check_fitted()
        records = _flatten_records(X)
        counters: dict = {}
        out = encode_records(records, self.schema_, counters)
        self.unknown_category_count_ += counters.get("unknown_category", 0)
        return out

    def mask(self, excluded: Iterable[str]) -> "StateEncoder":
        """Fitted copy with extra feature types or names deactivated."""
        self._check_fitted()
        return StateEncoder.from_schema(apply_mask(self.schema_, excluded))

    def corrected(self) -> "StateEncoder":
        """Fitted copy with the leaking feature types removed."""
        self._check_fitted()
        return StateEncoder.from_schema(corrected_schema(self.schema_))

    def get_feature_names_out(self, input_features=None):
        self._check_fitted()
        return np.asarray(self.schema_.slot_names(), dtype=object)

    def fingerprint(self) -> str:
        self._check_fitted()
        return self.schema_.fingerprint()


def _flatten_records(X) -> list:
    """Accept a Session, a session iterable, or a flat record sequence."""
    if hasattr(X, "records"):
        return list(X.records)
    items = list(X)
    if not items:
        return []
    if hasattr(items[0], "records"):
        out: list = []
        for s in items:
            out.extend(s.records)
        return out
    return items
