"""Session data model, MSSD-format ingestion and a synthetic generator.

Sessions are ordered lists of per-track playback records.  Real logs come
as CSV (either a single pre-joined file or a session log plus a track
feature table); the synthetic generator emits the same record shape, so
everything downstream is source-agnostic.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .schema import TRACK_FEATURE_NAMES

__all__ = [
    "ARCHETYPES",
    "GeneratorConfig",
    "IngestionStats",
    "RawRecord",
    "Session",
    "SessionError",
    "generate_sessions",
    "generate_toy_sessions",
    "parse_mssd",
    "split_sessions",
    "write_mssd_csv",
]

MIN_SESSION_LENGTH = 10
MAX_SESSION_LENGTH = 20

_N_TRACK = len(TRACK_FEATURE_NAMES)


class SessionError(ValueError):
    """Structurally invalid session or record."""


@dataclass(slots=True)
class RawRecord:
    """One track playback within a session.

    ``track_features`` is a float array aligned with
    :data:`skipdqn.schema.TRACK_FEATURE_NAMES`.  ``skip_2`` is the target:
    whether the track was skipped (played only briefly).
    """

    session_id: str
    session_position: int
    session_length: int
    track_id: str
    skip_2: bool
    hour_of_day: int
    premium: bool
    shuffle: bool
    context_switch: bool
    no_pause_before_play: bool
    short_pause_before_play: bool
    long_pause_before_play: bool
    n_seekfwd: int
    n_seekback: int
    context_type: str
    reason_start: str
    reason_end: str
    track_features: np.ndarray

    def validate(self):
        if not 1 <= self.session_position <= self.session_length:
            raise SessionError(
                f"position {self.session_position} outside session of "
                f"length {self.session_length}")
        pauses = (self.no_pause_before_play + self.short_pause_before_play
                  + self.long_pause_before_play)
        if pauses != 1:
            raise SessionError("exactly one pause bucket must be set")
        if self.track_features.shape != (_N_TRACK,):
            raise SessionError(
                f"expected {_N_TRACK} track features, got {self.track_features.shape}")


@dataclass
class Session:
    """An ordered, validated list of records sharing one session id."""

    session_id: str
    records: list[RawRecord]

    def __post_init__(self):
        n = len(self.records)
        if not MIN_SESSION_LENGTH <= n <= MAX_SESSION_LENGTH:
            raise SessionError(
                f"session {self.session_id} has {n} records, expected "
                f"{MIN_SESSION_LENGTH}..{MAX_SESSION_LENGTH}")
        for i, r in enumerate(self.records, start=1):
            if r.session_id != self.session_id:
                raise SessionError("records from multiple sessions")
            if r.session_position != i:
                raise SessionError(
                    f"session {self.session_id}: position {r.session_position} "
                    f"at index {i - 1}, positions must be contiguous from 1")
            if r.session_length != n:
                raise SessionError(
                    f"session {self.session_id}: stated length {r.session_length} "
                    f"!= record count {n}")
            r.validate()

    def __len__(self) -> int:
        return len(self.records)

    def labels(self) -> np.ndarray:
        return np.array([r.skip_2 for r in self.records], dtype=np.int64)


# ---------------------------------------------------------------------------
# Synthetic generator

# Session archetypes: constant-rate listeners/skippers plus two that flip
# behaviour halfway through the session.
ARCHETYPES = ("listener", "skipper", "listen_then_skip", "skip_then_listen")

_P_LISTEN = 0.1   # skip probability while "listening"
_P_SKIP = 0.9     # skip probability while "skipping"


@dataclass
class GeneratorConfig:
    """Knobs for the synthetic session generator.

    ``archetype_mix`` must sum to 1.  ``reason_start_noise`` is the chance
    the start reason ignores the previous track's outcome.  With
    ``leakage_mode`` the end reason deterministically encodes the label
    (fwdbtn iff skipped), mirroring how real logs leak.
    """

    n_sessions: int = 1000
    archetype_mix: Mapping[str, float] = field(
        default_factory=lambda: {a: 0.25 for a in ARCHETYPES})
    leakage_mode: bool = False
    seed: int = 0
    n_tracks: int = 500
    reason_start_noise: float = 0.1

    def __post_init__(self):
        unknown = set(self.archetype_mix) - set(ARCHETYPES)
        if unknown:
            raise ValueError(f"unknown archetypes: {sorted(unknown)}")
        total = sum(self.archetype_mix.values())
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"archetype mix sums to {total}, expected 1")
        if self.n_sessions < 1:
            raise ValueError("n_sessions must be positive")


def _track_table(config: GeneratorConfig) -> np.ndarray:
    """Per-track content features, standard normal per column."""
    rng = np.random.default_rng([config.seed, 10**9])
    return rng.standard_normal((config.n_tracks, _N_TRACK))


def _skip_probability(archetype: str, position: int, length: int) -> float:
    first_half = position <= math.ceil(length / 2)
    if archetype == "listener":
        return _P_LISTEN
    if archetype == "skipper":
        return _P_SKIP
    if archetype == "listen_then_skip":
        return _P_LISTEN if first_half else _P_SKIP
    return _P_SKIP if first_half else _P_LISTEN


_CLEAN_END_REASONS = ("trackdone", "fwdbtn", "backbtn", "endplay")
_CLEAN_END_PROBS = (0.55, 0.3, 0.1, 0.05)
_NOISE_START_REASONS = ("clickrow", "backbtn", "playbtn", "remote")


def generate_sessions(config: GeneratorConfig) -> list[Session]:
    """Generate synthetic sessions; deterministic per (seed, index).

    Labels follow the archetype skip profile.  The start reason of track t
    reflects the outcome of track t-1 (fwdbtn after a skip, trackdone
    otherwise) with ``reason_start_noise`` exceptions; the first track
    starts with appload.  The end reason is label-independent noise unless
    ``leakage_mode`` is set.
    """
    tracks = _track_table(config)
    names = list(config.archetype_mix)
    weights = np.array([config.archetype_mix[a] for a in names])
    sessions = []
    for i in range(config.n_sessions):
        rng = np.random.default_rng([config.seed, i])
        archetype = names[rng.choice(len(names), p=weights)]
        n = int(rng.integers(MIN_SESSION_LENGTH, MAX_SESSION_LENGTH + 1))
        sid = f"syn-{config.seed}-{i}"
        hour = int(rng.integers(0, 24))
        premium = bool(rng.random() < 0.6)
        shuffle = bool(rng.random() < 0.5)
        context_type = ("editorial_playlist", "user_collection",
                        "personalized_playlist", "radio", "charts",
                        "catalog")[rng.choice(6)]
        records = []
        prev_skip: bool | None = None
        for pos in range(1, n + 1):
            skipped = bool(rng.random() < _skip_probability(archetype, pos, n))
            if pos == 1:
                reason_start = "appload"
            elif rng.random() < config.reason_start_noise:
                reason_start = _NOISE_START_REASONS[rng.choice(len(_NOISE_START_REASONS))]
            else:
                reason_start = "fwdbtn" if prev_skip else "trackdone"
            if config.leakage_mode:
                reason_end = "fwdbtn" if skipped else "trackdone"
            else:
                reason_end = _CLEAN_END_REASONS[
                    rng.choice(len(_CLEAN_END_REASONS), p=_CLEAN_END_PROBS)]
            pause = rng.choice(3, p=(0.6, 0.25, 0.15))
            track_idx = int(rng.integers(config.n_tracks))
            records.append(RawRecord(
                session_id=sid,
                session_position=pos,
                session_length=n,
                track_id=f"t{track_idx:05d}",
                skip_2=skipped,
                hour_of_day=hour,
                premium=premium,
                shuffle=shuffle,
                context_switch=bool(rng.random() < 0.05),
                no_pause_before_play=pause == 0,
                short_pause_before_play=pause == 1,
                long_pause_before_play=pause == 2,
                n_seekfwd=int(rng.poisson(0.3)),
                n_seekback=int(rng.poisson(0.3)),
                context_type=context_type,
                reason_start=reason_start,
                reason_end=reason_end,
                track_features=tracks[track_idx],
            ))
            prev_skip = skipped
        sessions.append(Session(sid, records))
    return sessions


def generate_toy_sessions(n_sessions: int, seed: int = 0) -> list[Session]:
    """Sessions where skip_2 equals the per-record shuffle flag.

    Every other field is label-independent noise, so a correct model can
    reach perfect accuracy by reading one boolean slot.
    """
    tracks = np.random.default_rng([seed, 10**9]).standard_normal((50, _N_TRACK))
    sessions = []
    for i in range(n_sessions):
        rng = np.random.default_rng([seed, 10**9 + 1, i])
        n = int(rng.integers(MIN_SESSION_LENGTH, MAX_SESSION_LENGTH + 1))
        sid = f"toy-{seed}-{i}"
        records = []
        for pos in range(1, n + 1):
            skipped = bool(rng.random() < 0.5)
            pause = int(rng.choice(3))
            track_idx = int(rng.integers(50))
            records.append(RawRecord(
                session_id=sid,
                session_position=pos,
                session_length=n,
                track_id=f"t{track_idx:05d}",
                skip_2=skipped,
                hour_of_day=int(rng.integers(0, 24)),
                premium=bool(rng.random() < 0.5),
                shuffle=skipped,
                context_switch=bool(rng.random() < 0.5),
                no_pause_before_play=pause == 0,
                short_pause_before_play=pause == 1,
                long_pause_before_play=pause == 2,
                n_seekfwd=int(rng.poisson(0.3)),
                n_seekback=int(rng.poisson(0.3)),
                context_type="catalog",
                reason_start=str(_NOISE_START_REASONS[rng.choice(len(_NOISE_START_REASONS))]),
                reason_end=str(_CLEAN_END_REASONS[rng.choice(len(_CLEAN_END_REASONS))]),
                track_features=tracks[track_idx],
            ))
        sessions.append(Session(sid, records))
    return sessions


# ---------------------------------------------------------------------------
# MSSD-format CSV ingestion

_BOOL_TRUE = {"true", "1", "t", "yes"}
_BOOL_FALSE = {"false", "0", "f", "no"}

_LOG_COLUMNS = (
    "session_id", "session_position", "session_length", "track_id_clean",
    "skip_2", "hour_of_day", "premium", "hist_user_behavior_is_shuffle",
    "context_switch", "no_pause_before_play", "short_pause_before_play",
    "long_pause_before_play", "hist_user_behavior_n_seekfwd",
    "hist_user_behavior_n_seekback", "context_type",
    "hist_user_behavior_reason_start", "hist_user_behavior_reason_end",
)


@dataclass
class IngestionStats:
    """Counts of what ingestion kept and why rows or sessions were dropped."""

    sessions_kept: int = 0
    records_kept: int = 0
    sessions_too_short: int = 0
    sessions_too_long: int = 0
    sessions_malformed: int = 0
    rows_malformed: int = 0
    rows_missing_track: int = 0
    unknown_category: int = 0

    def to_json(self) -> dict:
        return dict(self.__dict__)


def _parse_bool(text: str) -> bool:
    v = text.strip().lower()
    if v in _BOOL_TRUE:
        return True
    if v in _BOOL_FALSE:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_track_row(row: Mapping[str, str]) -> np.ndarray:
    out = np.empty(_N_TRACK)
    for j, name in enumerate(TRACK_FEATURE_NAMES):
        raw = row[name]
        if name == "mode":
            v = raw.strip().lower()
            if v in ("major", "minor"):
                out[j] = 1.0 if v == "major" else 0.0
            else:
                out[j] = float(raw)
        else:
            out[j] = float(raw)
    return out


def load_track_table(path) -> dict[str, np.ndarray]:
    """Track feature table CSV -> track_id to feature-vector mapping."""
    table: dict[str, np.ndarray] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("track_id",) + TRACK_FEATURE_NAMES
                   if c not in (reader.fieldnames or ())]
        if missing:
            raise SessionError(f"track table missing columns: {missing}")
        for row in reader:
            table[row["track_id"]] = _parse_track_row(row)
    return table


def _record_from_row(row: Mapping[str, str],
                     track_features: np.ndarray) -> RawRecord:
    return RawRecord(
        session_id=row["session_id"],
        session_position=int(row["session_position"]),
        session_length=int(row["session_length"]),
        track_id=row["track_id_clean"],
        skip_2=_parse_bool(row["skip_2"]),
        hour_of_day=int(row["hour_of_day"]),
        premium=_parse_bool(row["premium"]),
        shuffle=_parse_bool(row["hist_user_behavior_is_shuffle"]),
        context_switch=_parse_bool(row["context_switch"]),
        no_pause_before_play=_parse_bool(row["no_pause_before_play"]),
        short_pause_before_play=_parse_bool(row["short_pause_before_play"]),
        long_pause_before_play=_parse_bool(row["long_pause_before_play"]),
        n_seekfwd=int(row["hist_user_behavior_n_seekfwd"]),
        n_seekback=int(row["hist_user_behavior_n_seekback"]),
        context_type=row["context_type"].strip().lower(),
        reason_start=row["hist_user_behavior_reason_start"].strip().lower(),
        reason_end=row["hist_user_behavior_reason_end"].strip().lower(),
        track_features=track_features,
    )


def parse_mssd(log_path, track_path=None) -> tuple[list[Session], IngestionStats]:
    """Parse MSSD-format CSV logs into validated sessions.

    ``log_path`` may be pre-joined (track feature columns inline) or a bare
    session log, in which case ``track_path`` supplies the track table to
    join on ``track_id_clean``.  Sessions outside the 10..20 length band and
    malformed rows are dropped and counted, never fatal.
    """
    stats = IngestionStats()
    table = load_track_table(track_path) if track_path is not None else None

    with open(log_path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or ()
        missing = [c for c in _LOG_COLUMNS if c not in header]
        if missing:
            raise SessionError(f"session log missing columns: {missing}")
        joined = all(c in header for c in TRACK_FEATURE_NAMES)
        if not joined and table is None:
            raise SessionError(
                "log has no inline track features; a track table is required")

        by_session: dict[str, list[RawRecord]] = {}
        order: list[str] = []
        for row in reader:
            try:
                if joined:
                    feats = _parse_track_row(row)
                else:
                    feats = table.get(row["track_id_clean"])
                    if feats is None:
                        stats.rows_missing_track += 1
                        continue
                record = _record_from_row(row, feats)
            except (KeyError, ValueError):
                stats.rows_malformed += 1
                continue
            if record.session_id not in by_session:
                order.append(record.session_id)
            by_session.setdefault(record.session_id, []).append(record)

    sessions = []
    for sid in order:
        records = sorted(by_session[sid], key=lambda r: r.session_position)
        n = len(records)
        if n < MIN_SESSION_LENGTH:
            stats.sessions_too_short += 1
            continue
        if n > MAX_SESSION_LENGTH:
            stats.sessions_too_long += 1
            continue
        try:
            session = Session(sid, records)
        except SessionError:
            stats.sessions_malformed += 1
            continue
        sessions.append(session)
        stats.sessions_kept += 1
        stats.records_kept += n
    return sessions, stats


def write_mssd_csv(sessions: Sequence[Session], log_path,
                   track_path=None) -> None:
    """Write sessions back out in the ingestible CSV shape.

    With ``track_path`` the track features go to a separate table keyed by
    track id; otherwise they are inlined into the log (pre-joined form).
    Floats are written round-trip exact.
    """
    log_path = Path(log_path)
    inline = track_path is None
    columns = list(_LOG_COLUMNS) + (list(TRACK_FEATURE_NAMES) if inline else [])
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for session in sessions:
            for r in session.records:
                row = [
                    r.session_id, r.session_position, r.session_length,
                    r.track_id, str(r.skip_2).lower(), r.hour_of_day,
                    str(r.premium).lower(), str(r.shuffle).lower(),
                    str(r.context_switch).lower(),
                    str(r.no_pause_before_play).lower(),
                    str(r.short_pause_before_play).lower(),
                    str(r.long_pause_before_play).lower(),
                    r.n_seekfwd, r.n_seekback, r.context_type,
                    r.reason_start, r.reason_end,
                ]
                if inline:
                    row.extend(repr(float(v)) for v in r.track_features)
                writer.writerow(row)
    if track_path is None:
        return
    tracks: dict[str, np.ndarray] = {}
    for session in sessions:
        for r in session.records:
            tracks.setdefault(r.track_id, r.track_features)
    with open(track_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("track_id",) + TRACK_FEATURE_NAMES)
        for tid in sorted(tracks):
            writer.writerow([tid] + [repr(float(v)) for v in tracks[tid]])


def split_sessions(sessions: Sequence[Session], test_fraction: float,
                   seed: int = 0) -> tuple[list[Session], list[Session]]:
    """Shuffle-split whole sessions into train and test lists."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    idx = np.random.default_rng(seed).permutation(len(sessions))
    n_test = max(1, int(round(test_fraction * len(sessions))))
    test_idx = set(idx[:n_test].tolist())
    train = [s for i, s in enumerate(sessions) if i not in test_idx]
    test = [s for i, s in enumerate(sessions) if i in test_idx]
    return train, test
