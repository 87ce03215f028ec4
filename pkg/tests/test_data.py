"""Synthetic generator, session validation and MSSD CSV round trips."""
import numpy as np
import pytest

from skipdqn.data import (ARCHETYPES, GeneratorConfig, RawRecord, Session,
                          SessionError, generate_sessions,
                          generate_toy_sessions, parse_mssd, split_sessions,
                          write_mssd_csv)


def _rates(sessions):
    labels = np.concatenate([s.labels() for s in sessions])
    return float(labels.mean())


def test_generator_is_deterministic():
    cfg = GeneratorConfig(n_sessions=25, seed=42)
    a = generate_sessions(cfg)
    b = generate_sessions(cfg)
    assert [s.session_id for s in a] == [s.session_id for s in b]
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.labels(), sb.labels())
        for ra, rb in zip(sa.records, sb.records):
            assert ra.reason_start == rb.reason_start
            assert np.array_equal(ra.track_features, rb.track_features)


def test_generator_session_structure():
    sessions = generate_sessions(GeneratorConfig(n_sessions=50, seed=1))
    for s in sessions:
        assert 10 <= len(s) <= 20
        for i, r in enumerate(s.records, start=1):
            assert r.session_position == i
            assert r.session_length == len(s)
            assert (r.no_pause_before_play + r.short_pause_before_play
                    + r.long_pause_before_play) == 1


def test_single_archetype_skip_rates():
    for archetype, lo, hi in (("skipper", 0.87, 0.93),
                              ("listener", 0.07, 0.13)):
        cfg = GeneratorConfig(n_sessions=400, seed=9,
                              archetype_mix={archetype: 1.0})
        assert lo < _rates(generate_sessions(cfg)) < hi


def test_switching_archetypes_flip_at_halfway():
    cfg = GeneratorConfig(n_sessions=400, seed=9,
                          archetype_mix={"listen_then_skip": 1.0})
    first, second = [], []
    for s in generate_sessions(cfg):
        half = -(-len(s) // 2)  # ceil
        labels = s.labels()
        first.extend(labels[:half])
        second.extend(labels[half:])
    assert np.mean(first) < 0.15
    assert np.mean(second) > 0.85


def test_balanced_mix_overall_rate():
    rate = _rates(generate_sessions(GeneratorConfig(n_sessions=600, seed=2)))
    assert 0.45 < rate < 0.55


def test_reason_start_reflects_previous_label():
    cfg = GeneratorConfig(n_sessions=100, seed=4, reason_start_noise=0.0)
    for s in generate_sessions(cfg):
        assert s.records[0].reason_start == "appload"
        for prev, cur in zip(s.records, s.records[1:]):
            expected = "fwdbtn" if prev.skip_2 else "trackdone"
            assert cur.reason_start == expected


def test_reason_start_noise_rate():
    cfg = GeneratorConfig(n_sessions=400, seed=4, reason_start_noise=0.1)
    agree = total = 0
    for s in generate_sessions(cfg):
        for prev, cur in zip(s.records, s.records[1:]):
            expected = "fwdbtn" if prev.skip_2 else "trackdone"
            agree += cur.reason_start == expected
            total += 1
    assert 0.87 < agree / total < 0.93


def test_leakage_mode_end_reason_encodes_label():
    cfg = GeneratorConfig(n_sessions=50, seed=6, leakage_mode=True)
    for s in generate_sessions(cfg):
        for r in s.records:
            assert (r.reason_end == "fwdbtn") == r.skip_2


def test_clean_mode_end_reason_is_label_independent():
    cfg = GeneratorConfig(n_sessions=600, seed=6, leakage_mode=False)
    fwd_given_skip, fwd_given_stay = [], []
    for s in generate_sessions(cfg):
        for r in s.records:
            (fwd_given_skip if r.skip_2 else fwd_given_stay).append(
                r.reason_end == "fwdbtn")
    assert abs(np.mean(fwd_given_skip) - np.mean(fwd_given_stay)) < 0.03


def test_toy_corpus_label_equals_shuffle():
    for s in generate_toy_sessions(40, seed=3):
        for r in s.records:
            assert r.skip_2 == r.shuffle


def test_archetype_mix_validation():
    with pytest.raises(ValueError, match="sums"):
        GeneratorConfig(archetype_mix={"listener": 0.7})
    with pytest.raises(ValueError, match="unknown"):
        GeneratorConfig(archetype_mix={"dancer": 1.0})
    assert set(ARCHETYPES) == {"listener", "skipper", "listen_then_skip",
                               "skip_then_listen"}


def _records_for(sid, n):
    base = generate_sessions(GeneratorConfig(n_sessions=1, seed=0))[0]
    out = []
    for i in range(1, n + 1):
        src = base.records[(i - 1) % len(base.records)]
        out.append(RawRecord(
            session_id=sid, session_position=i, session_length=n,
            track_id=src.track_id, skip_2=src.skip_2,
            hour_of_day=src.hour_of_day, premium=src.premium,
            shuffle=src.shuffle, context_switch=src.context_switch,
            no_pause_before_play=True, short_pause_before_play=False,
            long_pause_before_play=False, n_seekfwd=0, n_seekback=0,
            context_type=src.context_type, reason_start=src.reason_start,
            reason_end=src.reason_end, track_features=src.track_features))
    return out


def test_session_length_bounds_enforced():
    with pytest.raises(SessionError):
        Session("s", _records_for("s", 9))
    with pytest.raises(SessionError):
        Session("s", _records_for("s", 21))
    assert len(Session("s", _records_for("s", 10))) == 10


def test_session_position_contiguity_enforced():
    records = _records_for("s", 10)
    records[3].session_position = 9
    with pytest.raises(SessionError, match="contiguous"):
        Session("s", records)


def test_session_pause_exclusivity_enforced():
    records = _records_for("s", 10)
    records[0].short_pause_before_play = True
    with pytest.raises(SessionError, match="pause"):
        Session("s", records)


def test_csv_round_trip_prejoined(tmp_path):
    sessions = generate_sessions(GeneratorConfig(n_sessions=8, seed=13))
    path = tmp_path / "log.csv"
    write_mssd_csv(sessions, path)
    parsed, stats = parse_mssd(path)
    assert stats.sessions_kept == 8 and stats.rows_malformed == 0
    for a, b in zip(sessions, parsed):
        assert a.session_id == b.session_id
        assert np.array_equal(a.labels(), b.labels())
        for ra, rb in zip(a.records, b.records):
            assert ra.reason_end == rb.reason_end
            assert np.allclose(ra.track_features, rb.track_features,
                               rtol=0, atol=0)  # repr round trip is exact


def test_csv_round_trip_with_track_table(tmp_path):
    sessions = generate_sessions(GeneratorConfig(n_sessions=8, seed=14))
    log, tracks = tmp_path / "log.csv", tmp_path / "tracks.csv"
    write_mssd_csv(sessions, log, tracks)
    parsed, stats = parse_mssd(log, tracks)
    assert stats.sessions_kept == 8
    for a, b in zip(sessions, parsed):
        for ra, rb in zip(a.records, b.records):
            assert np.array_equal(ra.track_features, rb.track_features)


def test_parse_drops_and_counts_bad_sessions(tmp_path):
    sessions = generate_sessions(GeneratorConfig(n_sessions=4, seed=15))
    path = tmp_path / "log.csv"
    write_mssd_csv(sessions, path)
    lines = path.read_text().splitlines()
    header = lines[0]
    # session 0: keep only 3 rows (too short); plus one malformed row
    sid0 = sessions[0].session_id
    kept = [l for l in lines[1:] if not l.startswith(sid0)]
    short = [l for l in lines[1:] if l.startswith(sid0)][:3]
    bad = short[0].replace("true", "maybe").replace("false", "maybe")
    path.write_text("\n".join([header] + kept + short + [bad]) + "\n")
    parsed, stats = parse_mssd(path)
    assert stats.sessions_kept == 3
    assert stats.sessions_too_short == 1
    assert stats.rows_malformed == 1


def test_parse_requires_track_source(tmp_path):
    sessions = generate_sessions(GeneratorConfig(n_sessions=2, seed=16))
    log, tracks = tmp_path / "log.csv", tmp_path / "tracks.csv"
    write_mssd_csv(sessions, log, tracks)  # log has no inline features
    with pytest.raises(SessionError, match="track table"):
        parse_mssd(log)


def test_split_sessions_disjoint_and_deterministic():
    sessions = generate_sessions(GeneratorConfig(n_sessions=40, seed=17))
    train1, test1 = split_sessions(sessions, 0.25, seed=3)
    train2, test2 = split_sessions(sessions, 0.25, seed=3)
    assert [s.session_id for s in test1] == [s.session_id for s in test2]
    assert len(test1) == 10 and len(train1) == 30
    assert not ({s.session_id for s in train1}
                & {s.session_id for s in test1})
    with pytest.raises(ValueError):
        split_sessions(sessions, 1.5)
