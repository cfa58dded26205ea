import numpy as np
import pytest
from hypothesis import given, strategies as st

from tauhawkes import MatchLog, Segment, SegmentTable, build_segments, read_dataset, write_dataset
from tauhawkes.data_model import (build_season, dumps_dataset, loads_dataset, table_from_json, table_to_json)
from tauhawkes.errors import InvalidInputError
from tauhawkes.simulate import MatchSchedule


def test_single_half_without_goals():
    log = MatchLog("m1", ((0.0, 45.0),), (), ((5.0, "home"), (30.0, "home"), (12.0, "away")))
    t = build_segments(log, "home")
    assert len(t) == 1
    seg = t.segments[0]
    assert seg.end == 45.0 and seg.events == (5.0, 30.0)
    assert seg.covariates[2] == 0.0 and seg.covariates[3] == 0.0


def test_goal_splits_half():
    log = MatchLog("m1", ((0.0, 45.0),), ((20.0, "home"),), ((10.0, "home"), (20.0, "home"), (30.0, "home")))
    a, b = build_segments(log, "home").segments
    assert a.end == 20.0 and b.end == 25.0
    assert a.events == (10.0, 20.0)  # a corner at the goal instant stays in the closing segment
    assert b.events == (10.0,)
    assert a.covariates == (0.0, 0.0, 0.0, 0.0)
    assert b.covariates[2] == 1.0 and b.covariates[3] == 20.0
    assert b.covariates[1] == 1.0  # the opening goal counts towards the score in force
    away = build_segments(log, "away").segments
    assert away[1].covariates[1] == -1.0


def test_second_half_indicator_and_offsets():
    log = MatchLog("m2", ((0.0, 47.0), (47.0, 95.0)), ((60.0, "away"),), ((50.0, "home"), (70.0, "home")))
    segs = build_segments(log, "home").segments
    assert [s.covariates[0] for s in segs] == [0.0, 1.0, 1.0]
    assert [s.covariates[3] for s in segs] == [0.0, 0.0, 13.0]
    assert segs[1].events == (3.0,) and segs[2].events == (10.0,)


def test_validation_errors():
    with pytest.raises(InvalidInputError, match="overlaps"):
        MatchLog("m", ((0.0, 50.0), (45.0, 90.0)))
    with pytest.raises(InvalidInputError, match="outside every half"):
        MatchLog("m", ((0.0, 45.0), (50.0, 90.0)), ((47.0, "home"),))
    with pytest.raises(InvalidInputError, match="side"):
        MatchLog("m", ((0.0, 45.0),), ((7.0, "left"),))
    with pytest.raises(InvalidInputError):
        build_segments(MatchLog("m", ((0.0, 45.0),)), "neither")


@given(st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_segment_count_bookkeeping(n_matches, seed):
    logs = MatchSchedule(n_matches=n_matches, goal_rate_home=0.03, goal_rate_away=0.03).match_logs(
        np.random.default_rng(seed))
    table = build_season(logs, "home")
    goals = sum(len(l.goals) for l in logs)
    half_ends = sum(len(l.halves) for l in logs)
    assert len(table) == goals + half_ends


@given(st.integers(0, 2**32 - 1))
def test_rezeroing_preserves_gaps(seed):
    rng = np.random.default_rng(seed)
    goals = tuple((float(t), "home" if rng.random() < 0.5 else "away") for t in rng.uniform(0, 45, 3))
    corners = tuple((float(t), "home") for t in rng.uniform(0, 45, 12))
    log = MatchLog("m", ((0.0, 45.0),), goals, corners)
    table = build_segments(log, "home")
    starts = np.cumsum([0.0] + [s.end for s in table.segments])[:-1]
    rebuilt = np.concatenate([s.times + a for s, a in zip(table.segments, starts)])
    assert np.allclose(np.diff(rebuilt), np.diff(sorted(t for t, _ in corners)))


def test_empty_file_with_header():
    t = loads_dataset("record,match_id,segment_index,E,X1,time\n")
    assert len(t) == 0 and t.columns == ("X1",)


def random_table(rng, n):
    segs = []
    for i in range(n):
        end = float(rng.uniform(0.1, 50))
        ev = np.unique(rng.uniform(0, end, rng.integers(0, 6)))
        ev = ev[ev > 0]
        segs.append(Segment(end, tuple(ev), tuple(rng.normal(size=3)), f"m{i // 5}", i % 5))
    return SegmentTable(tuple(segs), ("X1", "X2", "X3"))


def test_round_trip_text_and_json(tmp_path, rng):
    table = random_table(rng, 1000)
    write_dataset(table, tmp_path / "d.csv")
    assert read_dataset(tmp_path / "d.csv") == table
    assert table_from_json(table_to_json(table)) == table
    assert dumps_dataset(read_dataset(tmp_path / "d.csv")) == dumps_dataset(table)
    (tmp_path / "d.json").write_text(table_to_json(table))
    assert read_dataset(tmp_path / "d.json") == table


def test_malformed_rows_name_the_line():
    head = "record,match_id,segment_index,E,X1,time\n"
    with pytest.raises(InvalidInputError, match="line 3"):
        loads_dataset(head + "segment,m,0,40.0,1.0,\nevent,m,0,,,abc\n")
    with pytest.raises(InvalidInputError, match="line 2"):
        loads_dataset(head + "segment,m,0,40.0\n")
    with pytest.raises(InvalidInputError, match="line 2"):
        loads_dataset(head + "event,m,0,,,3.0\n")
    with pytest.raises(InvalidInputError, match="line 1"):
        loads_dataset("foo,bar\n")


def test_duplicate_event_rejected():
    text = "record,match_id,segment_index,E,X1,time\nsegment,m7,2,40.0,1.0,\nevent,m7,2,,,3.5\nevent,m7,2,,,3.5\n"
    with pytest.raises(InvalidInputError, match=r"\('m7', 2\)"):
        loads_dataset(text)


def test_design_columns():
    t = SegmentTable((Segment(40.0, (), (1.0, 2.0, 0.0, 3.0)),))
    x = t.design_matrix(["X2", "X1*X4", "X4:X2"])
    assert x.tolist() == [[2.0, 3.0, 6.0]]
    with pytest.raises(InvalidInputError):
        t.design_matrix(["X9"])
