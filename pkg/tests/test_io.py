from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from pblsgm.estimation import FitOptions
from pblsgm.io import (
    DataError,
    RunConfig,
    WideDataset,
    build_spec,
    config_from_mapping,
    condition_from_mapping,
    load_config,
    load_wide_csv,
    long_to_wide,
    parse_wide,
    render_config,
    write_wide_csv,
)
from pblsgm.model import IndividualRecord, Shape


def _header(J, outcomes="yz"):
    cols = ["id"] + [f"t{j}" for j in range(1, J + 1)]
    for k in outcomes:
        cols += [f"{k}{j}" for j in range(1, J + 1)]
    return ",".join(cols)


def test_missing_first_science_wave_gives_mask():
    J = 9
    times = ",".join(str(60.0 + 6 * j) for j in range(J))
    ys = ",".join(str(20.0 + j) for j in range(J))
    zs = "," + ",".join(str(10.0 + j) for j in range(1, J))
    ds = parse_wide([_header(J), f"c1,{times},{ys},{zs}"])
    rec = ds.records[0]
    assert ds.n_waves == 9 and ds.outcomes == ("y", "z")
    np.testing.assert_array_equal(rec.mask[1], [False] + [True] * 8)
    assert rec.mask[0].all()


def test_empty_file_is_a_structured_error(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    with pytest.raises(DataError, match="empty file"):
        load_wide_csv(p)


def test_header_only_is_rejected():
    with pytest.raises(DataError, match="no data rows"):
        parse_wide([_header(3)])


def test_malformed_numeric_reports_the_line():
    rows = [_header(3, "y"), "a,0,1,2,5,6,7", "b,0,1,2,5,x6,7"]
    with pytest.raises(DataError, match=r"line 3: column 'y2'"):
        parse_wide(rows)


def test_non_finite_values_are_rejected():
    with pytest.raises(DataError, match="not finite"):
        parse_wide([_header(2, "y"), "a,0,1,5,nan"])


def test_non_increasing_times_are_rejected():
    with pytest.raises(DataError, match="line 2: .*strictly increasing"):
        parse_wide([_header(3, "y"), "a,0,2,1,5,6,7"])


def test_observed_cell_needs_a_time():
    with pytest.raises(DataError, match="y2 is observed but t2 is empty"):
        parse_wide([_header(3, "y"), "a,0,,2,5,6,7"])


def test_inconsistent_row_length():
    with pytest.raises(DataError, match="line 3: expected 7 fields, found 6"):
        parse_wide([_header(3, "y"), "a,0,1,2,5,6,7", "b,0,1,2,5,6"])


def test_header_errors():
    with pytest.raises(DataError, match="first column"):
        parse_wide(["t1,y1", "0,1"])
    with pytest.raises(DataError, match="unrecognized column"):
        parse_wide(["id,t1,y1,w1", "a,0,1,2"])
    with pytest.raises(DataError, match="match"):
        parse_wide(["id,t1,t2,y1", "a,0,1,2"])


def test_duplicate_ids_are_rejected():
    with pytest.raises(DataError, match="duplicate id"):
        parse_wide([_header(2, "y"), "a,0,1,5,6", "a,0,1,5,6"])


def test_row_with_no_observation_is_rejected():
    with pytest.raises(DataError, match="no observed cell"):
        parse_wide([_header(2, "y"), "a,0,1,,"])


@st.composite
def datasets(draw):
    J = draw(st.integers(2, 6))
    K = draw(st.integers(1, 2))
    n = draw(st.integers(1, 6))
    recs = []
    for i in range(n):
        gaps = draw(st.lists(st.floats(0.01, 3.0), min_size=J, max_size=J))
        times = np.cumsum(gaps) + draw(st.floats(-5, 5))
        vals = np.array(draw(st.lists(st.floats(-1e6, 1e6), min_size=K * J, max_size=K * J))).reshape(K, J)
        mask = np.array(draw(st.lists(st.booleans(), min_size=K * J, max_size=K * J))).reshape(K, J)
        mask[0, 0] = True
        times = np.where(mask.any(axis=0), times, np.nan)
        recs.append(IndividualRecord(f"id{i}", times, vals, mask))
    return WideDataset(recs, J, ("y", "z")[:K])


@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(datasets())
def test_write_read_round_trip(tmp_path, ds):
    p = tmp_path / "round.csv"
    write_wide_csv(p, ds)
    back = load_wide_csv(p)
    assert back.n_waves == ds.n_waves and back.outcomes == ds.outcomes
    for a, b in zip(ds.records, back.records):
        assert a.id == b.id
        np.testing.assert_array_equal(a.mask, b.mask)
        np.testing.assert_array_equal(a.values[a.mask], b.values[b.mask])
        used = a.mask.any(axis=0)
        np.testing.assert_array_equal(a.times[used], b.times[used])


def test_long_to_wide():
    rows = ["id,wave,t,y,z", "a,1,0.0,5,7", "a,2,1.1,6,", "b,2,1.0,4,3", "b,1,0.1,3,2"]
    ds = long_to_wide(rows)
    assert ds.n_waves == 2 and len(ds) == 2
    a, b = ds.records
    np.testing.assert_array_equal(a.mask, [[True, True], [True, False]])
    np.testing.assert_array_equal(b.values, [[3, 4], [2, 3]])
    with pytest.raises(DataError, match="duplicate wave"):
        long_to_wide(["id,wave,t,y", "a,1,0,1", "a,1,0,1"])


def test_config_round_trip(tmp_path):
    cfg = RunConfig(model="mixed", random_knot="z", options=FitOptions(max_attempts=3, seed=11, knot_bounds={"y": (1.0, 8.0)}))
    p = tmp_path / "run.cfg"
    p.write_text(render_config(cfg))
    back = load_config(p)
    assert back == cfg


def test_config_rejects_unknown_keys_and_bad_values():
    with pytest.raises(ValueError, match="unknown configuration"):
        config_from_mapping({"colour": "blue"})
    with pytest.raises(ValueError, match="unknown model"):
        config_from_mapping({"model": "cubic"})
    with pytest.raises(ValueError, match="ci_level"):
        config_from_mapping({"ci_level": "1.5"})
    with pytest.raises(ValueError):
        config_from_mapping({"random_knot": "both"})


def test_build_spec_variants():
    rec = IndividualRecord.complete("a", np.arange(5.0), np.ones((2, 5)))
    ds = WideDataset([rec], 5, ("y", "z"))
    spec, _ = build_spec("mixed", ds, RunConfig(model="mixed", random_knot="z"))
    assert [o.shape for o in spec.outcomes] == [Shape.BILINEAR_FIXED, Shape.BILINEAR_RANDOM]
    spec, sub = build_spec("univariate-fixed", ds, RunConfig(model="univariate-fixed", outcome="z"))
    assert len(spec.outcomes) == 1 and sub.records[0].values.shape == (1, 5)
    spec, _ = build_spec("linear", ds)
    assert all(o.shape is Shape.LINEAR for o in spec.outcomes)
    with pytest.raises(ValueError, match="two outcomes"):
        build_spec("full", WideDataset([IndividualRecord.complete("a", np.arange(5.0), np.ones((1, 5)))], 5, ("y",)))


def test_condition_mapping_validation():
    base = {"n": "200", "n_waves": "6", "knot_y": "2.5", "knot_z": "2.5", "rho": "0.3", "scenario": "1", "resid_var": "1"}
    assert condition_from_mapping(base).n_waves == 6
    with pytest.raises(ValueError, match="not permitted"):
        condition_from_mapping({**base, "knot_y": "3.5", "knot_z": "5.5"})
    with pytest.raises(ValueError, match="missing key"):
        condition_from_mapping({k: v for k, v in base.items() if k != "rho"})
