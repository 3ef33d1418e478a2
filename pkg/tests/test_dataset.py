import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ehr_attention.dataset import (
    N_AGG,
    N_CHANNELS,
    N_HOURS,
    PLANTED_CHANNELS,
    BalanceError,
    Cohort,
    GroundTruth,
    ImputationError,
    IntegrityError,
    MiceImputer,
    ParseError,
    PipelineStateError,
    SchemaError,
    Stage,
    apply_mice,
    csv_header,
    fit_mice,
    inverse_minmax,
    load_cohort_csv,
    make_windows,
    mice_impute,
    minmax_normalize,
    save_cohort_csv,
    synth_generate,
    undersample_balance,
    vital_token,
)


def make_cohort(n, labels=None, seed=0, stage=Stage.RAW):
    rng = np.random.default_rng(seed)
    if labels is None:
        labels = np.arange(n) % 2
    return Cohort(
        stay_ids=[f"s{i}" for i in range(n)],
        vitals=rng.random((n, N_CHANNELS, N_HOURS)),
        aggregated=rng.random((n, N_AGG)),
        labels=np.asarray(labels),
        stage=stage,
    )


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def full_row(sid, label, value=0.5):
    return [sid, str(label)] + [str(value)] * (N_AGG + N_CHANNELS * N_HOURS)


# --- CSV -----------------------------------------------------------------


def test_header_layout():
    h = csv_header()
    assert h[:3] == ["stay_id", "label", "agg_0"]
    assert h[2 + N_AGG - 1] == "agg_195"
    assert h[2 + N_AGG] == "vit_c0_h1"
    assert h[2 + N_AGG + 23] == "vit_c0_h24"
    assert h[2 + N_AGG + 24] == "vit_c1_h1"
    assert h[-1] == "vit_c6_h24"


def test_load_two_complete_rows(tmp_path):
    p = tmp_path / "c.csv"
    write_rows(p, csv_header(), [full_row("a", 0), full_row("b", 1, 0.25)])
    c = load_cohort_csv(p)
    assert len(c) == 2
    assert not c.has_missing()
    assert c.labels.tolist() == [0, 1]
    assert c.vitals[1, 6, 23] == 0.25


def test_empty_cell_is_missing_at_channel_hour(tmp_path):
    p = tmp_path / "c.csv"
    row = full_row("a", 1)
    row[csv_header().index("vit_c3_h17")] = ""
    write_rows(p, csv_header(), [row])
    c = load_cohort_csv(p)
    assert np.isnan(c.vitals[0, 3, 16])
    assert np.isnan(c.vitals).sum() == 1
    assert not np.isnan(c.aggregated).any()


def test_195_aggregated_columns_is_schema_error(tmp_path):
    p = tmp_path / "c.csv"
    header = [h for h in csv_header() if h != "agg_195"]
    write_rows(p, header, [full_row("a", 0)[:-1]])
    with pytest.raises(SchemaError):
        load_cohort_csv(p)


def test_short_row_names_the_row(tmp_path):
    p = tmp_path / "c.csv"
    write_rows(p, csv_header(), [full_row("a", 0), full_row("b", 0)[:-3]])
    with pytest.raises(SchemaError, match="row 3"):
        load_cohort_csv(p)


def test_non_numeric_cell_reports_coordinates(tmp_path):
    p = tmp_path / "c.csv"
    row = full_row("a", 0)
    row[csv_header().index("agg_7")] = "abc"
    write_rows(p, csv_header(), [row])
    with pytest.raises(ParseError, match=r"row 2, column agg_7"):
        load_cohort_csv(p)


def test_duplicate_stay_id(tmp_path):
    p = tmp_path / "c.csv"
    write_rows(p, csv_header(), [full_row("a", 0), full_row("a", 1)])
    with pytest.raises(IntegrityError):
        load_cohort_csv(p)


def test_csv_round_trip_with_comment(tmp_path):
    c, _ = synth_generate(20, 0.5, seed=3)
    p = tmp_path / "c.csv"
    save_cohort_csv(c, p, comment="stamp")
    assert p.read_text().startswith("# stamp\n")
    back = load_cohort_csv(p)
    assert back.stay_ids == c.stay_ids
    np.testing.assert_array_equal(back.labels, c.labels)
    np.testing.assert_array_equal(back.vitals, c.vitals)
    np.testing.assert_array_equal(back.aggregated, c.aggregated)


# --- min-max -------------------------------------------------------------


def _imputed_with_column(values):
    n = len(values)
    c = make_cohort(n, stage=Stage.IMPUTED)
    c.aggregated[:, 0] = values
    return c


def test_minmax_column_246():
    out, _ = minmax_normalize(_imputed_with_column([2.0, 4.0, 6.0]))
    np.testing.assert_allclose(out.aggregated[:, 0], [0.0, 0.5, 1.0])
    assert out.stage == Stage.NORMALIZED


def test_minmax_identity_on_unit_column():
    col = [0.0, 0.3, 1.0]
    out, _ = minmax_normalize(_imputed_with_column(col))
    np.testing.assert_array_equal(out.aggregated[:, 0], col)


def test_minmax_constant_column_warns():
    out, reg = minmax_normalize(_imputed_with_column([5.0, 5.0]))
    np.testing.assert_array_equal(out.aggregated[:, 0], [0.0, 0.0])
    assert any("agg_0" in w for w in reg.warnings)


def test_minmax_vitals_pooled_per_channel():
    c = make_cohort(4, stage=Stage.IMPUTED)
    out, reg = minmax_normalize(c)
    for ch in range(N_CHANNELS):
        assert out.vitals[:, ch].min() == 0.0
        assert out.vitals[:, ch].max() == 1.0
    assert reg.vital_min.shape == (N_CHANNELS,)


def test_minmax_inverse_recovers():
    c = make_cohort(12, seed=5, stage=Stage.IMPUTED)
    c.aggregated *= 40.0
    c.vitals = c.vitals * 200.0 - 30.0
    out, reg = minmax_normalize(c)
    back = inverse_minmax(out, reg)
    np.testing.assert_allclose(back.vitals, c.vitals, atol=1e-9)
    np.testing.assert_allclose(back.aggregated, c.aggregated, atol=1e-9)


# --- MICE ----------------------------------------------------------------


def test_mice_no_missing_unchanged():
    c = make_cohort(6)
    out = mice_impute(c)
    np.testing.assert_array_equal(out.tokens(), c.tokens())
    assert out.stage == Stage.IMPUTED


def test_mice_linear_recovery():
    rng = np.random.default_rng(1)
    a = rng.normal(size=30)
    X = np.column_stack([a, 2 * a])
    X[4, 1] = np.nan
    Z = MiceImputer(rounds=10).fit_transform(X)
    assert abs(Z[4, 1] - 2 * a[4]) < 1e-8


def test_mice_mutually_missing_columns_converge():
    rng = np.random.default_rng(2)
    base = rng.normal(size=50)
    X = np.column_stack(
        [base, base + 0.3 * rng.normal(size=50), -base + 0.3 * rng.normal(size=50)]
    )
    X[rng.choice(50, 8, replace=False), 1] = np.nan
    X[rng.choice(50, 8, replace=False), 2] = np.nan
    imp = MiceImputer(rounds=10)
    imp.fit_transform(X)
    assert len(imp.history_) == 10
    assert imp.history_[-1] < 1e-6


def _reference_mice(X, rounds):
    """Plain chained equations: one least-squares solve per column per round."""
    miss = np.isnan(X)
    Z = np.where(miss, np.nanmean(X, axis=0), X)
    n, p = X.shape
    for _ in range(rounds):
        for j in range(p):
            mj = miss[:, j]
            if not mj.any():
                continue
            A = np.column_stack([np.delete(Z, j, axis=1), np.ones(n)])
            beta, *_ = np.linalg.lstsq(A[~mj], Z[~mj, j], rcond=None)
            Z[mj, j] = A[mj] @ beta
    return Z


@pytest.mark.parametrize("seed", range(3))
def test_mice_matches_reference_regressions(seed):
    rng = np.random.default_rng(seed)
    latent = rng.normal(size=(200, 4))
    X = latent @ rng.normal(size=(4, 25)) + 0.5 * rng.normal(size=(200, 25))
    X[rng.random(X.shape) < 0.05] = np.nan
    X[:, 0] = rng.normal(size=200)  # one complete column
    np.testing.assert_allclose(MiceImputer(rounds=5).fit_transform(X), _reference_mice(X, 5), atol=1e-9)


def test_mice_keeps_observed_entries():
    c, _ = synth_generate(40, 0.5, seed=4, missing_fraction=0.05)
    before = c.tokens()
    after = mice_impute(c, rounds=3).tokens()
    obs = ~np.isnan(before)
    np.testing.assert_array_equal(after[obs], before[obs])
    assert not np.isnan(after).any()


def test_mice_fully_missing_column_names_it():
    c = make_cohort(5)
    c.aggregated[:, 9] = np.nan
    with pytest.raises(ImputationError, match="agg_9"):
        mice_impute(c)


def test_mice_test_split_uses_training_fit():
    c, _ = synth_generate(60, 0.5, seed=8, missing_fraction=0.05)
    train, test = c.subset(range(40)), c.subset(range(40, 60))
    _, imp = fit_mice(train, rounds=3)
    out = apply_mice(test, imp)
    assert not out.has_missing()
    obs = ~np.isnan(test.tokens())
    np.testing.assert_array_equal(out.tokens()[obs], test.tokens()[obs])


# --- undersampling -------------------------------------------------------


def test_undersample_2089_to_614():
    labels = np.zeros(2089, dtype=int)
    labels[:307] = 1
    c = make_cohort(2089, labels=labels)
    out = undersample_balance(c, seed=0)
    assert len(out) == 614
    assert out.labels.sum() == 307


def test_undersample_balanced_unchanged():
    c = make_cohort(10)
    out = undersample_balance(c, seed=3)
    assert sorted(out.stay_ids) == sorted(c.stay_ids)


def test_undersample_deterministic():
    labels = np.array([1] * 10 + [0] * 90)
    c = make_cohort(100, labels=labels)
    a = undersample_balance(c, seed=11)
    b = undersample_balance(c, seed=11)
    assert len(a) == 20
    assert a.stay_ids == b.stay_ids


def test_undersample_zero_positives():
    with pytest.raises(BalanceError):
        undersample_balance(make_cohort(6, labels=np.zeros(6, int)), seed=0)


@settings(max_examples=40, deadline=None)
@given(n_pos=st.integers(1, 30), extra=st.integers(0, 30), seed=st.integers(0, 2**16))
def test_undersample_always_balanced(n_pos, extra, seed):
    labels = np.array([1] * n_pos + [0] * (n_pos + extra))
    out = undersample_balance(make_cohort(len(labels), labels=labels), seed)
    assert out.labels.sum() * 2 == len(out)


# --- windows -------------------------------------------------------------


def test_windows_per_record():
    c = make_cohort(3, stage=Stage.NORMALIZED)
    w = make_windows(c)
    assert len(w) == 35 * 3
    triples = {(x.stay_id, x.channel, x.start) for x in w}
    assert len(triples) == len(w)
    assert {x.start for x in w} == {1, 2, 3, 4, 5}


def test_window_hours():
    c = make_cohort(1, stage=Stage.NORMALIZED)
    w = make_windows(c)
    first = next(x for x in w if x.start == 1 and x.channel == 2)
    np.testing.assert_array_equal(first.past, c.vitals[0, 2, 0:12])
    np.testing.assert_array_equal(first.future, c.vitals[0, 2, 12:20])
    last = next(x for x in w if x.start == 5 and x.channel == 2)
    assert last.future[-1] == c.vitals[0, 2, 23]
    assert len(last.past) == 12 and len(last.future) == 8


# --- pipeline order ------------------------------------------------------


def test_pipeline_order_enforced():
    raw = make_cohort(6)
    with pytest.raises(PipelineStateError):
        make_windows(raw)
    with pytest.raises(PipelineStateError):
        minmax_normalize(raw)
    imputed = mice_impute(raw)
    with pytest.raises(PipelineStateError):
        undersample_balance(imputed, seed=0)
    normalized, _ = minmax_normalize(imputed)
    with pytest.raises(PipelineStateError):
        mice_impute(normalized)
    balanced = undersample_balance(normalized, seed=0)
    assert balanced.stage == Stage.BALANCED
    assert len(make_windows(balanced)) == 35 * len(balanced)


# --- synthetic generator -------------------------------------------------


def test_synth_label_split():
    c, _ = synth_generate(100, 0.5, seed=0)
    assert c.labels.sum() == 50


def test_synth_planted_channels_rise_late():
    c, _ = synth_generate(200, 0.5, seed=1, missing_fraction=0.0)
    pos = c.vitals[c.labels == 1]
    assert len(pos) >= 100
    for ch in PLANTED_CHANNELS:
        late = pos[:100, ch, 15:24].mean(axis=1)
        early = pos[:100, ch, 0:8].mean(axis=1)
        assert late.mean() > early.mean()


def test_synth_deterministic():
    a, ga = synth_generate(50, 0.3, seed=9)
    b, gb = synth_generate(50, 0.3, seed=9)
    np.testing.assert_array_equal(a.tokens(), b.tokens())
    assert a.stay_ids == b.stay_ids
    assert ga.important_tokens == gb.important_tokens


def test_synth_ground_truth():
    c, gt = synth_generate(30, 0.5, seed=2)
    assert vital_token(PLANTED_CHANNELS[0], 20) in gt.important_tokens
    assert len(gt.important_tokens) == 2 * 9 + 10
    back = GroundTruth.from_json(gt.to_json())
    assert back.important_tokens == gt.important_tokens and back.seed == 2


def test_synth_values_in_unit_interval():
    c, _ = synth_generate(40, 0.5, seed=6)
    t = c.tokens()
    assert np.nanmin(t) >= 0.0 and np.nanmax(t) <= 1.0
    assert c.has_missing()
