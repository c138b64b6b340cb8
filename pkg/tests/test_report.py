import json
import math

import numpy as np
import pytest
from scipy import integrate

from snseg.errors import ValidationError
from snseg.report import (
    CorrelationResult,
    PairedSeries,
    build_report,
    correlate,
    paired_series_from_od,
    student_t_sf,
)


def series(x, y):
    x = np.asarray(x, dtype=float)
    return PairedSeries(labels=tuple(str(i) for i in range(len(x))), x=x, y=np.asarray(y, dtype=float))


def t_cdf_by_quadrature(t: float, df: int) -> float:
    """Independent oracle: integrate the Student-t density numerically.

    Integrates from 0 and uses symmetry so no heavy tail is truncated.
    """
    c = math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2)) / math.sqrt(df * math.pi)

    def pdf(u):
        return c * (1.0 + u * u / df) ** (-(df + 1) / 2)

    val, _err = integrate.quad(pdf, 0.0, abs(t), limit=200)
    return 0.5 + val if t >= 0 else 0.5 - val


class TestCorrelate:
    def test_perfect_line_n20(self):
        x = np.arange(20, dtype=float)
        res = correlate(series(x, 2 * x + 1))
        assert res.pearson_r == pytest.approx(1.0, abs=1e-12)
        assert res.r_squared == pytest.approx(1.0, abs=1e-12)
        assert res.p_value < 1e-12
        assert res.slope == pytest.approx(2.0) and res.intercept == pytest.approx(1.0)

    def test_anticorrelation(self):
        x = np.arange(10, dtype=float)
        res = correlate(series(x, -x))
        assert res.pearson_r == pytest.approx(-1.0, abs=1e-12)
        assert res.r_squared == pytest.approx(1.0, abs=1e-12)

    def test_worked_n5_example(self):
        res = correlate(series([1, 2, 3, 4, 5], [2, 1, 4, 3, 5]))
        assert res.n == 5
        assert res.pearson_r == pytest.approx(0.8, abs=1e-12)
        assert res.t_statistic == pytest.approx(0.8 * math.sqrt(3 / 0.36), abs=1e-9)
        assert res.p_value == pytest.approx(0.1040, abs=1e-3)
        # against the numerical-integration oracle
        oracle_p = 2 * (1 - t_cdf_by_quadrature(res.t_statistic, 3))
        assert res.p_value == pytest.approx(oracle_p, abs=1e-8)

    def test_r_squared_is_r_squared(self, rng):
        x = rng.normal(size=12)
        y = rng.normal(size=12)
        res = correlate(series(x, y))
        assert res.r_squared == pytest.approx(res.pearson_r ** 2, abs=1e-12)

    def test_symmetric_in_r_and_affine_invariant(self, rng):
        x = rng.normal(size=15)
        y = x + 0.3 * rng.normal(size=15)
        a = correlate(series(x, y))
        b = correlate(series(y, x))
        assert a.pearson_r == pytest.approx(b.pearson_r, abs=1e-12)
        c = correlate(series(3.0 * x + 5.0, -2.0 * y + 1.0))
        assert abs(c.pearson_r) == pytest.approx(abs(a.pearson_r), abs=1e-12)
        assert c.pearson_r == pytest.approx(-a.pearson_r, abs=1e-12)

    def test_degenerate_inputs(self):
        with pytest.raises(ValidationError, match="x series is constant"):
            correlate(series([1, 1, 1, 1], [1, 2, 3, 4]))
        with pytest.raises(ValidationError, match="y series is constant"):
            correlate(series([1, 2, 3, 4], [2, 2, 2, 2]))
        with pytest.raises(ValidationError, match="n >= 3"):
            correlate(series([1, 2], [1, 2]))

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError, match="non-finite"):
            series([1, 2, np.nan], [1, 2, 3])


class TestStudentT:
    @pytest.mark.parametrize("df", [3, 10, 18])
    def test_cdf_matches_quadrature_oracle(self, df):
        for t in np.linspace(-10, 10, 41):
            mine = 1.0 - student_t_sf(float(t), df)
            oracle = t_cdf_by_quadrature(float(t), df)
            assert mine == pytest.approx(oracle, abs=1e-8)

    def test_p_monotone_in_abs_t(self):
        for df in (3, 10, 18):
            ps = [2 * student_t_sf(t, df) for t in np.linspace(0.1, 8, 30)]
            assert all(a > b for a, b in zip(ps, ps[1:]))

    def test_symmetry(self):
        assert student_t_sf(0.0, 5) == pytest.approx(0.5)
        assert student_t_sf(1.3, 7) == pytest.approx(1 - student_t_sf(-1.3, 7), abs=1e-14)


class TestBuildReport:
    def _correlations(self):
        x = np.arange(8, dtype=float)
        s = series(x, 1.1 * x + 0.2)
        return {"SNr": s}, {"SNr": correlate(s)}

    def test_two_column_metrics_table(self, tmp_path):
        metrics = {
            "with_elastic": {"iou": 0.9, "dice": 0.94, "precision": 0.93, "recall": 0.95},
            "without_elastic": {"iou": 0.89, "dice": 0.93, "precision": 0.92, "recall": 0.94},
        }
        doc = build_report(tmp_path, metric_reports=metrics)
        table = (tmp_path / "metrics_table.csv").read_text().splitlines()
        assert table[0] == "metric,with_elastic,without_elastic"
        assert len(table) == 5
        assert doc["missing_inputs"] == ["correlations"]

    def test_single_run_marks_absent_column(self, tmp_path):
        doc = build_report(tmp_path, metric_reports={"with_elastic": {"iou": 0.9, "dice": 0.94,
                                                                      "precision": 0.93, "recall": 0.95}})
        table = (tmp_path / "metrics_table.csv").read_text().splitlines()
        assert table[0] == "metric,with_elastic"
        assert "correlations" in doc["missing_inputs"]

    def test_reference_constants_are_embedded_and_labeled(self, tmp_path):
        build_report(tmp_path)
        doc = json.loads((tmp_path / "report.json").read_text())
        ref = doc["published_reference"]
        assert ref["test_set_metrics"]["with_elastic"] == {
            "iou": 0.79, "dice": 0.87, "recall": 0.88, "precision": 0.86}
        assert ref["correlation_r_squared"] == {"SNr": 0.8678, "SNCD": 0.7928}
        assert "not reproducible" in ref["note"]

    def test_regeneration_is_byte_identical(self, tmp_path):
        od_series, correlations = self._correlations()
        build_report(tmp_path / "a", od_series=od_series, correlations=correlations)
        build_report(tmp_path / "b", od_series=od_series, correlations=correlations)
        for name in ("report.json", "metrics_table.csv", "correlation_SNr.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_correlation_csv_has_fit_column(self, tmp_path):
        od_series, correlations = self._correlations()
        build_report(tmp_path, od_series=od_series, correlations=correlations)
        rows = (tmp_path / "correlation_SNr.csv").read_text().splitlines()
        assert rows[0] == "label,manual_od,model_od,fit"
        assert len(rows) == 9


class TestPairedSeriesFromOd:
    def test_joins_on_sample_and_region(self):
        manual = [
            {"sample_id": "a", "region": "SNr", "normalized_od": "0.4"},
            {"sample_id": "a", "region": "SNCD", "normalized_od": "0.3"},
            {"sample_id": "b", "region": "SNr", "normalized_od": "0.5"},
        ]
        model = [
            {"sample_id": "a", "region": "SNr", "normalized_od": "0.41"},
            {"sample_id": "b", "region": "SNr", "normalized_od": "0.52"},
            {"sample_id": "c", "region": "SNr", "normalized_od": "0.9"},
        ]
        snr = paired_series_from_od(manual, model, "SNr")
        assert snr.n == 2 and snr.x.tolist() == [0.4, 0.5]
        pooled = paired_series_from_od(manual, model, None)
        assert pooled.n == 2  # SNCD has no model row

    def test_no_shared_pairs_raises(self):
        with pytest.raises(ValidationError, match="no shared"):
            paired_series_from_od(
                [{"sample_id": "a", "region": "SNr", "normalized_od": "1"}],
                [{"sample_id": "b", "region": "SNr", "normalized_od": "1"}],
                "SNr",
            )
