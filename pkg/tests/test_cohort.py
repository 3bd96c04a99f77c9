import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neutrodose.cohort import (
    AGE_EDGES,
    ANC0_EDGES,
    DECISION_STATES_PER_CLASS,
    LEAF,
    N_CLASSES,
    N_DECISION_STATES,
    TOTAL_STATES_PER_CLASS,
    CovariateClass,
    PatientState,
    class_of,
    decode_local,
    decode_state,
    encode_local,
    encode_state,
    export_cohort,
    grade_of,
    import_cohort,
    patient_from_json,
    patient_to_json,
    sample_patient,
)
from neutrodose.pkpd import DomainError, PatientCovariates, PopulationModel


class TestStateSpaceArithmetic:
    def test_per_class_counts(self):
        assert DECISION_STATES_PER_CLASS == 3906
        assert TOTAL_STATES_PER_CLASS == 19531

    def test_global_counts(self):
        assert N_CLASSES == 32
        assert N_DECISION_STATES == 124_992
        assert N_CLASSES * TOTAL_STATES_PER_CLASS == 624_992

    def test_empty_history_class0_is_zero(self):
        state = PatientState(CovariateClass(0, 0, 0), ())
        assert encode_state(state) == 0

    def test_leaf_marker(self):
        state = PatientState(CovariateClass(0, 0, 0), (0, 1, 2, 3, 4, 0))
        assert encode_state(state) == LEAF
        assert state.is_leaf

    def test_exhaustive_round_trip(self):
        for idx in range(DECISION_STATES_PER_CLASS):
            assert encode_local(decode_local(idx)) == idx
        # class-offset structure makes the global round trip follow
        for cls_idx in (0, 7, 31):
            for local in (0, 1, 5, 3905):
                g = cls_idx * DECISION_STATES_PER_CLASS + local
                state = decode_state(g)
                assert encode_state(state) == g
                assert state.cls.index == cls_idx

    def test_class_bijection(self):
        seen = set()
        for idx in range(N_CLASSES):
            cls = CovariateClass.from_index(idx)
            assert cls.index == idx
            seen.add((cls.sex, cls.age_bin, cls.anc0_bin))
        assert len(seen) == N_CLASSES

    def test_history_too_long(self):
        with pytest.raises(DomainError):
            PatientState(CovariateClass(0, 0, 0), (0,) * 7)


class TestGradeOf:
    @pytest.mark.parametrize(
        "value,grade",
        [(0.49, 4), (2.0, 0), (1.0, 2), (0.5, 3), (1.5, 1), (5.0, 0), (0.0, 4)],
    )
    def test_thresholds(self, value, grade):
        assert grade_of(value) == grade

    def test_negative_rejected(self):
        with pytest.raises(DomainError):
            grade_of(-0.1)

    @settings(max_examples=200, deadline=None)
    @given(
        a=st.floats(min_value=0, max_value=30),
        b=st.floats(min_value=0, max_value=30),
    )
    def test_monotone_nonincreasing(self, a, b):
        lo, hi = sorted((a, b))
        assert grade_of(lo) >= grade_of(hi)


class TestClassOf:
    def test_binning_examples(self):
        cov = PatientCovariates(sex=1, age=55.0, bsa=1.8, bili=7.0, anc0=3.0)
        cls = class_of(cov)
        assert (cls.sex, cls.age_bin, cls.anc0_bin) == (1, 1, 1)
        assert cls.age_range == (50.0, 60.0)
        assert cls.anc0_range == (2.5, 5.0)

    @settings(max_examples=200, deadline=None)
    @given(
        sex=st.integers(0, 1),
        age=st.floats(min_value=18.0, max_value=99.99),
        anc0=st.floats(min_value=1.5, max_value=24.99),
    )
    def test_partition(self, sex, age, anc0):
        cov = PatientCovariates(sex=sex, age=age, bsa=1.8, bili=7.0, anc0=anc0)
        cls = class_of(cov)
        a0, a1 = cls.age_range
        n0, n1 = cls.anc0_range
        assert a0 <= age < a1
        assert n0 <= anc0 < n1

    def test_outside_range(self):
        cov = PatientCovariates(sex=0, age=110.0, bsa=1.8, bili=7.0, anc0=5.0)
        with pytest.raises(DomainError):
            class_of(cov)


class TestSamplePatient:
    def test_class_truncation(self, model):
        cls = CovariateClass(1, 1, 2)  # male, [50,60), ANC0 [5,10)
        rng = np.random.default_rng(11)
        for _ in range(10_000):
            cov, _ = sample_patient(rng, model, cls)
            assert cov.sex == 1
            assert 50.0 <= cov.age < 60.0
            assert 5.0 <= cov.anc0 < 10.0
            assert 1.4 <= cov.bsa <= 2.4

    def test_zero_variance_gives_typical(self, ref_cov):
        model = PopulationModel(
            omega2=(0.0,) * 7, pi2=(0.0, 0.0), sigma2_pd=0.0
        )
        rng = np.random.default_rng(1)
        _, p1 = sample_patient(rng, model, CovariateClass(0, 1, 2))
        assert np.all(p1.eta == 0.0)
        assert np.all(p1.kappa == 0.0)
        assert p1.circ0 == pytest.approx(p1.theta[0, 12])

    def test_eta_slope_variance(self, model):
        rng = np.random.default_rng(23)
        n = 20_000
        draws = np.empty(n)
        for i in range(n):
            _, params = sample_patient(rng, model, None)
            draws[i] = params.eta[6]  # Slope position
        var = draws.var(ddof=1)
        se = model.omega2[6] * np.sqrt(2.0 / n)
        assert abs(var - 0.2007) < 3 * se

    def test_class_index_consistency(self, model):
        rng = np.random.default_rng(5)
        for idx in (0, 13, 31):
            cov, _ = sample_patient(rng, model, idx)
            assert class_of(cov).index == idx


class TestCohortIO:
    def test_round_trip_bit_exact(self, model, tmp_path):
        rng = np.random.default_rng(3)
        patients = [sample_patient(rng, model, None) for _ in range(5)]
        path = tmp_path / "cohort.jsonl"
        export_cohort(path, patients)
        loaded = import_cohort(path, model)
        for (c1, p1), (c2, p2) in zip(patients, loaded):
            assert c1 == c2
            assert np.array_equal(p1.eta, p2.eta)
            assert np.array_equal(p1.kappa, p2.kappa)
            assert p1.circ0 == p2.circ0
            assert np.array_equal(p1.theta, p2.theta)

    def test_single_line_round_trip(self, model, ref_cov):
        rng = np.random.default_rng(9)
        cov, params = sample_patient(rng, model, 7)
        line = patient_to_json(cov, params)
        cov2, params2 = patient_from_json(line, model)
        assert cov == cov2
        assert np.array_equal(params.theta, params2.theta)
