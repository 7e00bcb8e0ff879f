from dataclasses import replace

import numpy as np
import pytest

from longwave import tensor as T
from longwave.cell import CellGeometry, CoefficientField, builtin_medium, make_medium
from longwave.effective import (EffectiveModel, Pipeline, algorithm1, bloch_dispersion_1d, c_recursion,
                                check_q, psd_correction, qf_coefficients, qf_multiplier,
                                savings_count)
from longwave.errors import ConfigError, ModelInvariantViolation, NumericalError
from longwave.tensor import SymTensor

import oracles as O


@pytest.fixture(scope="module")
def cos1d():
    return builtin_medium("cos1d", 1024)


@pytest.fixture(scope="module")
def cos1d_model(cos1d):
    return algorithm1(cos1d, 4, 0.1, naive_check=True)


@pytest.fixture(scope="module")
def laminate():
    return builtin_medium("laminate2d", (16, 128))


@pytest.fixture(scope="module")
def laminate_pipe(laminate):
    pipe = Pipeline(laminate)
    pipe.add_stage()
    return pipe


# one-dimensional medium -----------------------------------------------------------

def test_cos1d_a0(cos1d_model):
    assert cos1d_model.a0.values[0] == pytest.approx(O.COS1D_A0, abs=1e-12)


def test_cos1d_g_matches_frozen_oracle(cos1d_model):
    g2, g4 = (st.g2r.values[0] for st in cos1d_model.stages)
    assert g2 == pytest.approx(O.COS1D_G2, rel=1e-9)
    assert g4 == pytest.approx(O.COS1D_G4, rel=1e-8)


def test_cos1d_stages_match_direct_oracle(cos1d_model):
    _, g, _ = O.oracle_1d_chain(1024, 2)
    assert [st.g2r.values[0] for st in cos1d_model.stages] == pytest.approx(g, rel=1e-9)
    st1, st2 = cos1d_model.stages
    # a0 = 1, so deltastar = -q and a^2r vanishes in one dimension
    assert st1.checkq.values[0] == pytest.approx(-O.COS1D_G2, rel=1e-9)
    assert st1.deltastar == pytest.approx(O.COS1D_G2, rel=1e-9)
    for st in (st1, st2):
        assert abs(st.a2r.values[0]) < 1e-15
        assert st.b2r.values[0] == pytest.approx(st.deltastar, rel=1e-12)
        assert st.deltastar > 0


def test_cos1d_naive_check_recorded(cos1d_model):
    assert float(cos1d_model.info["naive_gap_1"]) < 1e-12
    assert float(cos1d_model.info["naive_gap_2"]) < 1e-12
    assert cos1d_model.info["cell_solves"] == 3
    assert cos1d_model.info["naive_solves"] == 5


def test_odd_order_moments_vanish(cos1d, laminate_pipe):
    pipe = Pipeline(cos1d)
    pipe.add_stage()
    pipe.add_stage()
    for r in (1, 2):
        assert pipe.odd_residual(r) < 1e-12
    assert laminate_pipe.odd_residual(1) < 1e-12


def test_naive_g_requires_previous_stages(cos1d):
    pipe = Pipeline(cos1d)
    with pytest.raises(NumericalError):
        pipe.naive_g(2)


def test_reduced_g_equals_direct_g(cos1d, laminate_pipe):
    pipe = Pipeline(cos1d)
    for r in (1, 2):
        st = pipe.add_stage()
        assert T.sym_equal(st.g2r, pipe.naive_g(r), 1e-12)
    st = laminate_pipe.stages[0]
    assert T.sym_equal(st.g2r, laminate_pipe.naive_g(1), 1e-12)


def test_constant_medium_has_no_dispersion():
    a = make_medium("constant:2.0:2", 8)
    m = algorithm1(a, 4, 0.1)
    assert np.allclose(m.a0.to_matrix(), 2 * np.eye(2), atol=1e-14)
    for st in m.stages:
        for t in st.tensors().values():
            assert t.max_abs() < 1e-12
        assert st.deltastar == 0.0


# laminate ----------------------------------------------------------------------

def test_laminate_a0(laminate_pipe):
    assert np.allclose(laminate_pipe.a0.to_matrix(), O.LAMINATE_A0, atol=1e-12)


def test_laminate_axis2_entries_match_1d(laminate_pipe):
    s = laminate_pipe.a.values[0, 0, 0]
    geom = CellGeometry((1.0,), (s.size,))
    one_d = Pipeline(CoefficientField(geom, s[None, None]))
    g1 = one_d.add_stage().g2r.values[0]
    assert laminate_pipe.stages[0].g2r[2, 2, 2, 2] == pytest.approx(g1, rel=1e-10)


def test_laminate_reflection_symmetry(laminate_pipe):
    st = laminate_pipe.stages[0]
    for t in (st.g2r, st.a2r, st.b2r, st.cr):
        for idx, v in t.items():
            if idx.count(1) % 2:
                assert abs(v) < 1e-13


def test_laminate_cell_solves(laminate_pipe):
    assert laminate_pipe.reduced_solves == savings_count(2, 1)["solved"] == 5


# positive-semidefinite correction ---------------------------------------------------

def _minimal_shift(q, A):
    lo, hi = 0.0, 1.0
    while T.min_eigenvalue(T.matricize(q + A * hi)) < 0:
        hi *= 2
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if T.min_eigenvalue(T.matricize(q + A * mid)) >= 0 else (mid, hi)
    return hi


def test_deltastar_is_tight_1d(cos1d_model):
    a0 = cos1d_model.a0
    for st in cos1d_model.stages:
        assert abs(T.min_eigenvalue(T.matricize(st.a2r))) <= 1e-12
        below = st.checkq + T.sym_power(a0, st.r + 1) * (st.deltastar * (1 - 1e-3))
        assert not T.is_psd(below)


def test_deltastar_bounds_minimal_shift_2d(laminate_pipe):
    # the eigenvalue-ratio shift is sufficient; in 2D it exceeds the minimal one
    st = laminate_pipe.stages[0]
    A = T.sym_power(laminate_pipe.a0, 2)
    assert st.deltastar > 0
    assert T.min_eigenvalue(T.matricize(st.a2r)) >= -1e-12
    minimal = _minimal_shift(st.checkq, A)
    assert minimal <= st.deltastar * (1 + 1e-12)
    assert T.min_eigenvalue(T.matricize(st.checkq + A * (minimal * (1 - 1e-6)))) < 0


def test_deltastar_zero_when_q_psd():
    a0 = SymTensor.from_matrix(np.diag([1.0, 2.0]))
    q = T.sym_power(a0, 2) * 0.3
    a2, b2, ds = psd_correction(q, a0)
    assert ds == 0.0 and b2.max_abs() == 0.0 and T.sym_equal(a2, q)


def test_margin_is_additive():
    a0 = SymTensor(1, 2, [1.0])
    q = SymTensor(1, 4, [-0.2])
    _, b2, ds = psd_correction(q, a0, margin=0.05)
    assert ds == pytest.approx(0.2) and b2.values[0] == pytest.approx(0.25)
    with pytest.raises(ConfigError):
        psd_correction(q, a0, margin=-1.0)


def test_psd_correction_argument_checks():
    a0 = SymTensor.from_matrix(np.eye(2))
    with pytest.raises(ValueError):
        psd_correction(SymTensor.zeros(2, 2), a0)
    with pytest.raises(NumericalError):
        psd_correction(SymTensor.zeros(2, 4), SymTensor.from_matrix(np.diag([1.0, 0.0])))


def test_check_q_and_c_recursion_by_hand():
    # d = 1 scalars: q^2 = g^4 + c^1 b^2, c^2 = a^4 - a0 b^4 - c^1 b^2
    one = lambda n, v: SymTensor(1, n, [v])  # noqa: E731
    q2 = check_q(2, one(6, 0.3), [one(4, -0.5)], [one(2, 0.2)])
    assert q2.values[0] == pytest.approx(0.3 - 0.1)
    c2 = c_recursion(one(2, 2.0), one(6, 1.0), [one(4, -0.5)], [one(2, 0.2), one(4, 0.1)])
    assert c2.values[0] == pytest.approx(1.0 - 2.0 * 0.1 + 0.5 * 0.2)
    with pytest.raises(ValueError):
        check_q(0, one(2, 1.0), [], [])
    with pytest.raises(NumericalError):
        check_q(2, one(6, 0.3), [], [])


def test_savings_count():
    assert savings_count(1, 2) == {"solved": 3, "naive": 5, "spared": 2}
    assert savings_count(2, 2) == {"solved": 9, "naive": 20, "spared": 11}
    with pytest.raises(ValueError):
        savings_count(0, 1)


# models --------------------------------------------------------------------------

def test_model_is_admissible(cos1d_model, laminate_pipe):
    assert cos1d_model.violations() == []
    assert laminate_pipe.model(2, 0.1).validate().violations() == []


def test_tampered_model_is_rejected(cos1d_model):
    st = cos1d_model.stages[0]
    bad = replace(cos1d_model, stages=(replace(st, b2r=st.b2r * 2.0),) + cos1d_model.stages[1:])
    assert any("constraint" in v for v in bad.violations())
    neg = replace(cos1d_model, stages=(replace(st, b2r=st.b2r * -1.0),))
    assert any("semidefinite" in v for v in neg.violations())
    with pytest.raises(ModelInvariantViolation):
        neg.validate()


def test_model_text_round_trip(tmp_path, cos1d_model, laminate_pipe):
    for m in (cos1d_model, laminate_pipe.model(2, 0.05)):
        back = EffectiveModel.loads(m.dumps())
        assert back == m
        assert back.dumps() == m.dumps()
    p = tmp_path / "m.txt"
    cos1d_model.save(p)
    assert EffectiveModel.load(p).stages[1].deltastar == cos1d_model.stages[1].deltastar


@pytest.mark.parametrize("text", [
    "", "d = 1\n", "[model]\nd = 1\nalpha = 0\n[a0]\nsymtensor d=1 n=2\n1 1 1.0\n",
    "[model]\nd = 1\nalpha = 2\nepsilon = 0.1\n[a0]\nsymtensor d=1 n=2\n1 1 1.0\n[stage 1]\ndeltastar = 0\n",
    "[model]\nd = 1\nalpha = 0\nepsilon = 0.1\n[a0]\nsymtensor d=1 n=2\n1 1 1.0\n[extra]\n",
])
def test_malformed_model_text(text):
    with pytest.raises(ConfigError):
        EffectiveModel.loads(text)


def test_missing_model_file(tmp_path):
    with pytest.raises(ConfigError):
        EffectiveModel.load(tmp_path / "absent.txt")


def test_truncate_and_epsilon(cos1d_model):
    m1 = cos1d_model.truncate(1)
    assert m1.s == 1 and m1.alpha == 2 and m1.stages[0] is cos1d_model.stages[0]
    assert cos1d_model.truncate(0).s == 0
    with pytest.raises(ValueError):
        cos1d_model.truncate(3)
    assert cos1d_model.with_epsilon(1.0).epsilon == 1.0


def test_truncated_pipeline_is_a_prefix(cos1d, cos1d_model):
    m1 = algorithm1(cos1d, 2, 0.1)
    assert m1 == cos1d_model.truncate(1)


def test_qf_multiplier(cos1d_model):
    k = np.array([0.0, 1.0, 2.0])
    b2, b4 = (st.b2r.values[0] for st in cos1d_model.stages)
    expected = 1 + 0.01 * b2 * k ** 2 + 1e-4 * b4 * k ** 4
    assert np.allclose(qf_multiplier(cos1d_model, k[:, None]), expected, rtol=1e-14)
    assert [q.values[0] for q in qf_coefficients(cos1d_model.stages)] == pytest.approx([-b2, b4])


def test_algorithm1_argument_checks(cos1d):
    with pytest.raises(ConfigError):
        algorithm1(cos1d, -2, 0.1)
    with pytest.raises(ConfigError):
        algorithm1(cos1d, 2, 0.0)
    assert algorithm1(cos1d, 1, 0.1).s == 0


# Bloch waves --------------------------------------------------------------------------

def test_bloch_small_k_expansion():
    a = builtin_medium("cos1d", 64)
    ks = np.array([0.02, 0.04, 0.06])
    w2 = np.array([bloch_dispersion_1d(a, k) for k in ks])
    # omega^2 = a0 k^2 + B4 k^4 + O(k^6)
    b4 = (w2 / ks ** 2 - 1.0) / ks ** 2
    assert b4[0] == pytest.approx(O.COS1D_BLOCH_B4, rel=1e-3)


def test_bloch_periodic_and_even():
    a = builtin_medium("cos1d", 32)
    assert bloch_dispersion_1d(a, 0.0) == 0.0
    assert bloch_dispersion_1d(a, 2 * np.pi) == 0.0
    w = bloch_dispersion_1d(a, 0.3)
    assert bloch_dispersion_1d(a, -0.3) == pytest.approx(w, rel=1e-12)
    assert bloch_dispersion_1d(a, 0.3 + 2 * np.pi) == pytest.approx(w, rel=1e-10)


def test_bloch_constant_medium_exact():
    a = make_medium("constant:3.0", 16)
    assert bloch_dispersion_1d(a, 0.5) == pytest.approx(0.75, rel=1e-13)


def test_bloch_rejects_2d(laminate):
    with pytest.raises(ConfigError):
        bloch_dispersion_1d(laminate, 0.1)
