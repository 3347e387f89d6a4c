import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flowsplat.errors import BadHeader, BadMagic, NonContiguousKeyframe, TruncatedFile
from flowsplat.field import (
    DynamicGaussian, GaussianField, covariance_of, gmm_activation, inv_softplus, logit, normalize_time, opacity_at,
    position_at, read_field, rotation_at, sigmoid, softplus, write_field,
)

import oracles
from scenes import random_field, random_quats


def make_gaussian(rng, K=3, n_kf=1, birth=0):
    centers = {birth + k: rng.normal(size=3) for k in range(n_kf)}
    return DynamicGaussian(centers, birth, np.zeros(3), float(rng.normal()), rng.random(3), rng.normal(size=K),
                           rng.random(K), np.log(rng.uniform(0.05, 0.5, K)), random_quats(rng, (K,)),
                           float(rng.normal()))


def test_activation_helpers():
    x = np.linspace(-30, 30, 61)
    assert np.allclose(logit(sigmoid(x[np.abs(x) < 15])), x[np.abs(x) < 15], atol=1e-8)
    y = softplus(x[x > -10])
    assert np.allclose(inv_softplus(y), x[x > -10], atol=1e-8)
    assert np.all(softplus(x) > 0) and np.isfinite(softplus(1e4))


def test_covariance_is_rotated_diagonal(rng):
    q = random_quats(rng, (1,))[0]
    s = rng.normal(size=3)
    S = covariance_of(s, q)
    w, _ = np.linalg.eigh(S)
    assert np.allclose(np.sort(w), np.sort(np.exp(2 * s)))


def test_normalize_time_clamps():
    assert normalize_time(5.0, (0.0, 10.0)) == 0.5
    assert normalize_time(-1.0, (0.0, 10.0)) == 0.0
    assert normalize_time(11.0, (0.0, 10.0)) == 1.0
    assert normalize_time(3.0, (2.0, 2.0)) == 0.0


def test_opacity_matches_written_formula(rng):
    g = make_gaussian(rng)
    t = 0.37
    act = sum(math.log1p(math.exp(w)) * oracles.normal_pdf(t, m, math.exp(lt))
              for w, m, lt in zip(g.weight_logits, g.means, g.log_tau))
    expect = 1.0 / (1.0 + math.exp(-g.opacity_logit)) * (1.0 - math.exp(-math.exp(g.amplitude_log) * act))
    assert abs(opacity_at(g, t) - expect) < 1e-14
    assert abs(gmm_activation(g, t) - act) < 1e-12


@given(st.floats(-5, 5), arrays(float, 3, elements=st.floats(-8, 8)), arrays(float, 3, elements=st.floats(-1, 1)),
       arrays(float, 3, elements=st.floats(-4, 1)), st.floats(-4, 4), st.floats(-0.5, 1.5))
def test_opacity_bounded_by_base_opacity(o, w, mu, lt, amp, t):
    g = DynamicGaussian({0: np.zeros(3)}, 0, np.zeros(3), o, np.zeros(3), w, mu, lt,
                        np.tile([1.0, 0, 0, 0], (3, 1)), amp)
    a = opacity_at(g, t)
    base = sigmoid(o)
    assert 0.0 <= a <= base
    if np.exp(amp) * gmm_activation(g, normalize_time(t)) < 30.0:
        assert a < base  # strict while 1 - exp(-A act) is representably below 1


def test_opacity_approaches_base_with_large_amplitude(rng):
    g = make_gaussian(rng)
    g.means = np.array([0.5, 0.5, 0.5])
    g.amplitude_log = 10.0
    assert abs(opacity_at(g, 0.5) - sigmoid(g.opacity_logit)) < 1e-9


@given(arrays(float, (3, 4), elements=st.floats(-1, 1)).filter(lambda q: np.all(np.linalg.norm(q, axis=1) > 0.1)),
       arrays(float, 3, elements=st.floats(-6, 6)), st.floats(0, 1))
def test_rotation_is_unit(q, w, t):
    g = DynamicGaussian({0: np.zeros(3)}, 0, np.zeros(3), 0.0, np.zeros(3), w, np.array([0.1, 0.5, 0.9]),
                        np.log([0.1, 0.2, 0.3]), q, 0.0)
    r = rotation_at(g, t)
    assert abs(np.linalg.norm(r) - 1.0) < 1e-12


def test_rotation_is_sign_invariant(rng):
    g = make_gaussian(rng)
    r = rotation_at(g, 0.4)
    g.control_quats = g.control_quats * np.array([1, -1, 1])[:, None]
    r2 = rotation_at(g, 0.4)
    assert np.allclose(r, r2) or np.allclose(r, -r2)


def test_rotation_degenerate_blend_falls_back():
    q = np.array([[1.0, 0, 0, 0], [-1.0, 0, 0, 0]])
    # two opposite controls with the second flipped into the first's hemisphere, but zero weights on both
    g = DynamicGaussian({0: np.zeros(3)}, 0, np.zeros(3), 0.0, np.zeros(3), np.array([-800.0, -800.0]),
                        np.array([0.0, 1.0]), np.log([1e-3, 1e-3]), q, 0.0)
    r = rotation_at(g, 0.5)
    assert abs(np.linalg.norm(r) - 1.0) < 1e-12


def test_position_piecewise_linear(rng):
    g = make_gaussian(rng, n_kf=3, birth=1)
    times = [0.0, 0.2, 0.4, 0.8]
    x1, x2, x3 = g.keyframe_centers[1], g.keyframe_centers[2], g.keyframe_centers[3]
    assert np.array_equal(position_at(g, 0.2, times), x1)
    assert np.array_equal(position_at(g, 0.0, times), x1)  # clamped before birth
    assert np.array_equal(position_at(g, 0.9, times), x3)
    assert np.allclose(position_at(g, 0.3, times), 0.5 * (x1 + x2))
    assert np.allclose(position_at(g, 0.7, times), 0.25 * x2 + 0.75 * x3)


def test_field_state_matches_scalar_functions(rng):
    fld = random_field(rng, n_dynamic=6, n_keyframes=4)
    for t in (0.0, 0.3, 0.5, 0.99):
        st_ = fld.dynamic_state(t)
        for i in range(fld.n_dynamic):
            g = fld.dynamic_gaussian(i)
            assert np.allclose(st_.positions[i], position_at(g, t, fld.keyframe_times), atol=1e-14)
            assert abs(st_.opacity[i] - opacity_at(g, t, fld.time_normalizer)) < 1e-14
            assert np.allclose(st_.quats[i], rotation_at(g, t, fld.time_normalizer), atol=1e-14)


def test_constant_temporal_model(rng):
    fld = random_field(rng)
    fld.temporal_model = "constant"
    s = fld.dynamic_state(0.4)
    assert np.allclose(s.opacity, sigmoid(fld.dynamic["opacity_logits"]))


def test_dynamic_backward_matches_finite_differences(rng):
    fld = random_field(rng, n_dynamic=4, n_keyframes=3)
    t = 0.5 * (fld.keyframe_times[0] + fld.keyframe_times[1])
    gp = rng.normal(size=(4, 3))
    go = rng.normal(size=4)
    gq = rng.normal(size=(4, 4))

    def objective(f):
        s = f.dynamic_state(t)
        return np.sum(gp * s.positions) + np.sum(go * s.opacity) + np.sum(gq * s.quats)

    grads = fld.dynamic_backward(fld.dynamic_state(t), gp, go, gq)
    for key, g in grads.items():
        arr = fld.dynamic[key]
        for idx in zip(*np.nonzero(np.isfinite(arr))):
            old = arr[idx]
            arr[idx] = old + 1e-6
            fp = objective(fld)
            arr[idx] = old - 1e-6
            fm = objective(fld)
            arr[idx] = old
            fd = (fp - fm) / 2e-6
            assert abs(fd - g[idx]) <= 1e-6 + 1e-5 * abs(fd), (key, idx, fd, g[idx])


def test_keyframe_slots_contiguous():
    fld = GaussianField()
    fld.add_keyframe_slot(0, 0.1)
    with pytest.raises(NonContiguousKeyframe):
        fld.add_keyframe_slot(2, 0.2)
    with pytest.raises(NonContiguousKeyframe):
        fld.add_keyframe_slot(1, 0.1)
    with pytest.raises(NonContiguousKeyframe):
        fld.add_dynamic(np.zeros((1, 3)), 1, np.zeros((1, 3)), np.zeros((1, 3)), 0.0, 0.0, 0.5, -1.0, 0.0)


def test_new_slot_copies_previous_centers(rng):
    fld = random_field(rng, n_keyframes=2)
    before = fld.dynamic["centers"][:, -1].copy()
    fld.add_keyframe_slot(2, 0.99)
    assert np.array_equal(fld.dynamic["centers"][:, 2], before, equal_nan=True)
    init = rng.normal(size=(fld.n_dynamic, 3))
    fld.add_keyframe_slot(3, 1.5, init_centers=init)
    assert np.array_equal(fld.dynamic["centers"][:, 3], init)


def test_remove_and_copy(rng):
    fld = random_field(rng, n_static=6, n_dynamic=4)
    c = fld.copy()
    fld.remove_static(np.array([True, False, False, True, False, False]))
    fld.remove_dynamic(np.array([False, True, False, False]))
    assert fld.n_static == 4 and fld.n_dynamic == 3
    assert c.n_static == 6 and c.n_dynamic == 4


def test_field_roundtrip(tmp_path, rng):
    fld = random_field(rng, n_static=7, n_dynamic=5, n_keyframes=4)
    write_field(tmp_path / "f.f4dg", fld)
    back = read_field(tmp_path / "f.f4dg")
    assert back.K == fld.K and back.keyframe_times == fld.keyframe_times
    assert np.array_equal(back.dynamic_birth, fld.dynamic_birth)
    for key in fld.static:
        assert np.allclose(back.static[key], fld.static[key], atol=1e-6)
    for key in fld.dynamic:
        assert np.allclose(back.dynamic[key], fld.dynamic[key], atol=1e-6, equal_nan=True)
    # float32 storage: a second write is byte-identical
    write_field(tmp_path / "g.f4dg", back)
    assert (tmp_path / "f.f4dg").read_bytes() == (tmp_path / "g.f4dg").read_bytes()


def test_empty_field_roundtrip(tmp_path):
    fld = GaussianField()
    write_field(tmp_path / "e.f4dg", fld)
    back = read_field(tmp_path / "e.f4dg")
    assert back.n_static == 0 and back.n_dynamic == 0


def test_field_read_errors(tmp_path, rng):
    fld = random_field(rng)
    write_field(tmp_path / "f.f4dg", fld)
    raw = (tmp_path / "f.f4dg").read_bytes()
    (tmp_path / "a").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagic):
        read_field(tmp_path / "a")
    (tmp_path / "b").write_bytes(raw[:-3])
    with pytest.raises(TruncatedFile):
        read_field(tmp_path / "b")
    (tmp_path / "c").write_bytes(raw + b"\0")
    with pytest.raises(BadHeader):
        read_field(tmp_path / "c")
    (tmp_path / "d").write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(BadHeader):
        read_field(tmp_path / "d")
