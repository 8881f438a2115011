import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import linalg

from shapemotion.datagen import SynthConfig, load_dataset, synth_dataset, synth_motion
from shapemotion.errors import InvalidArgument
from shapemotion.eval_metrics import (ExtractorConfig, FeatureExtractor, attribute_error, diversity,
                                      frechet_distance, physics_metrics, recon_metrics, retrieval_metrics,
                                      summarize, train_feature_extractor)
from shapemotion.motion_repr import JointMotion
from shapemotion.shape_body import (FOOT_JOINTS, LIMB_BONES, PARENTS, build_shape_model, measure_attributes,
                                    sample_shape)

MODEL = build_shape_model()
BASE = MODEL.base_skeleton


def as_motion(pos):
    return JointMotion(pos, np.tile([1.0, 0, 0, 0], pos.shape[:2] + (1,)))


def physics_loop(pos, contact_height=0.05, skate_velocity=0.005):
    """Frame-by-frame reference for the four physics numbers."""
    t, j = pos.shape[:2]
    pen = flo = 0.0
    skating = 0
    for f in range(t):
        low = min(pos[f, k, 1] for k in range(j))
        pen += max(0.0, -low)
        flo += max(0.0, low)
        g = f + 1 if f + 1 < t else f
        h = f if f + 1 < t else f - 1
        for k in FOOT_JOINTS:
            speed = ((pos[g, k, 0] - pos[h, k, 0]) ** 2 + (pos[g, k, 2] - pos[h, k, 2]) ** 2) ** 0.5
            if pos[f, k, 1] < contact_height and speed > skate_velocity:
                skating += 1
                break
    variances = []
    for b in LIMB_BONES:
        lengths = [1000 * np.sqrt(np.sum((pos[f, b] - pos[f, PARENTS[b]]) ** 2)) for f in range(t)]
        m = sum(lengths) / t
        variances.append(sum((x - m) ** 2 for x in lengths) / t)
    return 100 * pen / t, 100 * flo / t, 100 * skating / t, sum(variances) / len(variances)


def test_physics_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        pos = rng.normal(0, 0.05, (12, 22, 3)) + np.array([0, 0.02, 0])
        got = physics_metrics(as_motion(pos), BASE)
        np.testing.assert_allclose([got.penetrate_cm, got.float_cm, got.skate_percent, got.bone_length_variance],
                                   physics_loop(pos), atol=1e-9)


def test_physics_definitions():
    motion = synth_motion("walk", BASE, T=32, seed=0)
    rep = physics_metrics(motion, BASE)
    assert rep.bone_length_variance < 1e-20 and rep.penetrate_cm < 1e-9
    pos = np.tile(BASE.rest_positions(), (10, 1, 1))
    pos[..., 1] += 0.02 - pos[..., 1].min()
    rep = physics_metrics(as_motion(pos), BASE)
    assert rep.float_cm == pytest.approx(2.0) and rep.penetrate_cm == 0.0 and rep.skate_percent == 0.0
    with pytest.raises(InvalidArgument):
        physics_metrics(as_motion(pos[:1]), BASE)


def test_skate_denominator_switch():
    pos = np.tile(BASE.rest_positions(), (10, 1, 1))
    pos[..., 1] -= pos[..., 1].min()
    pos[:5, :, 1] += 1.0                           # airborne for half the clip
    pos[5:, :, 0] += 0.01 * np.arange(5)[:, None]  # sliding on the ground after
    all_frames = physics_metrics(as_motion(pos), BASE).skate_percent
    contact_only = physics_metrics(as_motion(pos), BASE, skate_over_contact_frames=True).skate_percent
    assert all_frames == pytest.approx(50.0) and contact_only == pytest.approx(100.0)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-5, 5), st.floats(-5, 5), st.floats(-0.1, 0.1))
def test_penetrate_float_exclusive_and_invariant(yaw, dx, dz, lift):
    motion = synth_motion("run", BASE, T=24, seed=1)
    moved = motion.transformed(yaw, (dx, lift, dz))
    low = moved.positions[..., 1].min(axis=1)
    rep = physics_metrics(moved, BASE)
    assert rep.penetrate_cm == pytest.approx(100 * np.maximum(0, -low).mean())
    assert rep.float_cm == pytest.approx(100 * np.maximum(0, low).mean())
    assert np.all((np.maximum(0, -low) == 0) | (np.maximum(0, low) == 0))
    ref = physics_metrics(motion.transformed(0.0, (0.0, lift, 0.0)), BASE)
    np.testing.assert_allclose(list(rep.as_dict().values()), list(ref.as_dict().values()), atol=1e-8)


def test_recon_metrics():
    motion = synth_motion("squat", BASE, T=20, seed=0)
    zero = recon_metrics(motion, motion, BASE)
    assert zero.bone_length_diff_mm == 0.0 and zero.jitter_diff_m_per_s2 == 0.0
    pelvis = motion.positions[:, :1]
    scaled = as_motion(pelvis + 1.1 * (motion.positions - pelvis))
    expected = 0.1 * np.mean(BASE.bone_lengths()[1:]) * 1000
    assert recon_metrics(motion, scaled, BASE).bone_length_diff_mm == pytest.approx(expected, rel=1e-9)
    with pytest.raises(InvalidArgument):
        recon_metrics(motion, as_motion(motion.positions[:10]), BASE)


def test_constant_velocity_has_no_jitter():
    t = np.arange(16)[:, None, None]
    pos = np.tile(BASE.rest_positions(), (16, 1, 1)) + 0.03 * t * np.array([1.0, 0, 0.5])
    still = np.tile(BASE.rest_positions(), (16, 1, 1))
    assert recon_metrics(as_motion(still), as_motion(pos), BASE).jitter_diff_m_per_s2 == pytest.approx(0, abs=1e-9)


def test_frechet_identities():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(200, 5)), rng.normal(1.0, 2.0, size=(150, 5))
    assert frechet_distance(a, a) == pytest.approx(0.0, abs=1e-6)
    assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), rel=1e-9)
    assert frechet_distance(np.ones((10, 3)), np.ones((10, 3))) == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(InvalidArgument):
        frechet_distance(a[:1], b)
    with pytest.raises(InvalidArgument):
        frechet_distance(a, b[:, :4])


def test_frechet_closed_form_gaussians():
    rng = np.random.default_rng(2)
    d = frechet_distance(rng.normal(0, 1, 200000), rng.normal(1, 1, 200000))
    assert d == pytest.approx(1.0, abs=0.03)
    s1, s2 = 1.0, 3.0
    d = frechet_distance(rng.normal(0, s1, 200000), rng.normal(2, s2, 200000))
    assert d == pytest.approx(4 + s1 ** 2 + s2 ** 2 - 2 * s1 * s2, abs=0.1)


def test_frechet_matches_scipy_sqrtm():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(400, 6)), rng.normal(size=(300, 6)) @ rng.normal(size=(6, 6))
    ca, cb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    ref = (np.sum((a.mean(0) - b.mean(0)) ** 2) + np.trace(ca) + np.trace(cb)
           - 2 * np.trace(linalg.sqrtm(ca @ cb).real))
    assert frechet_distance(a, b) == pytest.approx(ref, rel=1e-6)


def test_retrieval_perfect_and_ordered():
    rng = np.random.default_rng(4)
    t = rng.normal(size=(96, 8))
    top1, top2, top3, mm = retrieval_metrics(t, t.copy())
    assert (top1, top2, top3, mm) == (1.0, 1.0, 1.0, 0.0)
    top1, top2, top3, _ = retrieval_metrics(t, t + rng.normal(0, 1.0, t.shape))
    assert top1 <= top2 <= top3
    with pytest.raises(InvalidArgument):
        retrieval_metrics(t[:31], t[:31])


def test_retrieval_random_features_hit_chance():
    rng = np.random.default_rng(5)
    n = 32 * 200
    top1, _, top3, _ = retrieval_metrics(rng.normal(size=(n, 4)), rng.normal(size=(n, 4)), seed=1)
    for p, got in ((1 / 32, top1), (3 / 32, top3)):
        sigma = np.sqrt(p * (1 - p) / n)
        assert abs(got - p) < 3 * sigma


def test_diversity_cases():
    assert diversity(np.ones((10, 3))) == 0.0
    d = 2.5
    feats = np.array([[0.0, 0], [0, 0], [d, 0], [d, 0]])
    # exhaustive pairing: mean over all orderings of the two disjoint halves
    outcomes = [np.mean([abs(p[0] - p[2]), abs(p[1] - p[3])]) for p in itertools.permutations([0, 0, d, d])]
    expect = np.mean(outcomes)
    assert expect == pytest.approx(2 * d / 3)
    values = [diversity(feats, seed=s) for s in range(3000)]
    assert set(np.round(values, 12)) <= set(np.round(outcomes, 12))
    assert np.mean(values) == pytest.approx(expect, abs=0.05)
    assert diversity(feats, seed=7) == diversity(feats, seed=7)
    with pytest.raises(InvalidArgument):
        diversity(feats[:3])


def test_attribute_error():
    beta = sample_shape(0)
    assert np.all(attribute_error(beta, beta, MODEL) == 0)
    other = sample_shape(1)
    direct = np.abs(measure_attributes(MODEL, other).as_array() - measure_attributes(MODEL, beta).as_array())
    np.testing.assert_allclose(attribute_error(other, beta, MODEL), direct, atol=1e-9)


def test_summarize():
    s = summarize([1.0, 2.0, 3.0, 4.0])
    assert s["mean"] == 2.5 and s["n"] == 4
    assert s["ci95"] == pytest.approx(1.96 * np.std([1, 2, 3, 4], ddof=1) / 2)
    assert summarize([5.0])["ci95"] == 0.0


@pytest.fixture(scope="module")
def extractor_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("ext") / "d"
    synth_dataset(SynthConfig(n_samples=64, seed=7, frames=32), root)
    records = load_dataset(root)
    return [r.text for r in records], [r.features().data for r in records]


def test_extractor_separates_matched_pairs(extractor_data, tmp_path):
    texts, motions = extractor_data
    cfg = ExtractorConfig(epochs=40, embed_dim=32)
    ext = train_feature_extractor(texts, motions, cfg, seed=0)
    zt, zm = ext.embed_texts(texts), ext.embed_motions(motions)
    assert zt.shape == zm.shape == (64, 32)
    sim = zt @ zm.T
    matched = np.mean(np.diag(sim))
    mismatched = (sim.sum() - np.trace(sim)) / (64 * 63)
    assert matched - mismatched > 0.1
    again = train_feature_extractor(texts, motions, cfg, seed=0)
    np.testing.assert_array_equal(again.embed_texts(texts), zt)
    ext.save(tmp_path / "e.ckpt")
    np.testing.assert_array_equal(FeatureExtractor.load(tmp_path / "e.ckpt").embed_motions(motions), zm)
    with pytest.raises(InvalidArgument):
        train_feature_extractor(texts[:1], motions[:1], cfg)
