import json
import math

import numpy as np
import pytest

from retinacam.camscore import cam_score, cam_scores_for_bundle
from retinacam.errors import OutOfBounds
from retinacam.morphometry import disc_cup_geometry
from retinacam.synth import (CATEGORICAL_MARGINALS, PhantomSpec, VesselSpec, analytic_truth, expected_cam_score,
                             generate_cohort, rasterize_phantom, sample_factors, sample_phantom,
                             simulate_cam_records, synth_saliency, truth_json, vessel_truth, with_effect)
from retinacam.vesselgraph import build_graph


def spec_with(*vessels, shape=(400, 400), disc=(50, 50), cup=(20, 20)):
    return PhantomSpec(shape, (200, 200), disc, cup, tuple(vessels))


def test_disc_raster_geometry():
    b = rasterize_phantom(spec_with())
    g = disc_cup_geometry(b.disc, b.cup)
    assert abs(g.disc_width - 101) <= 1 and abs(g.disc_height - 101) <= 1
    assert not (b.cup & ~b.disc).any()


def test_constant_width_vessel_measures_exactly():
    v = VesselSpec("vein", 120.0, 0.2, 1.5, width=5.0)
    b = rasterize_phantom(spec_with(v))
    (seg,) = build_graph(b.vein, "vein").segments
    # chords across a curved raster stroke scatter by a pixel; their mean is what the width budget covers
    assert seg.widths[10:-10].mean() == pytest.approx(5.0, abs=0.1)
    straight = np.zeros((40, 100), bool)
    straight[18:23, 10:90] = True
    (bar,) = build_graph(straight, "vein").segments
    assert np.all(bar.widths[3:-3] == 5.0)


def test_rasterize_deterministic_and_mirrored():
    spec = sample_phantom(np.random.default_rng(3), shape=(912, 912))
    a, b = rasterize_phantom(spec, seed=1), rasterize_phantom(spec, seed=1)
    assert all(np.array_equal(a.mask(k), b.mask(k)) for k in ("artery", "vein", "disc", "cup"))
    r = rasterize_phantom(spec, laterality="right")
    assert np.array_equal(r.artery[:, ::-1], a.artery) and r.laterality == "right"


def test_out_of_bounds():
    with pytest.raises(OutOfBounds):
        rasterize_phantom(spec_with(VesselSpec("artery", 195.0, 0.0, 1.0)))


def test_spec_validation_and_dict_round_trip():
    with pytest.raises(ValueError):
        PhantomSpec(cup_axes=(50, 10), disc_axes=(40, 40))
    with pytest.raises(ValueError):
        spec_with(VesselSpec("artery", 100.0, 0.0, 1.0, width=0.5))
    spec = sample_phantom(np.random.default_rng(0))
    assert PhantomSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec
    wider = with_effect(spec, vein_width=2)
    assert all(w.width == v.width + (2 if v.vessel_class == "vein" else 0)
               for v, w in zip(spec.vessels, wider.vessels))


def test_truth_closed_forms():
    r, dth = 100.0, 1.2
    t = vessel_truth((0, 0), VesselSpec("artery", r, 0.3, dth))
    assert t["arc_length"] == pytest.approx(r * dth, rel=1e-9)
    assert t["distance_tortuosity"] == pytest.approx(dth / (2 * math.sin(dth / 2)), rel=1e-9)
    assert t["sqcurv_tortuosity"] == pytest.approx(1 / r ** 2, rel=1e-6)
    assert t["tortuosity_density"] == 0.0 and t["inflections"] == 0
    semi = vessel_truth((0, 0), VesselSpec("vein", 50.0, 0.0, math.pi))
    assert semi["arc_length"] == pytest.approx(50 * math.pi, rel=1e-6)
    assert semi["distance_tortuosity"] == pytest.approx(math.pi / 2, rel=1e-6)


@pytest.mark.parametrize("m", [1, 2, 3, 4])
def test_truth_inflections(m):
    v = VesselSpec("artery", 150.0, 0.0, 2.0, amplitude=25.0, periods=float(m))
    t = vessel_truth((0, 0), v)
    assert abs(t["inflections"] - (2 * m - 1)) <= 1
    assert t["distance_tortuosity"] >= 1 and t["tortuosity_density"] > 0


def test_truth_zone_values():
    spec = sample_phantom(np.random.default_rng(2))
    truth = analytic_truth(spec)
    assert truth["vertical_cdr"] == truth["cup"]["height"] / truth["disc"]["height"]
    for zone, z in truth["zones"].items():
        for cls in ("artery", "vein"):
            # zone C contains zone B, so it also holds the inner ring of vessels
            assert z[cls]["n_vessels"] == (3 if zone == "B" else 6)
            assert 0 < z[cls]["density"] < 1 and z[cls]["dist_tort"] >= 1
    doc = json.loads(truth_json(spec, "S1", "left"))
    assert doc["subject_id"] == "S1" and PhantomSpec.from_dict(doc["spec"]) == spec


def test_saliency_noiseless():
    spec = spec_with(VesselSpec("artery", 120.0, 0.2, 1.5), VesselSpec("vein", 150.0, 2.5, 1.5))
    b = rasterize_phantom(spec)
    f = synth_saliency(b, {"disc"})
    scores = {r.structure: r.score for r in cam_scores_for_bundle(b, f)}
    assert scores == {"artery": 0.0, "vein": 0.0, "disc": 1.0, "cup": 1.0}
    assert np.array_equal(synth_saliency(spec, {"disc"}), f)
    with pytest.raises(ValueError):
        synth_saliency(b, {"disc"}, inside_level=0.1, outside_level=0.5)


def test_saliency_noise_matches_tail_probability():
    b = rasterize_phantom(spec_with(VesselSpec("artery", 120.0, 0.2, 1.5)))
    for t in (0.45, 0.55, 0.6):
        expected_in = expected_cam_score(0.55, t, 0.1)
        expected_out = expected_cam_score(0.3, t, 0.1)
        obs_in, obs_out = [], []
        for seed in range(20):
            f = synth_saliency(b, {"disc"}, 0.55, 0.3, noise_sd=0.1, seed=seed)
            obs_in.append(cam_score(b.disc, f, t))
            obs_out.append(cam_score(b.artery, f, t))
            # the cup sits inside the disc, so a disc-only map covers it at least as well as its rim
            assert cam_score(b.cup, f, t) >= cam_score(b.disc & ~b.cup, f, t) - 0.1
        assert np.mean(obs_in) == pytest.approx(expected_in, abs=0.02)
        assert np.mean(obs_out) == pytest.approx(expected_out, abs=0.02)
    assert expected_cam_score(0.9, 0.5, 0.0) == 1.0 and expected_cam_score(0.1, 0.5, 0.0) == 0.0


def test_factor_marginals():
    df = sample_factors(4000, np.random.default_rng(0))
    for f, probs in CATEGORICAL_MARGINALS.items():
        p = np.asarray(probs) / sum(probs)
        obs = df[f].value_counts(normalize=True)
        from retinacam.learn.cohort import CATEGORICAL
        for level, q in zip(CATEGORICAL[f], p):
            assert obs.get(level, 0.0) == pytest.approx(q, abs=0.02), (f, level)
    assert df["age"].mean() == pytest.approx(55.51, abs=0.5)


def test_generate_cohort():
    sim = generate_cohort(6, {"smoking": {"morphometry": {"vein_width": 2.0}}}, {"bmi": 0.5}, seed=4,
                          saliency_factors=("sex",))
    assert len(sim.manifest) == 12 and set(sim.manifest["eye"]) == {"left", "right"}
    assert "saliency_sex" in sim.manifest.columns and len(sim.saliency) == 12
    again = generate_cohort(6, {"smoking": {"morphometry": {"vein_width": 2.0}}}, {"bmi": 0.5}, seed=4,
                            saliency_factors=("sex",))
    assert sim.cohort.equals(again.cohort) and sim.specs == again.specs
    base = generate_cohort(6, None, {"bmi": 0.5}, seed=4)
    for key, spec in sim.specs.items():
        smoker = sim.cohort.query("subject_id == @key[0]").iloc[0]["smoking"] == "smoked"
        for v, b in zip(spec.vessels, base.specs[key].vessels):
            assert v.width - b.width == (2.0 if smoker and v.vessel_class == "vein" else 0.0)
    # anatomy does not depend on which saliency factors are requested
    plain = generate_cohort(6, {"smoking": {"morphometry": {"vein_width": 2.0}}}, {"bmi": 0.5}, seed=4)
    assert plain.specs == sim.specs
    with pytest.raises(ValueError):
        generate_cohort(2, missing_rates={"age": 1.0})


def test_simulated_cam_records():
    recs, grouping = simulate_cam_records(10, 12, shift={"disc": 0.3}, seed=1)
    assert len(grouping) == 22 and len(recs) == 22 * 4
    assert recs["score"].between(0, 1).all()
    a, b = simulate_cam_records(10, 12, shift={"disc": 0.3}, seed=1)
    assert a.equals(recs)
