import dataclasses
import json
import math

import numpy as np
import pytest

from conftest import make_scene
from tgforecast.scene import (
    AgentTrack,
    DegenerateHeading,
    LaneSegment,
    RawScene,
    SceneError,
    Transform,
    augment_noise,
    augment_scale,
    filter_lanes,
    normalize_scene,
    read_scene,
    scene_from_record,
    scene_to_record,
    vector_features,
    vectorize,
    write_scene,
)


def rigid(scene: RawScene, angle: float, shift) -> RawScene:
    tf = Transform(angle, shift)
    agents = [AgentTrack(a.agent_id, a.times, tf.apply(a.xy), a.is_aoi) for a in scene.agents]
    lanes = [LaneSegment(l.lane_id, tf.apply(l.centerline), l.is_intersection, l.turn_direction) for l in scene.lanes]
    return RawScene(scene.scene_id, agents, lanes, scene.aoi_id, tf.apply(scene.gt_future))


class TestNormalize:
    def test_last_observed_position_maps_to_origin(self):
        ns = normalize_scene(make_scene(origin=(5.0, 3.0)))
        assert np.allclose(ns.aoi.position_at(19), 0.0, atol=1e-12)

    def test_heading_aligned_with_x(self):
        ns = normalize_scene(make_scene(heading=1.1, origin=(-7.0, 2.0)))
        xy = ns.aoi.xy
        d = xy[19] - xy[18]
        assert d[0] > 0 and abs(d[1]) < 1e-12

    def test_already_normalized_is_identity(self):
        raw = make_scene()
        ns = normalize_scene(raw)
        for a, b in zip(raw.agents, ns.agents):
            np.testing.assert_allclose(a.xy, b.xy, atol=1e-12)
        np.testing.assert_allclose(ns.gt_future, raw.gt_future, atol=1e-12)

    def test_rigid_transform_invariance(self):
        raw = make_scene(heading=0.3, origin=(12.0, -4.0))
        moved = rigid(raw, math.radians(37), (100.0, -40.0))
        a, b = normalize_scene(raw), normalize_scene(moved)
        for x, y in zip(a.agents, b.agents):
            np.testing.assert_allclose(x.xy, y.xy, atol=1e-9)
        for x, y in zip(a.lanes, b.lanes):
            np.testing.assert_allclose(x.centerline, y.centerline, atol=1e-9)
        np.testing.assert_allclose(a.gt_future, b.gt_future, atol=1e-9)

    def test_transform_round_trip(self):
        raw = make_scene(heading=2.0, origin=(3.0, 9.0))
        ns = normalize_scene(raw)
        np.testing.assert_allclose(ns.transform.invert(ns.gt_future), raw.gt_future, atol=1e-9)

    def test_stationary_aoi_rejected(self):
        raw = make_scene()
        raw.agents[0] = AgentTrack("aoi", np.arange(20), np.ones((20, 2)), True)
        with pytest.raises(DegenerateHeading):
            normalize_scene(raw)

    def test_heading_uses_last_distinct_positions(self):
        raw = make_scene()
        xy = raw.agents[0].xy.copy()
        xy[19] = xy[18]  # AoI stopped for the last step
        raw.agents[0] = AgentTrack("aoi", np.arange(20), xy, True)
        ns = normalize_scene(raw)
        d = ns.aoi.xy[18] - ns.aoi.xy[17]
        assert abs(d[1]) < 1e-12 and d[0] > 0


class TestFilterLanes:
    def scene_with_lane_at(self, x):
        aoi = AgentTrack("aoi", np.arange(20), np.stack([np.linspace(-1.9, 0, 20), np.zeros(20)], axis=1), True)
        lane = LaneSegment("far", [[x, 0.0], [x + 5.0, 0.0]])
        return normalize_scene(RawScene("f", [aoi], [lane], "aoi"))

    def test_just_inside_kept(self):
        assert len(filter_lanes(self.scene_with_lane_at(49.9)).lanes) == 1

    def test_exactly_on_radius_dropped(self):
        assert len(filter_lanes(self.scene_with_lane_at(50.0)).lanes) == 0

    def test_manhattan_not_euclidean(self):
        aoi = AgentTrack("aoi", np.arange(20), np.stack([np.linspace(-1.9, 0, 20), np.zeros(20)], axis=1), True)
        # Euclidean 42.4 m, Manhattan 60 m
        lane = LaneSegment("diag", [[30.0, 30.0], [31.0, 31.0]])
        out = filter_lanes(normalize_scene(RawScene("f", [aoi], [lane], "aoi")))
        assert out.lanes == []

    def test_lane_through_origin_kept(self):
        aoi = AgentTrack("aoi", np.arange(20), np.stack([np.linspace(-1.9, 0, 20), np.zeros(20)], axis=1), True)
        lane = LaneSegment("here", [[-5.0, 0.0], [5.0, 0.0]])
        assert len(filter_lanes(normalize_scene(RawScene("f", [aoi], [lane], "aoi"))).lanes) == 1

    def test_any_agent_versus_aoi_variant(self):
        aoi = AgentTrack("aoi", np.arange(20), np.stack([np.linspace(-1.9, 0, 20), np.zeros(20)], axis=1), True)
        other = AgentTrack("o", np.arange(20), np.tile([[80.0, 0.0]], (20, 1)))
        lane = LaneSegment("near_other", [[75.0, 0.0], [76.0, 0.0]])
        ns = normalize_scene(RawScene("f", [aoi, other], [lane], "aoi"))
        assert len(filter_lanes(ns, variant="any_agent").lanes) == 1
        assert len(filter_lanes(ns, variant="aoi").lanes) == 0

    def test_subset_and_idempotent(self, scene):
        ns = normalize_scene(scene)
        once = filter_lanes(ns, 20.0)
        twice = filter_lanes(once, 20.0)
        ids = [l.lane_id for l in ns.lanes]
        assert all(l.lane_id in ids for l in once.lanes)
        assert [l.lane_id for l in twice.lanes] == [l.lane_id for l in once.lanes]


class TestVectorize:
    def test_lane_with_three_points_has_two_vectors(self):
        aoi = AgentTrack("aoi", np.arange(20), np.stack([np.linspace(-1.9, 0, 20), np.zeros(20)], axis=1), True)
        lane = LaneSegment("l", [[0, 0], [1, 0], [2, 1]])
        polys = vectorize(normalize_scene(RawScene("v", [aoi], [lane], "aoi")))
        assert len(polys.polylines[0]) == 2

    def test_full_agent_has_nineteen_ordered_vectors(self, scene):
        polys = vectorize(normalize_scene(scene))
        aoi_poly = polys.polylines[polys.n_lanes]
        assert len(aoi_poly) == 19
        assert np.all(np.diff(aoi_poly.t_start) > 0)

    def test_gaps_are_skipped(self):
        aoi = AgentTrack("aoi", np.arange(20), np.stack([np.linspace(-1.9, 0, 20), np.zeros(20)], axis=1), True)
        other = AgentTrack("o", [4, 5, 9], [[1, 1], [2, 1], [3, 1]])
        polys = vectorize(normalize_scene(RawScene("v", [aoi, other], [], "aoi")))
        p = polys.polylines[1]
        assert p.t_start.tolist() == [4, 5] and p.t_end.tolist() == [5, 9]

    def test_vectors_chain(self, scene):
        for p in vectorize(normalize_scene(scene)).polylines:
            np.testing.assert_array_equal(p.starts[1:], p.ends[:-1])

    def test_single_observation_is_flagged_empty(self):
        aoi = AgentTrack("aoi", np.arange(20), np.stack([np.linspace(-1.9, 0, 20), np.zeros(20)], axis=1), True)
        other = AgentTrack("o", [7], [[1, 1]])
        polys = vectorize(normalize_scene(RawScene("v", [aoi, other], [], "aoi")))
        assert polys.polylines[1].empty and polys.empty_flags == [1]

    def test_lane_order_only_permutes(self, scene):
        ns = normalize_scene(scene)
        a = vectorize(ns)
        b = vectorize(dataclasses.replace(ns, lanes=ns.lanes[::-1]))
        for p, q in zip(a.polylines[: a.n_lanes], b.polylines[: b.n_lanes][::-1]):
            np.testing.assert_array_equal(p.starts, q.starts)

    def test_feature_attributes(self, scene):
        polys = vectorize(normalize_scene(scene))
        lane_f = vector_features(polys.polylines[2])
        assert lane_f[0, 6] == 1.0 and lane_f[0, 9] == 1.0 and lane_f[0, 11] == 1.0
        aoi_f = vector_features(polys.polylines[polys.n_lanes])
        assert aoi_f[0, 8] == 1.0
        assert aoi_f[-1, 14] == pytest.approx(1.0)


class TestAugment:
    def test_scale_identity(self, scene):
        ns = normalize_scene(scene)
        out = augment_scale(ns, 1.0)
        np.testing.assert_array_equal(out.gt_future, ns.gt_future)

    def test_scale_point(self):
        aoi = AgentTrack("aoi", np.arange(20), np.stack([np.linspace(-1.9, 0, 20), np.zeros(20)], axis=1), True)
        lane = LaneSegment("l", [[4.0, -8.0], [5.0, -8.0]])
        out = augment_scale(normalize_scene(RawScene("a", [aoi], [lane], "aoi")), 0.75)
        np.testing.assert_allclose(out.lanes[0].centerline[0], [3.0, -6.0], atol=1e-12)
        np.testing.assert_allclose(out.aoi.position_at(19), [0.0, 0.0], atol=1e-12)

    @pytest.mark.parametrize("s", [0.7, 1.3])
    def test_scale_out_of_range(self, scene, s):
        with pytest.raises(ValueError):
            augment_scale(normalize_scene(scene), s)

    def test_noise_sigma_zero_identity(self, scene):
        ns = normalize_scene(scene)
        out = augment_noise(ns, 0.0, seed=3)
        for a, b in zip(ns.agents, out.agents):
            np.testing.assert_array_equal(a.xy, b.xy)

    def test_noise_deterministic_and_targets_clean(self, scene):
        ns = normalize_scene(scene)
        a, b = augment_noise(ns, 0.2, seed=9), augment_noise(ns, 0.2, seed=9)
        np.testing.assert_array_equal(a.agents[1].xy, b.agents[1].xy)
        np.testing.assert_array_equal(a.gt_future, ns.gt_future)

    def test_noise_spread(self):
        aoi = AgentTrack("aoi", np.arange(20), np.stack([np.linspace(-1.9, 0, 20), np.zeros(20)], axis=1), True)
        lane = LaneSegment("l", np.stack([np.arange(50000.0), np.zeros(50000)], axis=1))
        ns = normalize_scene(RawScene("n", [aoi], [lane], "aoi"))
        out = augment_noise(ns, 0.2, seed=0)
        offsets = (out.lanes[0].centerline - ns.lanes[0].centerline).ravel()
        assert offsets.size == 100000
        assert abs(offsets.std() - 0.2) < 0.02 * 0.2


class TestRecords:
    def test_round_trip(self, scene, tmp_path):
        write_scene(scene, tmp_path / "s.json")
        back = read_scene(tmp_path / "s.json")
        assert back.scene_id == scene.scene_id and back.aoi_id == "aoi"
        for a, b in zip(scene.agents, back.agents):
            np.testing.assert_array_equal(a.xy, b.xy)
            np.testing.assert_array_equal(a.times, b.times)
        np.testing.assert_array_equal(back.gt_future, scene.gt_future)
        assert back.lanes[2].turn_direction == "left" and back.lanes[2].is_intersection

    def test_missing_field_is_named(self, scene):
        rec = scene_to_record(scene)
        del rec["aoi_id"]
        with pytest.raises(SceneError, match="aoi_id"):
            scene_from_record(rec)

    def test_duplicate_aoi_rejected(self, scene):
        rec = scene_to_record(scene)
        rec["agents"].append(json.loads(json.dumps(rec["agents"][0])))
        with pytest.raises(SceneError):
            scene_from_record(rec)

    def test_aoi_must_be_fully_observed(self, scene):
        rec = scene_to_record(scene)
        rec["agents"][0]["steps"] = rec["agents"][0]["steps"][1:]
        with pytest.raises(SceneError, match="observed"):
            scene_from_record(rec)

    def test_repeated_lane_point_rejected(self, scene):
        rec = scene_to_record(scene)
        rec["lanes"][0]["centerline"].insert(1, rec["lanes"][0]["centerline"][0])
        with pytest.raises(SceneError):
            scene_from_record(rec)
