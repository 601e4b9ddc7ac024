import numpy as np
import pytest

from textvo.errors import UnknownReference
from textvo.geometry import PinholeCamera, Pose, TextPlane, backproject
from textvo.worldmap import N_MIN, WorldMap


class FakePatch:
    def __init__(self, quad):
        self.quad = np.asarray(quad, dtype=float)


def simple_map(n_kf=3):
    wm = WorldMap()
    for k in range(n_kf):
        wm.insert_keyframe(timestamp=k * 0.1, pose=Pose.identity())
    return wm


def test_ids_monotonic_and_unique():
    wm = simple_map(5)
    assert sorted(wm.keyframes) == [0, 1, 2, 3, 4]
    assert wm.last_keyframe_id == 4
    p0 = wm.insert_point([0, 0, 1.0])
    p1 = wm.insert_point([0, 0, 2.0])
    assert (p0.id, p1.id) == (0, 1)


def test_observation_cross_links():
    wm = simple_map(2)
    pt = wm.insert_point([0, 0, 2.0], observations=[(0, (10.0, 20.0))])
    assert wm.keyframes[0].point_observations == [(0, (10.0, 20.0))]
    wm.add_point_observation(pt.id, 1, (11.0, 21.0))
    assert len(pt.observations) == 2
    wm.check_integrity()


def test_unknown_references_rejected():
    wm = simple_map(1)
    with pytest.raises(UnknownReference):
        wm.insert_point([0, 0, 1.0], observations=[(99, (0.0, 0.0))])
    with pytest.raises(UnknownReference):
        wm.insert_keyframe(0.0, Pose.identity(),
                           point_observations=[(5, (0.0, 0.0))])
    with pytest.raises(UnknownReference):
        wm.add_point_observation(0, 0, (0.0, 0.0))
    plane = TextPlane(np.array([0.0, 0.0, 0.5]), host_id=7)
    with pytest.raises(UnknownReference):
        wm.insert_text(plane, FakePatch(np.zeros((4, 2))))


def test_text_promotion_gate():
    wm = simple_map(6)
    plane = TextPlane(np.array([0.0, 0.0, 0.5]), host_id=0)
    obj = wm.insert_text(plane, FakePatch(np.zeros((4, 2))))
    for k in range(N_MIN - 1):
        wm.record_text_observation(obj.id, k)
    assert wm.promote_text(obj.id) == "candidate"      # count 4: not yet
    wm.record_text_observation(obj.id, N_MIN - 1)
    assert wm.promote_text(obj.id) == "active"          # count 5: promoted
    wm.record_text_observation(obj.id, N_MIN - 1)       # duplicate ignored
    assert obj.observation_count == N_MIN
    wm.check_integrity()


def test_remove_point_cleans_links():
    wm = simple_map(2)
    pt = wm.insert_point([0, 0, 2.0], observations=[(0, (1.0, 1.0)),
                                                    (1, (2.0, 2.0))])
    plane = TextPlane(np.array([0.0, 0.0, 0.5]), host_id=0)
    obj = wm.insert_text(plane, FakePatch(np.zeros((4, 2))))
    obj.point_ids.append(pt.id)
    wm.remove_point(pt.id)
    assert not wm.map_points
    assert wm.keyframes[0].point_observations == []
    assert obj.point_ids == []
    wm.check_integrity()
    with pytest.raises(UnknownReference):
        wm.remove_point(pt.id)


def build_window_map():
    """12 keyframes; point j observed by keyframes j and j+1; a text hosted
    at keyframe 2 observed by keyframes 2..8."""
    wm = WorldMap()
    for k in range(12):
        wm.insert_keyframe(k * 0.1, Pose.identity())
    for j in range(11):
        wm.insert_point([0, 0, float(j + 1)],
                        observations=[(j, (0.0, 0.0)), (j + 1, (1.0, 1.0))])
    plane = TextPlane(np.array([0.0, 0.0, 0.5]), host_id=2)
    obj = wm.insert_text(plane, FakePatch(np.zeros((4, 2))),
                         observed_keyframes=list(range(2, 9)))
    obj.status = "active"
    return wm, obj


def test_local_window_small_map_all_mutable():
    wm = simple_map(3)
    mutable, fixed, points, texts = wm.local_window(center=2, size=7)
    assert mutable == {0, 1, 2} and fixed == set()


def test_local_window_selection():
    wm, obj = build_window_map()
    mutable, fixed, points, texts = wm.local_window(center=11, size=7)
    assert mutable == set(range(5, 12))
    # point 4 links keyframes 4 and 5, so keyframe 4 enters as fixed observer
    assert points == set(range(4, 11))
    assert 4 in fixed and fixed.isdisjoint(mutable)
    # text observed by mutable kfs 5..8; host keyframe 2 pulled in as fixed
    assert texts == {obj.id}
    assert 2 in fixed


def test_local_window_excludes_stale():
    wm, obj = build_window_map()
    mutable, fixed, points, texts = wm.local_window(center=4, size=3)
    assert mutable == {2, 3, 4}
    assert points == set(range(1, 5))
    assert 0 not in points  # observed only by fixed keyframes 0 and 1
    a = wm.local_window(center=4, size=3)
    b = wm.local_window(center=4, size=3)
    assert a == b  # deterministic


def test_text_world_quad_positive_depth():
    cam = PinholeCamera(fx=460.0, fy=460.0, cx=319.5, cy=239.5,
                        width=640, height=480)
    wm = simple_map(1)
    theta = np.array([0.05, -0.02, 0.4])
    quad = np.array([(200.0, 180.0), (400.0, 185.0),
                     (395.0, 300.0), (205.0, 295.0)])
    obj = wm.insert_text(TextPlane(theta, host_id=0), FakePatch(quad))
    corners, normal = wm.text_world_quad(obj.id, cam)
    assert np.all(corners[:, 2] > 0)  # identity pose: world == host frame
    assert np.linalg.norm(normal) == pytest.approx(1.0)
    for px, c in zip(quad, corners):
        assert np.allclose(c, backproject(theta, cam.normalize(px)))


def test_export_round_trips_json():
    import json
    cam = PinholeCamera(fx=460.0, fy=460.0, cx=319.5, cy=239.5,
                        width=640, height=480)
    wm, obj = build_window_map()
    obj.patch.quad = np.array([(200.0, 180.0), (400.0, 185.0),
                               (395.0, 300.0), (205.0, 295.0)])
    doc = json.loads(json.dumps(wm.to_dict(camera=cam), sort_keys=True))
    assert len(doc["keyframes"]) == 12
    assert len(doc["map_points"]) == 11
    text = doc["text_objects"][0]
    assert text["status"] == "active" and text["host_id"] == 2
    assert len(text["world_corners"]) == 4
