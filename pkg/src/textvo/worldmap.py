"""World state: keyframes, map points, text objects, and the local window.

Single-writer contract: tracking and bundle adjustment alternate on one
thread; snapshots for export are taken between phases.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import UnknownReference
from .geometry import backproject

N_MIN = 5               # keyframe observations required to activate a text
LOCAL_WINDOW_SIZE = 7   # mutable keyframes in local bundle adjustment


@dataclass
class Keyframe:
    id: int
    timestamp: float
    pose: object                      # world-from-camera
    pyramid: object = None
    point_observations: list = field(default_factory=list)  # (point id, (x, y))


@dataclass
class MapPoint:
    id: int
    position: np.ndarray              # world xyz
    observations: list = field(default_factory=list)        # (keyframe id, (x, y))
    outlier_count: int = 0


@dataclass
class TextObject:
    id: int
    plane: object                     # TextPlane (theta + host keyframe id)
    patch: object                     # TextPatch (host-side photometric data)
    status: str = "candidate"         # candidate | active | rejected
    observed_keyframes: list = field(default_factory=list)
    semantic_string: str = ""
    point_ids: list = field(default_factory=list)  # map points inside the quad

    @property
    def observation_count(self):
        return len(self.observed_keyframes)


class WorldMap:
    def __init__(self):
        self.keyframes = {}
        self.map_points = {}
        self.text_objects = {}
        self._next_kf = 0
        self._next_pt = 0
        self._next_text = 0
        self.last_keyframe_id = None

    # -- insertion ---------------------------------------------------------

    def insert_keyframe(self, timestamp, pose, pyramid=None,
                        point_observations=()):
        for pid, _ in point_observations:
            if pid not in self.map_points:
                raise UnknownReference(f"map point {pid}")
        kf = Keyframe(self._next_kf, float(timestamp), pose, pyramid,
                      list(point_observations))
        self._next_kf += 1
        self.keyframes[kf.id] = kf
        self.last_keyframe_id = kf.id
        for pid, px in kf.point_observations:
            self.map_points[pid].observations.append((kf.id, px))
        return kf

    def insert_point(self, position, observations=()):
        for kid, _ in observations:
            if kid not in self.keyframes:
                raise UnknownReference(f"keyframe {kid}")
        pt = MapPoint(self._next_pt, np.asarray(position, dtype=float),
                      list(observations))
        self._next_pt += 1
        self.map_points[pt.id] = pt
        for kid, px in pt.observations:
            self.keyframes[kid].point_observations.append((pt.id, px))
        return pt

    def add_point_observation(self, point_id, keyframe_id, pixel):
        if point_id not in self.map_points:
            raise UnknownReference(f"map point {point_id}")
        if keyframe_id not in self.keyframes:
            raise UnknownReference(f"keyframe {keyframe_id}")
        self.map_points[point_id].observations.append((keyframe_id, pixel))
        self.keyframes[keyframe_id].point_observations.append((point_id, pixel))

    def insert_text(self, plane, patch, semantic_string="",
                    observed_keyframes=()):
        if plane.host_id not in self.keyframes:
            raise UnknownReference(f"host keyframe {plane.host_id}")
        for kid in observed_keyframes:
            if kid not in self.keyframes:
                raise UnknownReference(f"keyframe {kid}")
        obj = TextObject(self._next_text, plane, patch,
                         observed_keyframes=list(observed_keyframes),
                         semantic_string=semantic_string)
        self._next_text += 1
        self.text_objects[obj.id] = obj
        return obj

    def record_text_observation(self, text_id, keyframe_id):
        if text_id not in self.text_objects:
            raise UnknownReference(f"text {text_id}")
        if keyframe_id not in self.keyframes:
            raise UnknownReference(f"keyframe {keyframe_id}")
        obj = self.text_objects[text_id]
        if keyframe_id not in obj.observed_keyframes:
            obj.observed_keyframes.append(keyframe_id)

    def promote_text(self, text_id):
        """Flip candidate -> active once observed in >= N_MIN keyframes."""
        if text_id not in self.text_objects:
            raise UnknownReference(f"text {text_id}")
        obj = self.text_objects[text_id]
        if obj.status == "candidate" and obj.observation_count >= N_MIN:
            obj.status = "active"
        return obj.status

    def remove_point(self, point_id):
        pt = self.map_points.pop(point_id, None)
        if pt is None:
            raise UnknownReference(f"map point {point_id}")
        for kid, _ in pt.observations:
            kf = self.keyframes.get(kid)
            if kf is not None:
                kf.point_observations = [
                    (pid, px) for pid, px in kf.point_observations
                    if pid != point_id]
        for obj in self.text_objects.values():
            if point_id in obj.point_ids:
                obj.point_ids.remove(point_id)

    # -- queries -----------------------------------------------------------

    def local_window(self, center, size=LOCAL_WINDOW_SIZE):
        """(mutable kf ids, fixed kf ids, point ids, text ids) around center.

        The most recent `size` keyframes up to `center` are mutable; older
        keyframes observing any selected point or text are included as fixed.
        """
        if center not in self.keyframes:
            raise UnknownReference(f"keyframe {center}")
        ids = sorted(k for k in self.keyframes if k <= center)
        mutable = set(ids[-size:])
        points = {pid for pid, pt in self.map_points.items()
                  if any(kid in mutable for kid, _ in pt.observations)}
        texts = {tid for tid, obj in self.text_objects.items()
                 if obj.status == "active"
                 and any(kid in mutable for kid in obj.observed_keyframes)}
        fixed = set()
        for pid in points:
            fixed.update(kid for kid, _ in self.map_points[pid].observations
                         if kid not in mutable)
        for tid in texts:
            obj = self.text_objects[tid]
            fixed.update(kid for kid in obj.observed_keyframes
                         if kid not in mutable)
            if obj.plane.host_id not in mutable:
                fixed.add(obj.plane.host_id)
        return mutable, fixed, points, texts

    def text_world_quad(self, text_id, camera):
        """3D world corners and unit normal of a text quad."""
        obj = self.text_objects[text_id]
        host = self.keyframes[obj.plane.host_id]
        theta = obj.plane.theta
        corners = []
        for px in obj.patch.quad:
            m = camera.normalize(px)
            corners.append(host.pose.transform(backproject(theta, m)))
        n_host = theta / np.linalg.norm(theta)
        return np.array(corners), host.pose.R @ n_host

    def check_integrity(self):
        """Raise UnknownReference/AssertionError if any invariant is broken."""
        for kf in self.keyframes.values():
            for pid, _ in kf.point_observations:
                if pid not in self.map_points:
                    raise UnknownReference(f"kf {kf.id} -> point {pid}")
        for pt in self.map_points.values():
            for kid, _ in pt.observations:
                if kid not in self.keyframes:
                    raise UnknownReference(f"point {pt.id} -> kf {kid}")
        for obj in self.text_objects.values():
            if obj.plane.host_id not in self.keyframes:
                raise UnknownReference(f"text {obj.id} -> host {obj.plane.host_id}")
            for kid in obj.observed_keyframes:
                if kid not in self.keyframes:
                    raise UnknownReference(f"text {obj.id} -> kf {kid}")
            for pid in obj.point_ids:
                if pid not in self.map_points:
                    raise UnknownReference(f"text {obj.id} -> point {pid}")
            assert obj.status != "active" or obj.observation_count >= N_MIN

    # -- export --------------------------------------------------------------

    def to_dict(self, camera=None):
        """JSON-serializable snapshot of the map."""
        out = {
            "keyframes": [
                {
                    "id": kf.id,
                    "timestamp": kf.timestamp,
                    "quaternion_wxyz": [float(v) for v in kf.pose.q],
                    "translation": [float(v) for v in kf.pose.t],
                }
                for kf in sorted(self.keyframes.values(), key=lambda k: k.id)
            ],
            "map_points": [
                {"id": pt.id, "position": [float(v) for v in pt.position]}
                for pt in sorted(self.map_points.values(), key=lambda p: p.id)
            ],
            "text_objects": [],
        }
        for obj in sorted(self.text_objects.values(), key=lambda t: t.id):
            rec = {
                "id": obj.id,
                "theta": [float(v) for v in obj.plane.theta],
                "host_id": obj.plane.host_id,
                "status": obj.status,
                "semantic_string": obj.semantic_string,
                "point_ids": list(obj.point_ids),
            }
            if camera is not None:
                corners, normal = self.text_world_quad(obj.id, camera)
                rec["world_corners"] = [[float(v) for v in c] for c in corners]
                rec["world_normal"] = [float(v) for v in normal]
            out["text_objects"].append(rec)
        return out
