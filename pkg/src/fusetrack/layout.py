"""Inertial sensor glove layout and the token-graph distance matrix.

Twelve 6-axis sensors are rigidly mounted on skeleton segments. Physical
adjacency (shared strap or one bridged joint) defines an undirected graph;
hop counts over that graph give the geodesic distances used as an attention
prior. The camera stream is token 0 and attaches to the graph through one
designated sensor at distance 1.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .configio import ConfigError, load_packaged_yaml, require_schema
from .rotations import euler_zyx_deg_to_matrix
from .skeleton import HandSkeleton

N_SENSORS = 12
N_TOKENS = N_SENSORS + 1  # vision token at index 0, sensors shifted by one

DEFAULT_LAYOUT_FILE = "sensor_layout_12.yaml"


@dataclass
class SensorLayout:
    name: str
    sensor_names: list[str]
    segments: np.ndarray        # (12,) skeleton joint index each sensor rides on
    offsets: np.ndarray         # (12, 3) meters, in the segment frame
    rotations: np.ndarray       # (12, 3, 3) segment-from-sensor mounting rotation
    adjacency: list[tuple[int, int]]
    vision_attachment: int      # sensor index the camera token attaches to
    finger_sensors: dict[str, list[int]]

    @property
    def n_sensors(self) -> int:
        return len(self.sensor_names)

    def sensor_index(self, name: str) -> int:
        return self.sensor_names.index(name)


def layout_from_config(cfg: dict, skeleton: HandSkeleton) -> SensorLayout:
    require_schema(cfg, 1, "sensor layout")
    sensors = cfg["sensors"]
    if len(sensors) != N_SENSORS:
        raise ConfigError(f"{len(sensors)} sensors, expected {N_SENSORS}")
    names = [s["name"] for s in sensors]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate sensor names")
    seg_idx = []
    for s in sensors:
        seg = s["segment"]
        if seg not in skeleton.joint_names:
            raise ConfigError(f"sensor {s['name']}: unknown segment {seg!r}")
        seg_idx.append(skeleton.joint_names.index(seg))
    offsets = np.array([s["offset"] for s in sensors], dtype=np.float64)
    rotations = np.stack([
        euler_zyx_deg_to_matrix(s["rotation_zyx_deg"]) if "rotation_zyx_deg" in s
        else np.eye(3) for s in sensors])

    index = {n: i for i, n in enumerate(names)}
    edges = []
    for pair in cfg["adjacency"]:
        a, b = pair
        if a not in index or b not in index:
            raise ConfigError(f"adjacency references unknown sensor in {pair}")
        if a == b:
            raise ConfigError(f"self-loop in adjacency: {pair}")
        edges.append((index[a], index[b]))

    attach = cfg["vision_attachment"]
    if attach not in index:
        raise ConfigError(f"vision_attachment {attach!r} is not a sensor")
    fingers = {k: [index[n] for n in v]
               for k, v in cfg.get("finger_sensors", {}).items()}
    layout = SensorLayout(cfg.get("name", "glove"), names, np.array(seg_idx),
                          offsets, rotations, edges, index[attach], fingers)
    # reject disconnected gloves up front; hop counts must be finite
    hops = _pairwise_hops(layout)
    if np.any(hops < 0):
        raise ConfigError("sensor adjacency graph is not connected")
    return layout


def default_layout(skeleton: HandSkeleton) -> SensorLayout:
    return layout_from_config(load_packaged_yaml(DEFAULT_LAYOUT_FILE), skeleton)


def _pairwise_hops(layout: SensorLayout) -> np.ndarray:
    """All-pairs BFS hop counts over the sensor graph; -1 where unreachable."""
    n = layout.n_sensors
    neigh = [[] for _ in range(n)]
    for a, b in layout.adjacency:
        neigh[a].append(b)
        neigh[b].append(a)
    hops = np.full((n, n), -1, dtype=np.int64)
    for src in range(n):
        hops[src, src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in neigh[u]:
                if hops[src, v] < 0:
                    hops[src, v] = hops[src, u] + 1
                    queue.append(v)
    return hops


def finger_sensor_chains(skeleton: HandSkeleton, layout: SensorLayout) -> list[dict]:
    """Describe what each finger's sensor pair can observe.

    For every finger the glove carries a proximal and a distal sensor. The
    relative rotation palm-to-prox covers the finger's abduction DoF plus the
    flexions up to the prox mount; prox-to-dist covers the flexions between
    the mounts. Flexion axes stay parallel along a finger, so each covered
    group is observable only as a summed angle by orientation sensors.

    Returns one record per finger with keys: finger, prox, dist (sensor
    indices ordered by tree depth), base (first path node, whose rest
    rotation precedes the finger DoFs), abd (the abduction DoF), prox_flex
    and dist_flex (flexion DoF lists in root-to-tip order).
    """

    def depth(j: int) -> int:
        d = 0
        while skeleton.parents[j] >= 0:
            j = int(skeleton.parents[j])
            d += 1
        return d

    palm_node = skeleton.dofs[0].joint
    records = []
    for finger, pair in layout.finger_sensors.items():
        prox, dist = sorted(pair, key=lambda s: depth(int(layout.segments[s])))
        path: list[int] = []
        j = int(layout.segments[prox])
        while j != palm_node:
            path.append(j)
            j = int(skeleton.parents[j])
        path.reverse()
        abd = [k for n in path for k in skeleton.joint_dofs[n]
               if skeleton.dofs[k].kind == "abduction"]
        prox_flex = [k for n in path for k in skeleton.joint_dofs[n]
                     if skeleton.dofs[k].kind == "flexion"]
        dist_flex: list[int] = []
        j = int(layout.segments[dist])
        while j != int(layout.segments[prox]):
            dist_flex = list(skeleton.joint_dofs[j]) + dist_flex
            j = int(skeleton.parents[j])
        if len(abd) != 1 or not 1 <= len(prox_flex) <= 2 or not 1 <= len(dist_flex) <= 2:
            raise ConfigError(f"finger {finger!r}: sensor pair does not bracket "
                              f"an abduction + flexion chain")
        records.append({"finger": finger, "prox": prox, "dist": dist,
                        "base": path[0], "abd": abd[0],
                        "prox_flex": prox_flex, "dist_flex": dist_flex})
    return records


def token_distance_matrix(layout: SensorLayout) -> np.ndarray:
    """Geodesic distances over the 13-token graph, shape (13, 13) int.

    Token 0 is the camera stream, attached one hop outside its anchor sensor;
    token k >= 1 is sensor k-1. Distances between sensors are plain hop
    counts; vision-to-sensor distances are anchor hops plus one.
    """
    hops = _pairwise_hops(layout)
    out = np.zeros((N_TOKENS, N_TOKENS), dtype=np.int64)
    out[1:, 1:] = hops
    anchor = hops[layout.vision_attachment]
    out[0, 1:] = anchor + 1
    out[1:, 0] = anchor + 1
    return out
