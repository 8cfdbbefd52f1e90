import math

import numpy as np
import pytest

from tgforecast.scene import AgentTrack, LaneSegment, RawScene


def straight_track(agent_id, start, velocity, steps, is_aoi=False):
    steps = np.asarray(list(steps))
    xy = np.asarray(start, float) + np.outer(steps * 0.1, np.asarray(velocity, float))
    return AgentTrack(agent_id, steps, xy, is_aoi)


def make_scene(scene_id="s0", heading=0.0, origin=(0.0, 0.0), n_lanes=3, with_other=True):
    """AoI driving at 10 m/s along ``heading`` ending at ``origin`` at step 19, plus a few lanes."""
    u = np.array([math.cos(heading), math.sin(heading)])
    n = np.array([-u[1], u[0]])
    origin = np.asarray(origin, float)
    t = np.arange(50)
    aoi_xy = origin + np.outer((t - 19) * 1.0, u)
    agents = [AgentTrack("aoi", t[:20], aoi_xy[:20], True)]
    if with_other:
        other = origin + 3.5 * n + np.outer((t[:20] - 19) * 0.8, u)
        agents.append(AgentTrack("car1", t[2:20], other[2:20]))
    lanes = []
    for j in range(n_lanes):
        pts = origin + (j - 1) * 3.5 * n + np.outer(np.linspace(-30, 30, 7), u)
        lanes.append(LaneSegment(f"lane{j}", pts, j == 2, "left" if j == 2 else "none"))
    return RawScene(scene_id, agents, lanes, "aoi", aoi_xy[20:].copy())


@pytest.fixture
def scene():
    return make_scene()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
