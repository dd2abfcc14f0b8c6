"""
test_svg.py — Rendu SVG des scènes
==================================
Framework : pytest (tmp_path)
"""

import math
import re

import numpy as np

from config import ArmSpec, GridSpec
from engine.geometry import CircleObstacle, Scenario
from engine.latent_planner import Trajectory
from ui.svg import render_svg

ARM = ArmSpec()
SCENE = Scenario.build([CircleObstacle((1.2, 0.4), 0.3), CircleObstacle((-0.8, -1.0), 0.25)], GridSpec(), 5)


def _trajectories() -> dict[str, Trajectory]:
    q = np.linspace([-math.pi / 2, 0.3], [math.pi / 2, -0.3], 12)
    return {
        "latent": Trajectory.from_radians(ARM, q, planner="latent"),
        "rrt_connect": Trajectory.from_radians(ARM, q[::3], planner="rrt_connect"),
    }


class TestRenderSvg:

    def test_same_input_same_bytes(self, tmp_path):
        a = render_svg(ARM, SCENE, _trajectories(), tmp_path / "a.svg")
        b = render_svg(ARM, SCENE, _trajectories(), tmp_path / "b.svg")
        assert a.read_bytes() == b.read_bytes()

    def test_element_ids(self, tmp_path):
        svg = render_svg(ARM, SCENE, _trajectories(), tmp_path / "scene.svg").read_text(encoding="utf-8")
        for gid in ("grid-outline", "obstacle-0", "obstacle-1", "base", "trace-latent", "trace-rrt_connect"):
            assert f'id="{gid}"' in svg
        assert 'id="pose-latent-0"' in svg and 'id="pose-latent-11"' in svg

    def test_one_marker_per_waypoint(self, tmp_path):
        svg = render_svg(ARM, SCENE, _trajectories(), tmp_path / "scene.svg").read_text(encoding="utf-8")
        trace = svg.split('id="trace-rrt_connect"', 1)[1].split('id="pose-rrt_connect-0"', 1)[0]
        assert len(re.findall(r"<use ", trace)) == 4

    def test_empty_scene(self, tmp_path):
        empty = Scenario.build([], GridSpec(), 0)
        path = render_svg(ARM, empty, {}, tmp_path / "sub" / "empty.svg", poses=0)
        svg = path.read_text(encoding="utf-8")
        assert path.exists()
        assert "obstacle-" not in svg and "trace-" not in svg
