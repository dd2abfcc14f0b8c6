"""
ui/svg.py — Rendu SVG d'une scène
==================================
Obstacles, contour de la grille, quelques postures du bras et trace de
l'effecteur par planificateur. Sortie identique au bit pour une même entrée.
"""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.patches as mpatches  # noqa: E402
from matplotlib import rc_context  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from config import ArmSpec  # noqa: E402
from engine.geometry import Scenario, end_effector, forward_kinematics_batch  # noqa: E402
from engine.latent_planner import Trajectory  # noqa: E402

logger = logging.getLogger(__name__)

TRACE_STYLES = {
    "latent": {"color": "#1f77b4", "linestyle": "-", "marker": "o"},
    "latent+cag": {"color": "#2ca02c", "linestyle": "-", "marker": "s"},
    "cag-only": {"color": "#17becf", "linestyle": ":", "marker": "s"},
    "rrt": {"color": "#d62728", "linestyle": "--", "marker": "^"},
    "rrt_connect": {"color": "#ff7f0e", "linestyle": "-.", "marker": "v"},
}
_FALLBACK_STYLE = {"color": "#7f7f7f", "linestyle": "-", "marker": "."}

_RC = {
    "svg.hashsalt": "latent-planner",
    "svg.fonttype": "none",
    "path.simplify": False,
}


def render_svg(arm: ArmSpec, scenario: Scenario, trajectories: dict[str, Trajectory],
               path: str | Path, poses: int = 5) -> Path:
    """
    Chaque trace porte l'identifiant « trace-<label> » et un marqueur par
    waypoint ; les obstacles « obstacle-<i> », les postures « pose-<label>-<k> ».
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    xmin, xmax, ymin, ymax = scenario.grid.bounds

    with rc_context(_RC):
        fig = Figure(figsize=(5, 5))
        ax = fig.add_subplot(1, 1, 1)
        ax.set_xlim(xmin, xmax)
        ax.set_ylim(ymin, ymax)
        ax.set_aspect("equal")
        ax.add_patch(mpatches.Rectangle((xmin, ymin), xmax - xmin, ymax - ymin, fill=False,
                                        edgecolor="#999999", linewidth=0.8, gid="grid-outline"))
        for i, obs in enumerate(scenario.obstacles):
            ax.add_patch(mpatches.Circle(obs.center, obs.radius, facecolor="#444444", alpha=0.6,
                                         edgecolor="none", gid=f"obstacle-{i}"))
        ax.plot([arm.base[0]], [arm.base[1]], marker="o", color="black", gid="base")

        for label, traj in trajectories.items():
            style = TRACE_STYLES.get(label, _FALLBACK_STYLE)
            ee = end_effector(arm, traj.radians)
            ax.plot(ee[:, 0], ee[:, 1], color=style["color"], linestyle=style["linestyle"],
                    marker=style["marker"], markersize=2.5, linewidth=1.0, label=label, gid=f"trace-{label}")
            if poses > 0 and traj.T:
                picks = sorted({round(k * (traj.T - 1) / max(poses - 1, 1)) for k in range(poses)})
                chain = forward_kinematics_batch(arm, traj.radians[picks])
                for k, pts in zip(picks, chain):
                    ax.plot(pts[:, 0], pts[:, 1], color=style["color"], alpha=0.35, linewidth=2.0,
                            gid=f"pose-{label}-{k}")
        if trajectories:
            ax.legend(loc="upper right", fontsize=7)
        ax.set_xlabel("x")
        ax.set_ylabel("y")
        fig.savefig(target, format="svg", metadata={"Date": None})

    logger.debug("Scène %d rendue : %s", scenario.scenario_id, target)
    return target
