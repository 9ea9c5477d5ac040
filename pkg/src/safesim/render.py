"""Static SVG rendering of executed scenarios: lane corridors, executed
trajectories with time-gradient coloring, and collision markers."""

from __future__ import annotations

import numpy as np

ROLE_COLORS = {"ego": (30, 80, 220), "adversary": (220, 40, 40), "reactive": (40, 160, 60)}


def _mix(rgb, frac):
    # fades from light (early) to full color (late)
    r, g, b = rgb
    light = 0.75
    w = light * (1.0 - frac)
    return (int(r + (255 - r) * w), int(g + (255 - g) * w), int(b + (255 - b) * w))


def render_svg(log, scenario, path, px_per_m: float = 6.0, margin: float = 8.0) -> None:
    pts = [ln.centerline.points for ln in scenario.lanemap.lanes.values()]
    all_xy = np.concatenate(pts + [log.states[..., :2].reshape(-1, 2)]) if len(log.states) else np.concatenate(pts)
    lo = all_xy.min(axis=0) - margin
    hi = all_xy.max(axis=0) + margin
    size = (hi - lo) * px_per_m

    def tx(p):
        return ((p[0] - lo[0]) * px_per_m, (hi[1] - p[1]) * px_per_m)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size[0]:.0f}" '
           f'height="{size[1]:.0f}" viewBox="0 0 {size[0]:.1f} {size[1]:.1f}">',
           '<rect width="100%" height="100%" fill="white"/>']

    for ln in scenario.lanemap.lanes.values():
        path_pts = " ".join(f"{tx(p)[0]:.1f},{tx(p)[1]:.1f}" for p in ln.centerline.points)
        out.append(f'<polyline points="{path_pts}" fill="none" stroke="#e0e0e0" '
                   f'stroke-width="{ln.width * px_per_m:.1f}" stroke-linecap="round"/>')
        out.append(f'<polyline points="{path_pts}" fill="none" stroke="#b0b0b0" '
                   'stroke-width="1" stroke-dasharray="6,6"/>')

    full = np.concatenate([log.initial_states[None], log.states], axis=0)
    S = len(full)
    for i, aid in enumerate(log.agent_ids):
        color = ROLE_COLORS.get(log.roles[aid], (100, 100, 100))
        for s in range(S - 1):
            c = _mix(color, s / max(S - 2, 1))
            a, b = tx(full[s, i]), tx(full[s + 1, i])
            out.append(f'<line x1="{a[0]:.1f}" y1="{a[1]:.1f}" x2="{b[0]:.1f}" '
                       f'y2="{b[1]:.1f}" stroke="rgb{c}" stroke-width="2"/>')
        start = tx(full[0, i])
        out.append(f'<circle cx="{start[0]:.1f}" cy="{start[1]:.1f}" r="4" '
                   f'fill="rgb{color}"/>')
        out.append(f'<text x="{start[0] + 6:.1f}" y="{start[1] - 6:.1f}" '
                   f'font-size="11">{aid}</text>')

    for e in log.collisions:
        idx = log.agent_ids.index(e.agent_i)
        step = min(int(round(e.time / log.dt)), S - 1)
        c = tx(full[step, idx])
        out.append(f'<g stroke="black" stroke-width="2">'
                   f'<line x1="{c[0] - 5:.1f}" y1="{c[1] - 5:.1f}" x2="{c[0] + 5:.1f}" y2="{c[1] + 5:.1f}"/>'
                   f'<line x1="{c[0] - 5:.1f}" y1="{c[1] + 5:.1f}" x2="{c[0] + 5:.1f}" y2="{c[1] - 5:.1f}"/></g>')

    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out))
