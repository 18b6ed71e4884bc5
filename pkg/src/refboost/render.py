"""Static SVG renderer for benchmark scenes and trajectories.

Obstacles come out as <circle> elements, robot paths as <polyline>, starts
as small dots, targets as stars; everything is built through ElementTree so
the output is well-formed XML by construction.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET

import numpy as np

__all__ = ["render_scene"]

_COLORS = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"]


def _star_points(cx: float, cy: float, r: float) -> str:
    pts = []
    for k in range(10):
        rad = r if k % 2 == 0 else 0.4 * r
        ang = np.pi / 2 + k * np.pi / 5
        pts.append(f"{cx + rad * np.cos(ang):.3f},{cy - rad * np.sin(ang):.3f}")
    return " ".join(pts)


def render_scene(
    out_path,
    paths: list[np.ndarray],
    obstacles=None,
    targets: np.ndarray | None = None,
    starts: np.ndarray | None = None,
    size: int = 560,
    pad: float = 0.6,
    title: str | None = None,
) -> None:
    """Write an SVG overlaying robot paths, obstacles, starts, and targets.

    ``paths`` is one (N, 2) array per robot in world coordinates; the world
    box is fitted around everything drawn.
    """
    pts = [np.asarray(p, dtype=np.float64) for p in paths]
    all_pts = [p for p in pts if len(p)]
    if obstacles is not None and len(obstacles) > 0:
        all_pts.append(obstacles.centers + obstacles.radii[:, None])
        all_pts.append(obstacles.centers - obstacles.radii[:, None])
    if targets is not None:
        all_pts.append(np.asarray(targets))
    if starts is not None:
        all_pts.append(np.asarray(starts))
    if not all_pts:
        raise ValueError("nothing to render")
    stack = np.vstack(all_pts)
    lo = stack.min(axis=0) - pad
    hi = stack.max(axis=0) + pad
    span = float(max(hi - lo))
    scale = size / span

    def to_px(xy):
        x = (xy[..., 0] - lo[0]) * scale
        y = size - (xy[..., 1] - lo[1]) * scale  # world y up, svg y down
        return x, y

    svg = ET.Element(
        "svg",
        xmlns="http://www.w3.org/2000/svg",
        width=str(size),
        height=str(size),
        viewBox=f"0 0 {size} {size}",
    )
    ET.SubElement(svg, "rect", x="0", y="0", width=str(size), height=str(size), fill="white")
    if title:
        t = ET.SubElement(svg, "text", x="10", y="20", attrib={"font-size": "14", "font-family": "sans-serif"})
        t.text = title

    if obstacles is not None and len(obstacles) > 0:
        for center, radius in zip(obstacles.centers, obstacles.radii):
            cx, cy = to_px(np.asarray(center))
            ET.SubElement(
                svg, "circle",
                cx=f"{float(cx):.3f}", cy=f"{float(cy):.3f}", r=f"{float(radius) * scale:.3f}",
                fill="#bbbbbb", stroke="#666666", attrib={"stroke-width": "1.5"},
            )

    for i, p in enumerate(pts):
        if len(p) == 0:
            continue
        x, y = to_px(p)
        points = " ".join(f"{a:.3f},{b:.3f}" for a, b in zip(x, y))
        ET.SubElement(
            svg, "polyline", points=points, fill="none",
            stroke=_COLORS[i % len(_COLORS)], attrib={"stroke-width": "2"},
        )

    if starts is not None:
        for i, s in enumerate(np.asarray(starts)):
            cx, cy = to_px(s)
            ET.SubElement(
                svg, "circle", cx=f"{float(cx):.3f}", cy=f"{float(cy):.3f}", r="5",
                fill=_COLORS[i % len(_COLORS)], stroke="black", attrib={"stroke-width": "1"},
            )
    if targets is not None:
        for i, tgt in enumerate(np.asarray(targets)):
            cx, cy = to_px(tgt)
            ET.SubElement(
                svg, "polygon", points=_star_points(float(cx), float(cy), 9.0),
                fill=_COLORS[i % len(_COLORS)], stroke="black", attrib={"stroke-width": "1"},
            )

    ET.ElementTree(svg).write(out_path, xml_declaration=True, encoding="unicode")
