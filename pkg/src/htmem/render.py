"""Plan strips as binary PPM images: one panel per plan node, walls dark,
agent disc light, goal marker overlaid. Byte-deterministic for fixed inputs."""

from __future__ import annotations

import numpy as np

from .plangraph import Plan
from .world import BlockWorld, Context

BG = (200, 200, 200)
WALL = (60, 60, 60)
AGENT = (240, 240, 240)
GOAL = (180, 40, 40)
BORDER = (120, 120, 120)


def _panel(world: BlockWorld, ctx: Context, agent_xy, goal_xy, size: int) -> np.ndarray:
    s = ctx.arena_size
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[...] = BG

    def to_px(v):
        return np.clip((np.asarray(v) / s * size).astype(int), 0, size - 1)

    # pixel centers in arena coordinates; row 0 is the top of the arena
    coords = (np.arange(size) + 0.5) * (s / size)
    xs = coords[None, :]
    ys = coords[::-1][:, None]
    for w in ctx.walls:
        mask = (
            (np.abs(xs - w.cx) <= w.half_w) & (np.abs(ys - w.cy) <= w.half_h)
        )
        img[mask] = WALL
    r = world.spec.agent_radius
    disc = (xs - agent_xy[0]) ** 2 + (ys - agent_xy[1]) ** 2 <= r * r
    img[disc] = AGENT
    gx, gy = to_px(goal_xy[0]), size - 1 - to_px(goal_xy[1])
    arm = max(1, size // 16)
    img[gy, max(0, gx - arm) : min(size, gx + arm + 1)] = GOAL
    img[max(0, gy - arm) : min(size, gy + arm + 1), gx] = GOAL
    return img


def render_plan(world: BlockWorld, ctx: Context, plan: Plan, out_path, panel_size=48) -> None:
    """Horizontal strip with one panel per plan node, separated by a 1 px
    border column; the goal marker sits at the final node's position."""
    states = [world.decode(o) for o in plan.observations]
    goal_xy = (states[-1].x, states[-1].y)
    panels = [
        _panel(world, ctx, (st.x, st.y), goal_xy, panel_size) for st in states
    ]
    sep = np.empty((panel_size, 1, 3), dtype=np.uint8)
    sep[...] = BORDER
    row = panels[0]
    for p in panels[1:]:
        row = np.concatenate([row, sep, p], axis=1)
    write_ppm(out_path, row)


def write_ppm(path, image: np.ndarray) -> None:
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.astype(np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM")
    parts = data.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    raw = parts[3]
    return np.frombuffer(raw, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)
