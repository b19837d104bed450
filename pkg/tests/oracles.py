"""Independent slow reference implementations used as test oracles.

Nothing here calls the vectorised code paths it is compared against; networks
are only evaluated as black-box functions on single vectors.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
import torch
import torch.nn.functional as F


# -- pinhole camera ---------------------------------------------------------


def pixel_direction(pose, intr, u, v, normalize=True):
    """World-space direction through the center of pixel (u, v)."""
    x = (u + 0.5 - intr.cx) / intr.fx
    y = (v + 0.5 - intr.cy) / intr.fy
    d = [sum(pose.rotation[r][c] * (x, y, 1.0)[c] for c in range(3)) for r in range(3)]
    if normalize:
        n = math.sqrt(sum(c * c for c in d))
        d = [c / n for c in d]
    return d


def unproject_pixel(pose, intr, u, v, depth):
    x = (u + 0.5 - intr.cx) / intr.fx * depth
    y = (v + 0.5 - intr.cy) / intr.fy * depth
    cam = (x, y, depth)
    return [sum(pose.rotation[r][c] * cam[c] for c in range(3)) + pose.translation[r] for r in range(3)]


# -- ray caster ---------------------------------------------------------------


def _in_rect(p, axis, lo, hi):
    return all(lo[a] - 1e-12 <= p[a] <= hi[a] + 1e-12 for a in range(3) if a != axis)


def trace_pixel(spec, pose, intr, u, v):
    """Colour and z-depth of one pixel by testing every face plane separately."""
    o = list(pose.translation)
    d = pixel_direction(pose, intr, u, v, normalize=False)
    room = spec.room
    best = (math.inf, None)
    # room walls, hit from inside
    for axis in range(3):
        for side, bound in ((0, 0.0), (1, room[axis])):
            if d[axis] == 0:
                continue
            t = (bound - o[axis]) / d[axis]
            if t <= 0:
                continue
            p = [o[i] + t * d[i] for i in range(3)]
            if _in_rect(p, axis, (0, 0, 0), room) and t < best[0]:
                best = (t, ("wall", axis, 2 * axis + side))
    # boxes, front faces only
    for k, box in enumerate(spec.objects):
        for axis in range(3):
            for side, bound in ((0, box.lo[axis]), (1, box.hi[axis])):
                if d[axis] == 0:
                    continue
                facing = d[axis] > 0 if side == 0 else d[axis] < 0
                if not facing:
                    continue
                t = (bound - o[axis]) / d[axis]
                if t <= 0:
                    continue
                p = [o[i] + t * d[i] for i in range(3)]
                if _in_rect(p, axis, box.lo, box.hi) and t < best[0]:
                    best = (t, ("box", axis, 2 * axis + side, k))
    t, hit = best
    p = [o[i] + t * d[i] for i in range(3)]
    axis = hit[1]
    if hit[0] == "wall":
        albedo = spec.wall_colors[hit[2]]
        cell = spec.floor_checker if axis == 2 else 0.0
    else:
        box = spec.objects[hit[3]]
        albedo = box.colors[hit[2]]
        cell = box.checker
    light = np.asarray(spec.light_dir, dtype=float)
    light = light / np.linalg.norm(light)
    shade = 0.45 + 0.55 * abs(light[axis])
    pattern = 1.0
    if cell > 0:
        s = sum(math.floor(p[a] / cell) for a in range(3) if a != axis)
        pattern = 1.0 if s % 2 == 0 else 0.75
    color = [min(max(c * shade * pattern, 0.0), 1.0) for c in albedo]
    return color, t


# -- point-cloud volume rendering ----------------------------------------------


def render_pixel_loop(positions, features, params, cfg, origin, direction):
    """Colour, mask, and transmittances of one ray, sample by sample."""
    delta = (cfg.far - cfg.near) / cfg.steps
    dtype = features.dtype
    color = [0.0, 0.0, 0.0]
    transmittance = 1.0
    trans_list = []
    valid = False
    for k in range(cfg.steps):
        t = cfg.near + (k + 0.5) * delta
        x = [origin[i] + t * direction[i] for i in range(3)]
        cands = []
        for j, p in enumerate(positions):
            dist = math.sqrt(sum((x[i] - p[i]) ** 2 for i in range(3)))
            if dist < cfg.radius:
                cands.append((dist, j))
        cands.sort()
        cands = cands[: cfg.max_neighbors]
        if len(cands) >= cfg.mask_threshold:
            valid = True
        trans_list.append(transmittance)
        if not cands:
            continue
        num = None
        den = 0.0
        for dist, j in cands:
            off = torch.tensor([(x[i] - positions[j][i]) / cfg.radius for i in range(3)], dtype=dtype)
            g = params.field.neighbor(torch.cat([features[j], off])[None])[0]
            w = 1.0 / (dist + 1e-6)
            num = w * g if num is None else num + w * g
            den += w
        agg = (num / den)[None]
        sigma = float(F.softplus(params.field.density(agg))[0, 0]) * params.density_scale
        rgb = torch.sigmoid(params.field.color(agg))[0].tolist()
        alpha = 1.0 - math.exp(-sigma * delta)
        for c in range(3):
            color[c] += transmittance * alpha * rgb[c]
        transmittance *= math.exp(-sigma * delta)
    if not valid:
        color = [0.0, 0.0, 0.0]
    return color, float(valid), trans_list


# -- convolution ----------------------------------------------------------------


def conv2d_loop(x, weight, bias, stride, padding):
    """Direct convolution: x C x H x W, weight O x C x k x k (numpy)."""
    c, h, w = x.shape
    o, _, k, _ = weight.shape
    xp = np.zeros((c, h + 2 * padding, w + 2 * padding))
    xp[:, padding : padding + h, padding : padding + w] = x
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    out = np.zeros((o, oh, ow))
    for oc in range(o):
        for i in range(oh):
            for j in range(ow):
                acc = bias[oc]
                for ic in range(c):
                    for a in range(k):
                        for b in range(k):
                            acc += weight[oc, ic, a, b] * xp[ic, i * stride + a, j * stride + b]
                out[oc, i, j] = acc
    return out


# -- finite differences -----------------------------------------------------------


def central_difference(fn, params, h=1e-5):
    """Numeric gradient of scalar ``fn()`` w.r.t. each tensor in ``params``."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = float(fn())
                flat[i] = old - h
                down = float(fn())
                flat[i] = old
                g.view(-1)[i] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def flat_relative_error(grads_a, grads_b) -> float:
    """Relative error of two whole gradients, each given as a list of tensors."""
    return relative_error(torch.cat([g.reshape(-1) for g in grads_a]), torch.cat([g.reshape(-1) for g in grads_b]))


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    scale = max(a.norm().item(), b.norm().item())
    if scale < 1e-12:
        return 0.0
    return (a - b).norm().item() / scale


def enumerate_sequences(k, t):
    return [list(s) for s in itertools.product(range(k), repeat=t)]


# -- image metrics ----------------------------------------------------------------


def psnr_loop(a, b):
    h, w, c = a.shape
    mse = sum((a[i, j, k] - b[i, j, k]) ** 2 for i in range(h) for j in range(w) for k in range(c)) / (h * w * c)
    return math.inf if mse == 0 else -10.0 * math.log10(mse)


def ssim_loop(a, b, window, c1, c2):
    """SSIM averaged over every window position and channel, one window at a time."""
    h, w, c = a.shape
    vals = []
    n = window * window
    for ch in range(c):
        for i in range(h - window + 1):
            for j in range(w - window + 1):
                xs = [a[i + di, j + dj, ch] for di in range(window) for dj in range(window)]
                ys = [b[i + di, j + dj, ch] for di in range(window) for dj in range(window)]
                mx, my = sum(xs) / n, sum(ys) / n
                vx = sum((x - mx) ** 2 for x in xs) / n
                vy = sum((y - my) ** 2 for y in ys) / n
                cxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / n
                s = (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2))
                vals.append(min(max(s, -1.0), 1.0))
    return sum(vals) / len(vals)
