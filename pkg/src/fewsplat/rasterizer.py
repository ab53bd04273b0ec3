"""Tile-based front-to-back alpha compositing of projected splats.

Per pixel p, iterating splats front to back with transmittance T starting
at 1: g = exp(-0.5 d^T conic d) with d = p - center; alpha = min(0.99,
opacity * g); splats with alpha < 1/255 or outside their radius box are
skipped; otherwise color/depth accumulate c*alpha*T and z*alpha*T, then
T *= 1 - alpha, and the pixel stops accepting splats once T < 1e-4. Depth
is blended un-normalized (no division by accumulated alpha).

A splat covers a pixel iff the pixel sample lies inside the splat's radius
box; the box is also what assigns splats to tiles, which makes the tile
pipeline's output independent of the tile grid and lets the naive oracle
reproduce it exactly.

The backward pass recomputes per-splat quantities per tile instead of
storing per-splat transmittance, so memory scales with pixels. Splats the
forward pass skipped or never reached receive exactly zero gradient.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .camera import CameraModel
from .errors import MismatchedIntermediatesError
from .projection import ProjectedSplats, project
from .runtime import worker_count
from .scene import GaussianCloud

TILE_SIZE = 16
ALPHA_CAP = 0.99
ALPHA_SKIP = 1.0 / 255.0
T_STOP = 1e-4


@dataclass
class TileBins:
    """Per-tile, depth-ordered splat index lists (ties broken by source index)."""

    width: int
    height: int
    tile_size: int
    tiles_x: int
    tiles_y: int
    order: NDArray  # (M,) splat indices, grouped by tile then sorted by depth
    starts: NDArray  # (T+1,) slice boundaries into order, one slice per tile

    def tile_list(self, tile_id: int) -> NDArray:
        return self.order[self.starts[tile_id] : self.starts[tile_id + 1]]


@dataclass
class RenderOutput:
    """Rendered channels plus the intermediates the backward pass consumes."""

    color: NDArray  # (H, W, 3)
    depth: NDArray  # (H, W), un-normalized alpha-blended z
    alpha: NDArray  # (H, W) = 1 - final transmittance
    final_transmittance: NDArray  # (H, W)
    contrib_count: NDArray  # (H, W) splats blended per pixel
    background: NDArray = field(repr=False, default=None)
    splats: ProjectedSplats = field(repr=False, default=None)
    bins: TileBins = field(repr=False, default=None)


def bin_and_sort(splats: ProjectedSplats, width: int, height: int, tile_size: int = TILE_SIZE) -> TileBins:
    """Assign each splat to every tile its radius box overlaps."""
    tiles_x = (width + tile_size - 1) // tile_size
    tiles_y = (height + tile_size - 1) // tile_size
    n_tiles = tiles_x * tiles_y
    K = splats.count
    if K == 0:
        return TileBins(width, height, tile_size, tiles_x, tiles_y,
                        np.zeros(0, dtype=np.int64), np.zeros(n_tiles + 1, dtype=np.int64))

    cx, cy = splats.centers[:, 0], splats.centers[:, 1]
    r = splats.radii
    # pixel samples sit at integer+0.5; one pixel of slack so the in-box
    # predicate (not this rounding) decides coverage at exact boundaries
    jlo = np.clip(np.ceil(cx - r - 0.5).astype(np.int64) - 1, 0, width - 1)
    jhi = np.clip(np.floor(cx + r - 0.5).astype(np.int64) + 1, 0, width - 1)
    ilo = np.clip(np.ceil(cy - r - 0.5).astype(np.int64) - 1, 0, height - 1)
    ihi = np.clip(np.floor(cy + r - 0.5).astype(np.int64) + 1, 0, height - 1)

    txlo, txhi = jlo // tile_size, jhi // tile_size
    tylo, tyhi = ilo // tile_size, ihi // tile_size
    nx = txhi - txlo + 1
    counts = nx * (tyhi - tylo + 1)

    splat_ids = np.repeat(np.arange(K), counts)
    offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    rep_nx = np.repeat(nx, counts)
    tx = np.repeat(txlo, counts) + offsets % rep_nx
    ty = np.repeat(tylo, counts) + offsets // rep_nx
    tile_ids = ty * tiles_x + tx

    order = np.lexsort((splats.source_index[splat_ids], splats.depths[splat_ids], tile_ids))
    splat_ids = splat_ids[order]
    tile_ids = tile_ids[order]
    starts = np.searchsorted(tile_ids, np.arange(n_tiles + 1))
    return TileBins(width, height, tile_size, tiles_x, tiles_y, splat_ids, starts)


def _tile_bounds(bins: TileBins, tile_id: int):
    ty, tx = divmod(tile_id, bins.tiles_x)
    x0 = tx * bins.tile_size
    y0 = ty * bins.tile_size
    return x0, min(x0 + bins.tile_size, bins.width), y0, min(y0 + bins.tile_size, bins.height)


def _fragment_weights(splats: ProjectedSplats, idx, px, py):
    """Per-(splat, pixel) blending state for one tile fragment.

    Returns (dx, dy, g, alpha, eff, P_excl, live, w, t_final):
      eff    alpha after the in-box and 1/255 skip rules (0 when skipped)
      P_excl transmittance in front of each splat
      live   pixel still accepting splats (the T >= 1e-4 stop rule)
      w      blending weight alpha_i * T_i actually applied
    """
    cx = splats.centers[idx, 0][:, None]
    cy = splats.centers[idx, 1][:, None]
    dx = px[None, :] - cx
    dy = py[None, :] - cy
    co = splats.conics[idx]
    a, b, c = co[:, 0][:, None], co[:, 1][:, None], co[:, 2][:, None]
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    g = np.exp(power)
    alpha = np.minimum(ALPHA_CAP, splats.opacities[idx][:, None] * g)
    r = splats.radii[idx][:, None]
    inbox = (np.abs(dx) <= r) & (np.abs(dy) <= r)
    eff = np.where(inbox & (alpha >= ALPHA_SKIP), alpha, 0.0)
    A = 1.0 - eff
    P = np.cumprod(A, axis=0)
    P_excl = np.empty_like(P)
    P_excl[0] = 1.0
    P_excl[1:] = P[:-1]
    live = P_excl >= T_STOP
    w = eff * P_excl * live
    t_final = np.where(live, A, 1.0).prod(axis=0)
    return dx, dy, g, alpha, eff, P_excl, live, w, t_final


def rasterize_forward(
    splats: ProjectedSplats,
    bins: TileBins,
    camera: CameraModel,
    background,
) -> RenderOutput:
    """Blend the binned splats front to back over the full image."""
    H, W = camera.height, camera.width
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    color = np.empty((H, W, 3))
    color[:] = bg
    depth = np.zeros((H, W))
    t_final = np.ones((H, W))
    contrib = np.zeros((H, W), dtype=np.int32)
    xs = np.arange(W) + 0.5
    ys = np.arange(H) + 0.5

    def run_tile(tile_id):
        idx = bins.tile_list(tile_id)
        if len(idx) == 0:
            return
        x0, x1, y0, y1 = _tile_bounds(bins, tile_id)
        px, py = np.meshgrid(xs[x0:x1], ys[y0:y1])
        shape = px.shape
        _, _, _, _, _, _, _, w, tf = _fragment_weights(splats, idx, px.ravel(), py.ravel())
        csum = w.T @ splats.colors[idx] + bg[None, :] * tf[:, None]
        color[y0:y1, x0:x1] = csum.reshape(shape + (3,))
        depth[y0:y1, x0:x1] = (w.T @ splats.depths[idx]).reshape(shape)
        t_final[y0:y1, x0:x1] = tf.reshape(shape)
        contrib[y0:y1, x0:x1] = (w > 0).sum(axis=0).reshape(shape)

    _for_each_tile(bins, run_tile)
    return RenderOutput(
        color=color,
        depth=depth,
        alpha=1.0 - t_final,
        final_transmittance=t_final,
        contrib_count=contrib,
        background=bg,
        splats=splats,
        bins=bins,
    )


def _for_each_tile(bins: TileBins, fn):
    n_tiles = bins.tiles_x * bins.tiles_y
    workers = worker_count()
    if workers <= 1:
        for t in range(n_tiles):
            fn(t)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fn, range(n_tiles)))


def rasterize_backward(output: RenderOutput, dL_dcolor, dL_ddepth, dL_dalpha):
    """Adjoint of rasterize_forward onto the projected-splat fields.

    Recomputes the forward blending per tile back-to-front from the saved
    intermediates; raises if the recomputed transmittance disagrees with the
    saved one (stale or mismatched intermediates).

    Returns a dict with centers, conics, depths, opacities, colors gradients.
    """
    splats, bins, bg = output.splats, output.bins, output.background
    if splats is None or bins is None:
        raise MismatchedIntermediatesError("RenderOutput is missing its backward intermediates")
    H, W = bins.height, bins.width
    dC = np.zeros((H, W, 3)) if dL_dcolor is None else np.asarray(dL_dcolor, dtype=np.float64)
    dD = np.zeros((H, W)) if dL_ddepth is None else np.asarray(dL_ddepth, dtype=np.float64)
    dA = np.zeros((H, W)) if dL_dalpha is None else np.asarray(dL_dalpha, dtype=np.float64)
    if dC.shape != (H, W, 3) or dD.shape != (H, W) or dA.shape != (H, W):
        raise MismatchedIntermediatesError("adjoint shapes do not match the rendered image")

    K = splats.count
    out = {
        "centers": np.zeros((K, 2)),
        "conics": np.zeros((K, 3)),
        "depths": np.zeros(K),
        "opacities": np.zeros(K),
        "colors": np.zeros((K, 3)),
    }
    if K == 0:
        return out
    xs = np.arange(W) + 0.5
    ys = np.arange(H) + 0.5

    def run_tile(tile_id):
        idx = bins.tile_list(tile_id)
        if len(idx) == 0:
            return None
        x0, x1, y0, y1 = _tile_bounds(bins, tile_id)
        px, py = np.meshgrid(xs[x0:x1], ys[y0:y1])
        px, py = px.ravel(), py.ravel()
        dx, dy, g, alpha, eff, P_excl, live, w, tf = _fragment_weights(splats, idx, px, py)
        saved_tf = output.final_transmittance[y0:y1, x0:x1].ravel()
        if not np.array_equal(tf, saved_tf):
            raise MismatchedIntermediatesError(
                "recomputed transmittance disagrees with saved forward intermediates"
            )

        dC_t = dC[y0:y1, x0:x1].reshape(-1, 3)
        dD_t = dD[y0:y1, x0:x1].ravel()
        dA_t = dA[y0:y1, x0:x1].ravel()

        cols = splats.colors[idx]
        deps = splats.depths[idx]
        q = cols @ dC_t.T + deps[:, None] * dD_t[None, :]
        Sw = w * q
        cums = np.cumsum(Sw, axis=0)
        suffix = cums[-1][None, :] - cums  # sum over splats behind each one
        E = dA_t - dC_t @ bg
        blended = w > 0.0
        denom = np.where(blended, 1.0 - eff, 1.0)
        d_alpha = np.where(
            blended,
            P_excl * q + (E[None, :] * tf[None, :] - suffix) / denom,
            0.0,
        )
        pass_min = splats.opacities[idx][:, None] * g <= ALPHA_CAP  # min() clamp gate
        d_g = splats.opacities[idx][:, None] * d_alpha * pass_min
        d_opa_pix = g * d_alpha * pass_min
        d_pow = g * d_g

        co = splats.conics[idx]
        a, b = co[:, 0][:, None], co[:, 1][:, None]
        c = co[:, 2][:, None]
        ga = (-0.5 * dx * dx * d_pow).sum(axis=1)
        gb = (-dx * dy * d_pow).sum(axis=1)
        gc = (-0.5 * dy * dy * d_pow).sum(axis=1)
        gcx = ((a * dx + b * dy) * d_pow).sum(axis=1)
        gcy = ((b * dx + c * dy) * d_pow).sum(axis=1)
        return (
            idx,
            np.stack([gcx, gcy], axis=1),
            np.stack([ga, gb, gc], axis=1),
            w @ dD_t,
            d_opa_pix.sum(axis=1),
            w @ dC_t,
        )

    partials = _collect_tiles(bins, run_tile)
    for part in partials:
        if part is None:
            continue
        idx, g_cent, g_con, g_dep, g_opa, g_col = part
        np.add.at(out["centers"], idx, g_cent)
        np.add.at(out["conics"], idx, g_con)
        np.add.at(out["depths"], idx, g_dep)
        np.add.at(out["opacities"], idx, g_opa)
        np.add.at(out["colors"], idx, g_col)
    return out


def _collect_tiles(bins: TileBins, fn):
    """Evaluate fn per tile, returning results in tile order (deterministic
    reduction regardless of worker count)."""
    n_tiles = bins.tiles_x * bins.tiles_y
    workers = worker_count()
    if workers <= 1:
        return [fn(t) for t in range(n_tiles)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n_tiles)))


def render(cloud: GaussianCloud, camera: CameraModel, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """project -> bin_and_sort -> rasterize_forward."""
    splats = project(cloud, camera)
    bins = bin_and_sort(splats, camera.width, camera.height)
    return rasterize_forward(splats, bins, camera, background)


def render_backward(output: RenderOutput, dL_dcolor=None, dL_ddepth=None, dL_dalpha=None):
    """Full backward chain: image adjoints -> raw Gaussian parameter gradients.

    Returns (grads dict, per-Gaussian view-space positional gradient norms).
    """
    from .projection import project_backward

    sg = rasterize_backward(output, dL_dcolor, dL_ddepth, dL_dalpha)
    return project_backward(
        output.splats, sg["centers"], sg["conics"], sg["depths"], sg["opacities"], sg["colors"]
    )


def oracle_render(cloud: GaussianCloud, camera: CameraModel, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Naive O(pixels x splats) reference renderer.

    Single global depth sort (ties by source index), no tiling: every splat
    is blended over the whole image in order, with the same skip, in-box and
    termination rules as the tile pipeline. Mathematically identical output;
    used as the verification oracle.
    """
    H, W = camera.height, camera.width
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    splats = project(cloud, camera)
    order = np.lexsort((splats.source_index, splats.depths))

    xs = np.arange(W) + 0.5
    ys = np.arange(H) + 0.5
    px, py = np.meshgrid(xs, ys)
    px, py = px.ravel(), py.ravel()

    T = np.ones(H * W)
    C = np.zeros((H * W, 3))
    D = np.zeros(H * W)
    contrib = np.zeros(H * W, dtype=np.int32)
    for k in order:
        dx = px - splats.centers[k, 0]
        dy = py - splats.centers[k, 1]
        a, b, c = splats.conics[k]
        g = np.exp(-0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy)
        alpha = np.minimum(ALPHA_CAP, splats.opacities[k] * g)
        r = splats.radii[k]
        use = (np.abs(dx) <= r) & (np.abs(dy) <= r) & (alpha >= ALPHA_SKIP) & (T >= T_STOP)
        wgt = alpha[use] * T[use]
        C[use] += wgt[:, None] * splats.colors[k][None, :]
        D[use] += wgt * splats.depths[k]
        contrib[use] += 1
        T[use] *= 1.0 - alpha[use]
    C += T[:, None] * bg[None, :]
    return RenderOutput(
        color=C.reshape(H, W, 3),
        depth=D.reshape(H, W),
        alpha=(1.0 - T).reshape(H, W),
        final_transmittance=T.reshape(H, W),
        contrib_count=contrib.reshape(H, W),
        background=bg,
        splats=splats,
        bins=None,
    )
