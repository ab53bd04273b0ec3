"""Perspective projection of 3D Gaussians to screen-space splats.

The 2D screen covariance is the classic EWA linearization: with W the
world-to-camera rotation and J the perspective Jacobian at the camera-space
mean, Sigma' = (J W) Sigma (J W)^T, dilated by +0.3 px^2 on the diagonal as
an anti-aliasing floor. The backward pass chains adjoints on the splat
fields (center, conic, depth, opacity, color) down to the raw Gaussian
parameters, including the view-direction dependence of the SH color.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .camera import CameraModel
from .scene import GaussianCloud, eval_sh_with_cache, sh_backward

COV_DILATION = 0.3  # px^2 added to the screen covariance diagonal
RADIUS_SIGMAS = 3.0  # splat footprint half-width in screen-space sigmas
FRUSTUM_GUARD = 1.3  # view-frustum culling margin


@dataclass
class ProjectedSplats:
    """Screen-space splats (struct-of-arrays over the kept Gaussians)."""

    source_index: NDArray  # (K,) indices into the cloud
    centers: NDArray  # (K, 2) pixel coordinates
    conics: NDArray  # (K, 3) upper triangle (a, b, c) of the inverse 2D covariance
    depths: NDArray  # (K,) camera-space z
    radii: NDArray  # (K,) footprint half-width in pixels
    opacities: NDArray  # (K,)
    colors: NDArray  # (K, 3), SH-evaluated, clamped at 0 only
    cache: "ProjectionCache" = field(repr=False, default=None)

    @property
    def count(self) -> int:
        return len(self.source_index)


@dataclass
class ProjectionCache:
    """Intermediates saved by project() for the backward chain."""

    camera: CameraModel
    n_total: int
    act: dict  # full-cloud activations (positions, scales, quats, ...)
    keep: NDArray  # (K,) int indices of kept Gaussians
    t_cam: NDArray  # (K, 3) camera-space means
    U: NDArray  # (K, 2, 3) = J @ W
    cov2d: NDArray  # (K, 3) packed (A, B, C) after dilation
    view_dirs: NDArray  # (K, 3) unit directions camera->gaussian
    dir_norms: NDArray  # (K,)
    color_live: NDArray  # (K, 3) channels not clamped at zero


def project(cloud: GaussianCloud, camera: CameraModel) -> ProjectedSplats:
    """Project the cloud; Gaussians outside the guarded frustum are culled."""
    act = cloud.activate_all()
    pos = act["positions"]
    t_cam = camera.world_to_camera(pos)
    x, y, z = t_cam[:, 0], t_cam[:, 1], t_cam[:, 2]

    with np.errstate(divide="ignore", invalid="ignore"):
        inv_z = np.where(z > 0, 1.0 / z, 0.0)
    keep = (z > camera.znear) & (z < camera.zfar)
    # guarded frustum test on the view-plane coordinates
    lim_x = FRUSTUM_GUARD * 0.5 * camera.width / camera.fx
    lim_y = FRUSTUM_GUARD * 0.5 * camera.height / camera.fy
    keep &= (np.abs(x * inv_z) <= lim_x) & (np.abs(y * inv_z) <= lim_y)

    idx = np.flatnonzero(keep)
    t_k = t_cam[idx]
    xk, yk, zk = t_k[:, 0], t_k[:, 1], t_k[:, 2]
    inv_zk = 1.0 / zk

    u = camera.fx * xk * inv_zk + camera.cx
    v = camera.fy * yk * inv_zk + camera.cy
    centers = np.stack([u, v], axis=1)

    # U = J @ W with J the 2x3 perspective Jacobian at the camera-space mean
    J = np.zeros((len(idx), 2, 3))
    J[:, 0, 0] = camera.fx * inv_zk
    J[:, 0, 2] = -camera.fx * xk * inv_zk**2
    J[:, 1, 1] = camera.fy * inv_zk
    J[:, 1, 2] = -camera.fy * yk * inv_zk**2
    U = J @ camera.rotation_w2c[None, :, :]

    cov3d = act["covariances"][idx]
    cov2d_full = np.einsum("kij,kjl,kml->kim", U, cov3d, U)
    A = cov2d_full[:, 0, 0] + COV_DILATION
    B = cov2d_full[:, 0, 1]
    C = cov2d_full[:, 1, 1] + COV_DILATION

    det = A * C - B * B
    conics = np.stack([C / det, -B / det, A / det], axis=1)
    mid = 0.5 * (A + C)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radii = RADIUS_SIGMAS * np.sqrt(lam_max)

    # cull splats whose footprint misses the pixel grid entirely
    on_image = (
        (u + radii >= 0.5)
        & (u - radii <= camera.width - 0.5)
        & (v + radii >= 0.5)
        & (v - radii <= camera.height - 0.5)
    )
    sub = np.flatnonzero(on_image)
    idx = idx[sub]
    centers, conics, radii = centers[sub], conics[sub], radii[sub]
    t_k = t_k[sub]
    U = U[sub]
    A, B, C = A[sub], B[sub], C[sub]

    offsets = act["positions"][idx] - camera.center
    dir_norms = np.linalg.norm(offsets, axis=1)
    dir_norms = np.maximum(dir_norms, 1e-12)
    view_dirs = offsets / dir_norms[:, None]
    colors, live, _ = eval_sh_with_cache(act["sh"][idx], view_dirs)

    cache = ProjectionCache(
        camera=camera,
        n_total=cloud.count,
        act=act,
        keep=idx,
        t_cam=t_k,
        U=U,
        cov2d=np.stack([A, B, C], axis=1),
        view_dirs=view_dirs,
        dir_norms=dir_norms,
        color_live=live,
    )
    return ProjectedSplats(
        source_index=idx,
        centers=centers,
        conics=conics,
        depths=t_k[:, 2].copy(),
        radii=radii,
        opacities=act["opacities"][idx],
        colors=colors,
        cache=cache,
    )


# partial derivatives of the rotation matrix entries w.r.t. the unit
# quaternion (w, x, y, z); filled by _rotation_quat_jacobian
def _rotation_quat_jacobian(qn):
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    K = len(qn)
    dR = np.zeros((K, 3, 3, 4))
    two = 2.0
    dR[:, 0, 0, 2] = -4 * y
    dR[:, 0, 0, 3] = -4 * z
    dR[:, 0, 1, 0] = -two * z
    dR[:, 0, 1, 1] = two * y
    dR[:, 0, 1, 2] = two * x
    dR[:, 0, 1, 3] = -two * w
    dR[:, 0, 2, 0] = two * y
    dR[:, 0, 2, 1] = two * z
    dR[:, 0, 2, 2] = two * w
    dR[:, 0, 2, 3] = two * x
    dR[:, 1, 0, 0] = two * z
    dR[:, 1, 0, 1] = two * y
    dR[:, 1, 0, 2] = two * x
    dR[:, 1, 0, 3] = two * w
    dR[:, 1, 1, 1] = -4 * x
    dR[:, 1, 1, 3] = -4 * z
    dR[:, 1, 2, 0] = -two * x
    dR[:, 1, 2, 1] = -two * w
    dR[:, 1, 2, 2] = two * z
    dR[:, 1, 2, 3] = two * y
    dR[:, 2, 0, 0] = -two * y
    dR[:, 2, 0, 1] = two * z
    dR[:, 2, 0, 2] = -two * w
    dR[:, 2, 0, 3] = two * x
    dR[:, 2, 1, 0] = two * x
    dR[:, 2, 1, 1] = two * w
    dR[:, 2, 1, 2] = two * z
    dR[:, 2, 1, 3] = two * y
    dR[:, 2, 2, 1] = -4 * x
    dR[:, 2, 2, 2] = -4 * y
    return dR


def project_backward(
    splats: ProjectedSplats,
    d_centers,
    d_conics,
    d_depths,
    d_opacities,
    d_colors,
):
    """Chain splat-field adjoints down to the raw Gaussian parameters.

    Returns (grads, view_norms): grads maps parameter-array names to
    cloud-shaped gradient arrays; view_norms holds the per-Gaussian
    view-space positional gradient norm consumed by density control
    (NDC convention: pixel gradients scaled by half the image size).
    """
    cache = splats.cache
    cam = cache.camera
    act = cache.act
    idx = cache.keep
    K = len(idx)
    N = cache.n_total

    grads = {
        "positions": np.zeros((N, 3)),
        "log_scales": np.zeros((N, 3)),
        "rotations": np.zeros((N, 4)),
        "opacity_logits": np.zeros(N),
        "sh": np.zeros((N, 3, 4)),
    }
    view_norms = np.zeros(N)
    if K == 0:
        return grads, view_norms

    d_centers = np.asarray(d_centers, dtype=np.float64).reshape(K, 2)
    d_conics = np.asarray(d_conics, dtype=np.float64).reshape(K, 3)
    d_depths = np.asarray(d_depths, dtype=np.float64).reshape(K)
    d_opacities = np.asarray(d_opacities, dtype=np.float64).reshape(K)
    d_colors = np.asarray(d_colors, dtype=np.float64).reshape(K, 3)

    x, y, z = cache.t_cam[:, 0], cache.t_cam[:, 1], cache.t_cam[:, 2]
    inv_z = 1.0 / z
    fx, fy = cam.fx, cam.fy

    # conic = inv(Sigma2): dL/dSigma2 = -conic @ G @ conic with the packed
    # upper-triangle adjoint G placed as [[ga, gb], [0, gc]]
    a, b, c = splats.conics[:, 0], splats.conics[:, 1], splats.conics[:, 2]
    Y = np.empty((K, 2, 2))
    Y[:, 0, 0], Y[:, 0, 1], Y[:, 1, 0], Y[:, 1, 1] = a, b, b, c
    G = np.zeros((K, 2, 2))
    G[:, 0, 0] = d_conics[:, 0]
    G[:, 0, 1] = d_conics[:, 1]
    G[:, 1, 1] = d_conics[:, 2]
    GM = -np.einsum("kij,kjl,klm->kim", Y, G, Y)
    # fold the two symmetric off-diagonal paths into one symmetric adjoint
    Gm = np.empty((K, 2, 2))
    Gm[:, 0, 0] = GM[:, 0, 0]
    Gm[:, 1, 1] = GM[:, 1, 1]
    Gm[:, 0, 1] = Gm[:, 1, 0] = 0.5 * (GM[:, 0, 1] + GM[:, 1, 0])

    U = cache.U
    cov3d = act["covariances"][idx]
    d_cov3d = np.einsum("kij,kim,kml->kjl", U, Gm, U)  # U^T Gm U
    dU = 2.0 * np.einsum("kij,kjl,klm->kim", Gm, U, cov3d)
    dJ = np.einsum("kij,lj->kil", dU, cam.rotation_w2c)  # dU @ W^T

    # J entries depend on the camera-space mean
    inv_z2 = inv_z * inv_z
    dtx = dJ[:, 0, 2] * (-fx * inv_z2)
    dty = dJ[:, 1, 2] * (-fy * inv_z2)
    dtz = (
        dJ[:, 0, 0] * (-fx * inv_z2)
        + dJ[:, 1, 1] * (-fy * inv_z2)
        + dJ[:, 0, 2] * (2 * fx * x * inv_z2 * inv_z)
        + dJ[:, 1, 2] * (2 * fy * y * inv_z2 * inv_z)
    )
    # screen center u = fx x/z + cx, v = fy y/z + cy
    du, dv = d_centers[:, 0], d_centers[:, 1]
    dtx += du * fx * inv_z
    dty += dv * fy * inv_z
    dtz += -du * fx * x * inv_z2 - dv * fy * y * inv_z2
    # blended depth is camera-space z
    dtz += d_depths

    dt = np.stack([dtx, dty, dtz], axis=1)
    d_pos = dt @ cam.rotation_w2c  # W^T dt per splat

    # covariance path down to log-scales and quaternions
    R = act["rotmats"][idx]
    s = act["scales"][idx]
    M2 = np.einsum("kji,kjl,klm->kim", R, d_cov3d, R)  # R^T Gs R
    d_log_scales = 2.0 * (s**2) * np.einsum("kii->ki", M2)
    dR = 2.0 * np.einsum("kij,kjl->kil", d_cov3d, R) * (s**2)[:, None, :]
    dRq = _rotation_quat_jacobian(act["quats"][idx])
    d_qn = np.einsum("kij,kijq->kq", dR, dRq)
    qn = act["quats"][idx]
    norms = act["quat_norms"][idx]
    d_q = (d_qn - np.einsum("kq,kq->k", d_qn, qn)[:, None] * qn) / norms[:, None]

    # SH color path, including the view-direction dependence on position
    d_sh, d_dir = sh_backward(d_colors, cache.view_dirs, act["sh"][idx], cache.color_live)
    dirs = cache.view_dirs
    d_pos += (d_dir - np.einsum("kq,kq->k", d_dir, dirs)[:, None] * dirs) / cache.dir_norms[:, None]

    o = splats.opacities
    d_logits = o * (1.0 - o) * d_opacities

    grads["positions"][idx] = d_pos
    grads["log_scales"][idx] = d_log_scales
    grads["rotations"][idx] = d_q
    grads["opacity_logits"][idx] = d_logits
    grads["sh"][idx] = d_sh
    view_norms[idx] = np.hypot(du * 0.5 * cam.width, dv * 0.5 * cam.height)
    return grads, view_norms
