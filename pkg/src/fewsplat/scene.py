"""Optimizable Gaussian scene representation.

The cloud is stored struct-of-arrays: one numpy array per parameter, all
index-aligned. Raw parameters are unconstrained; activations are applied
on use (exp for scale, normalization for rotation, sigmoid for opacity).
Color is degree-1 real spherical harmonics: 1 DC + 3 linear coefficients
per channel, 12 values per Gaussian.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .errors import DegenerateParameterError, ValidationError
from .runtime import active_dtype

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

# Raw quaternions below this norm are rejected at ingestion and floored
# during optimization steps (a step can momentarily shrink the raw values).
QUAT_NORM_FLOOR = 1e-12

PARAM_FIELDS = ("positions", "log_scales", "rotations", "opacity_logits", "sh")


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def rgb_to_dc(rgb01):
    """DC coefficient reproducing a flat [0,1] color through the SH offset."""
    return (np.asarray(rgb01, dtype=np.float64) - 0.5) / SH_C0


def dc_to_rgb(dc):
    return np.asarray(dc, dtype=np.float64) * SH_C0 + 0.5


def normalize_quaternions(quats, floor: bool = False):
    """Return unit quaternions and their raw norms.

    With floor=False a degenerate raw quaternion raises; with floor=True the
    norm is floored at QUAT_NORM_FLOOR (used inside training steps).
    """
    q = np.asarray(quats, dtype=np.float64)
    norms = np.linalg.norm(q, axis=-1)
    if floor:
        norms = np.maximum(norms, QUAT_NORM_FLOOR)
    elif np.any(norms < QUAT_NORM_FLOOR) or not np.all(np.isfinite(norms)):
        raise DegenerateParameterError("quaternion norm is zero or non-finite")
    return q / norms[..., None], norms


def quaternion_to_rotation(q):
    """Rotation matrices (..., 3, 3) from unit quaternions (..., 4), (w,x,y,z)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def covariance_from_params(log_scale, rotation):
    """3D covariance R S S^T R^T from raw log-scales and raw quaternions.

    Accepts a single Gaussian (shapes (3,), (4,)) or a batch ((N,3), (N,4)).
    Non-finite inputs or zero quaternions are rejected.
    """
    log_scale = np.asarray(log_scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    if not (np.all(np.isfinite(log_scale)) and np.all(np.isfinite(rotation))):
        raise DegenerateParameterError("non-finite covariance parameters")
    qn, _ = normalize_quaternions(rotation)
    R = quaternion_to_rotation(qn)
    s2 = np.exp(2.0 * log_scale)
    # R diag(s^2) R^T, batched
    return np.einsum("...ik,...k,...jk->...ij", R, s2, R)


def eval_sh_colors(sh, view_dirs, clamp_upper: bool = False):
    """Evaluate degree-1 SH color for unit view directions.

    sh: (..., 3, 4) coefficients (channel-major, DC first); view_dirs (..., 3).
    Returns colors (..., 3) clamped at 0; clamp_upper additionally clips at 1
    (display convention -- the upper clamp is skipped during optimization so
    over-bright splats keep their gradients).
    """
    sh = np.asarray(sh, dtype=np.float64)
    d = np.asarray(view_dirs, dtype=np.float64)
    basis = sh_basis(d)
    raw = 0.5 + np.einsum("...cd,...d->...c", sh, basis)
    out = np.maximum(raw, 0.0)
    if clamp_upper:
        out = np.minimum(out, 1.0)
    return out


def sh_basis(view_dirs):
    """Degree-1 basis [Y00, Y1-1, Y10, Y11] evaluated at unit directions."""
    d = np.asarray(view_dirs, dtype=np.float64)
    b = np.empty(d.shape[:-1] + (4,), dtype=np.float64)
    b[..., 0] = SH_C0
    b[..., 1] = -SH_C1 * d[..., 1]
    b[..., 2] = SH_C1 * d[..., 2]
    b[..., 3] = -SH_C1 * d[..., 0]
    return b


def eval_sh_with_cache(sh, view_dirs):
    """Forward SH evaluation returning (colors, pre-clamp mask, basis)."""
    sh = np.asarray(sh, dtype=np.float64)
    basis = sh_basis(view_dirs)
    raw = 0.5 + np.einsum("...cd,...d->...c", sh, basis)
    live = raw > 0.0
    return np.maximum(raw, 0.0), live, basis


def sh_backward(dL_dcolor, view_dirs, sh, clamp_mask=None):
    """Adjoint of eval_sh_colors.

    Returns (dL_dsh (...,3,4), dL_ddir (...,3)). clamp_mask marks channels
    that were NOT clamped at 0 in the forward pass; clamped channels get zero
    gradient. The direction gradient covers the linear basis terms.
    """
    sh = np.asarray(sh, dtype=np.float64)
    d = np.asarray(view_dirs, dtype=np.float64)
    g = np.asarray(dL_dcolor, dtype=np.float64)
    if clamp_mask is not None:
        g = g * clamp_mask
    basis = sh_basis(d)
    dL_dsh = np.einsum("...c,...d->...cd", g, basis)
    # raw_c = 0.5 + k0 C0 - k1 C1 dy + k2 C1 dz - k3 C1 dx
    dL_ddir = np.empty_like(d)
    dL_ddir[..., 0] = np.einsum("...c,...c->...", g, -SH_C1 * sh[..., 3])
    dL_ddir[..., 1] = np.einsum("...c,...c->...", g, -SH_C1 * sh[..., 1])
    dL_ddir[..., 2] = np.einsum("...c,...c->...", g, SH_C1 * sh[..., 2])
    return dL_dsh, dL_ddir


@dataclass
class GaussianCloud:
    """Struct-of-arrays Gaussian cloud with gradient and densify buffers.

    sh is stored (N, 3, 4): channel-major, coefficient 0 is the DC term.
    scene_extent is the camera bounding-sphere radius used to scale the
    position learning rate and the densify size threshold.
    """

    positions: NDArray
    log_scales: NDArray
    rotations: NDArray
    opacity_logits: NDArray
    sh: NDArray
    scene_extent: float = 1.0

    grads: dict = field(default_factory=dict, repr=False)
    grad_accum: NDArray | None = field(default=None, repr=False)
    grad_count: NDArray | None = field(default=None, repr=False)

    def __post_init__(self):
        n = len(self.positions)
        dt = np.asarray(self.positions).dtype
        self.positions = np.ascontiguousarray(self.positions, dtype=dt).reshape(n, 3)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=dt).reshape(n, 3)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=dt).reshape(n, 4)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=dt).reshape(n)
        self.sh = np.ascontiguousarray(self.sh, dtype=dt).reshape(n, 3, 4)
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n, dtype=np.float64)
        if self.grad_count is None:
            self.grad_count = np.zeros(n, dtype=np.int64)

    @property
    def count(self) -> int:
        return len(self.positions)

    @property
    def dtype(self) -> np.dtype:
        return self.positions.dtype

    def zero_grads(self):
        for name in PARAM_FIELDS:
            arr = getattr(self, name)
            self.grads[name] = np.zeros_like(arr, dtype=np.float64)

    def param_arrays(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def activate(self, index: int):
        """Activated (position, covariance, opacity, sh) for one Gaussian."""
        if not 0 <= index < self.count:
            raise IndexError(f"gaussian index {index} out of range [0, {self.count})")
        cov = covariance_from_params(self.log_scales[index], self.rotations[index])
        opacity = float(sigmoid(self.opacity_logits[index]))
        return (
            np.asarray(self.positions[index], dtype=np.float64),
            cov,
            opacity,
            np.asarray(self.sh[index], dtype=np.float64),
        )

    def activate_all(self, floor_quaternions: bool = True):
        """Vectorized activations used by the renderer.

        Returns a dict with positions, scales, unit quaternions, rotation
        matrices, covariances, opacities, raw quaternion norms.
        """
        qn, norms = normalize_quaternions(self.rotations, floor=floor_quaternions)
        R = quaternion_to_rotation(qn)
        scales = np.exp(np.asarray(self.log_scales, dtype=np.float64))
        cov = np.einsum("nik,nk,njk->nij", R, scales**2, R)
        return {
            "positions": np.asarray(self.positions, dtype=np.float64),
            "scales": scales,
            "quats": qn,
            "quat_norms": norms,
            "rotmats": R,
            "covariances": cov,
            "opacities": sigmoid(self.opacity_logits),
            "sh": np.asarray(self.sh, dtype=np.float64),
        }

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            positions=self.positions.copy(),
            log_scales=self.log_scales.copy(),
            rotations=self.rotations.copy(),
            opacity_logits=self.opacity_logits.copy(),
            sh=self.sh.copy(),
            scene_extent=self.scene_extent,
            grad_accum=self.grad_accum.copy(),
            grad_count=self.grad_count.copy(),
        )

    def validate(self):
        """Check the cloud invariants; raises on violation."""
        n = self.count
        for name in PARAM_FIELDS:
            arr = getattr(self, name)
            if len(arr) != n:
                raise ValidationError(f"{name} length {len(arr)} != count {n}")
        if len(self.grad_accum) != n or len(self.grad_count) != n:
            raise ValidationError("densify stat buffers out of sync with cloud count")
        if np.any(self.grad_accum < 0):
            raise ValidationError("densify stats must be non-negative")
        normalize_quaternions(self.rotations)  # raises on degenerate input
        if not all(np.all(np.isfinite(getattr(self, f))) for f in PARAM_FIELDS):
            raise ValidationError("cloud contains non-finite parameters")


# --- PLY checkpoint format -------------------------------------------------
#
# Binary little-endian PLY, one vertex per Gaussian:
#   x,y,z, f_dc_0..2, f_rest_0..8, opacity, scale_0..2, rot_0..3   (float32)
# f_rest is channel-major: f_rest_[ch*3 + k] = linear coefficient k of
# channel ch. opacity/scale/rot hold the raw (pre-activation) parameters,
# the layout splat viewers expect.

PLY_PROPERTIES = (
    ["x", "y", "z"]
    + [f"f_dc_{i}" for i in range(3)]
    + [f"f_rest_{i}" for i in range(9)]
    + ["opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)


def save_ply(cloud: GaussianCloud, path):
    """Write the cloud as a binary little-endian PLY splat file."""
    n = cloud.count
    rec = np.empty((n, len(PLY_PROPERTIES)), dtype="<f4")
    rec[:, 0:3] = cloud.positions
    rec[:, 3:6] = cloud.sh[:, :, 0]
    rec[:, 6:15] = cloud.sh[:, :, 1:4].reshape(n, 9)
    rec[:, 15] = cloud.opacity_logits
    rec[:, 16:19] = cloud.log_scales
    rec[:, 19:23] = cloud.rotations
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in PLY_PROPERTIES]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


def load_ply(path, scene_extent: float = 1.0, dtype=None) -> GaussianCloud:
    """Read a splat PLY written by save_ply (unknown float properties are skipped)."""
    dtype = active_dtype() if dtype is None else np.dtype(dtype)
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"ply":
            raise ValidationError(f"{path}: not a PLY file")
        fmt = fh.readline().strip()
        if fmt != b"format binary_little_endian 1.0":
            raise ValidationError(f"{path}: unsupported PLY format line {fmt!r}")
        names = []
        n = None
        while True:
            line = fh.readline()
            if not line:
                raise ValidationError(f"{path}: truncated PLY header")
            parts = line.strip().decode("ascii").split()
            if not parts or parts[0] == "comment":
                continue
            if parts[0] == "element":
                if parts[1] != "vertex":
                    raise ValidationError(f"{path}: unexpected PLY element {parts[1]!r}")
                n = int(parts[2])
            elif parts[0] == "property":
                if parts[1] != "float":
                    raise ValidationError(f"{path}: only float properties supported")
                names.append(parts[2])
            elif parts[0] == "end_header":
                break
        if n is None:
            raise ValidationError(f"{path}: PLY header missing vertex element")
        missing = [p for p in PLY_PROPERTIES if p not in names]
        if missing:
            raise ValidationError(f"{path}: PLY missing properties {missing}")
        payload = fh.read(4 * len(names) * n)
        if len(payload) != 4 * len(names) * n:
            raise ValidationError(f"{path}: truncated PLY payload")
        data = np.frombuffer(payload, dtype="<f4").reshape(n, len(names))
    col = {name: i for i, name in enumerate(names)}

    def take(fields):
        return data[:, [col[f] for f in fields]].astype(dtype)

    sh = np.empty((n, 3, 4), dtype=dtype)
    sh[:, :, 0] = take([f"f_dc_{i}" for i in range(3)])
    sh[:, :, 1:4] = take([f"f_rest_{i}" for i in range(9)]).reshape(n, 3, 3)
    cloud = GaussianCloud(
        positions=take(["x", "y", "z"]),
        log_scales=take([f"scale_{i}" for i in range(3)]),
        rotations=take([f"rot_{i}" for i in range(4)]),
        opacity_logits=take(["opacity"]).reshape(n),
        sh=sh,
        scene_extent=scene_extent,
    )
    normalize_quaternions(cloud.rotations)  # ingestion-time degeneracy check
    return cloud
