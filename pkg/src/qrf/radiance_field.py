"""Differentiable voxel radiance field with emission-absorption ray marching.

The scene is a dense 3-D grid of (density, albedo) values interpolated
trilinearly between voxel centers. Density is stored as a softplus
pre-activation so it stays non-negative under unconstrained optimization;
albedo is stored as a sigmoid pre-activation so it stays in [0, 1]. For a
single-photon sensor the albedo channel is the per-ray detection
probability, which relates to radiant flux phi via p = 1 - exp(-phi * tau);
``invert_flux`` undoes that response.

Rendering marches ``n_samples`` points along each ray and accumulates

    alpha_i = 1 - exp(-sigma_i * delta_i)
    T_i     = prod_{j<i} (1 - alpha_j)
    value   = sum_i T_i * alpha_i * albedo_i

which telescopes so that sum_i w_i + T_out == 1 exactly in exact
arithmetic. The same quadrature renders analytic test scenes (FluxScene),
so the simulator and the reconstructor share one renderer. Backward passes
are hand-derived analytic gradients of this quadrature, scatter-added into
the parameter grids through the trilinear weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .errors import InputError, StoreError

FIELD_MAGIC = b"QRFFLD01"


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_grad(x):
    return expit(x)


def sigmoid(x):
    return expit(x)


def sigmoid_grad(x):
    s = expit(x)
    return s * (1.0 - s)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in world units."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64))
        if self.lo.shape != (3,) or self.hi.shape != (3,):
            raise InputError("box corners must be 3-vectors")
        if not np.all(self.hi > self.lo):
            raise InputError("box must have positive extent on every axis")

    @property
    def size(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def ray_span(self, origins, dirs, t_near, t_far):
        """Clip [t_near, t_far] to the box; empty intersections collapse to zero length.

        origins, dirs: (B, 3). Returns (t0, t1) each (B,) with t1 >= t0.
        """
        origins = np.asarray(origins, dtype=np.float64)
        dirs = np.asarray(dirs, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            ta = (self.lo[None, :] - origins) * inv
            tb = (self.hi[None, :] - origins) * inv
        near = np.minimum(ta, tb)
        far = np.maximum(ta, tb)
        # Axis-parallel rays: inside the slab -> (-inf, inf), outside -> empty.
        par = dirs == 0.0
        if np.any(par):
            inside = (origins >= self.lo[None, :]) & (origins <= self.hi[None, :])
            near = np.where(par, np.where(inside, -np.inf, np.inf), near)
            far = np.where(par, np.where(inside, np.inf, -np.inf), far)
        lo = near.max(axis=1)
        hi = far.min(axis=1)
        tn = np.broadcast_to(np.asarray(t_near, dtype=np.float64), lo.shape)
        tf = np.broadcast_to(np.asarray(t_far, dtype=np.float64), hi.shape)
        # Misses collapse to a finite zero-length interval (renders transparent).
        t0 = np.clip(lo, tn, tf)
        t1 = np.maximum(np.clip(hi, tn, tf), t0)
        return t0, t1


@dataclass(frozen=True)
class Ray:
    """A camera ray o + t*d with a unit direction and a sampling interval."""

    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)
        if o.shape != (3,) or d.shape != (3,):
            raise InputError("ray origin and direction must be 3-vectors")
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise InputError("ray direction must be a unit vector")
        if not (0.0 <= self.t_near < self.t_far):
            raise InputError("ray requires 0 <= t_near < t_far")


class RenderResult(NamedTuple):
    """Output of rendering one ray."""

    value: float
    transmittance_out: float
    weights: np.ndarray


# ---------------------------------------------------------------------------
# Voxel field
# ---------------------------------------------------------------------------


class VoxelField:
    """Dense voxel grid of (density, albedo) with trilinear interpolation.

    Raw parameter grids hold pre-activations; ``density()`` and ``albedo()``
    return the activated values. Interpolation acts on activated values and
    clamps query points to the border voxel centers, so the field is defined
    (and continuous) on all of R^3.
    """

    def __init__(self, resolution, bounds: Box, density_raw=None, albedo_raw=None):
        self.resolution = tuple(int(n) for n in resolution)
        if len(self.resolution) != 3 or any(n < 1 for n in self.resolution):
            raise InputError("resolution must be three positive integers")
        self.bounds = bounds
        shape = self.resolution
        self.density_raw = (
            np.zeros(shape) if density_raw is None else np.asarray(density_raw, dtype=np.float64)
        )
        self.albedo_raw = (
            np.zeros(shape) if albedo_raw is None else np.asarray(albedo_raw, dtype=np.float64)
        )
        if self.density_raw.shape != shape or self.albedo_raw.shape != shape:
            raise InputError("parameter grids must match the stated resolution")

    @classmethod
    def initial(cls, resolution, bounds: Box,
                density_raw_init: float = -2.0, albedo_raw_init: float = 0.0) -> "VoxelField":
        """Near-empty field: low density, mid-gray albedo."""
        shape = tuple(int(n) for n in resolution)
        return cls(
            shape,
            bounds,
            density_raw=np.full(shape, density_raw_init, dtype=np.float64),
            albedo_raw=np.full(shape, albedo_raw_init, dtype=np.float64),
        )

    @property
    def n_params(self) -> int:
        return 2 * int(np.prod(self.resolution))

    def density(self) -> np.ndarray:
        return softplus(self.density_raw)

    def albedo(self) -> np.ndarray:
        return sigmoid(self.albedo_raw)

    # -- interpolation ------------------------------------------------------

    def _grid_coords(self, points):
        """Continuous grid coordinates (voxel-center units) and clamp mask."""
        res = np.array(self.resolution, dtype=np.float64)
        h = self.bounds.size / res
        g = (points - self.bounds.lo) / h - 0.5
        gc = np.clip(g, 0.0, res - 1.0)
        interior = (g > 0.0) & (g < res - 1.0)
        return gc, interior, h

    def interp_weights(self, points, need_dweights: bool = False):
        """Trilinear corner indices and weights for a set of points.

        points: (M, 3). Returns (corner_flat (8, M) int64, weights (8, M),
        dweights (8, M, 3) or None), corner-major for contiguous access.
        dweights holds d(weight)/d(world position).
        """
        points = np.asarray(points, dtype=np.float64)
        nx, ny, nz = self.resolution
        res = np.array([nx, ny, nz], dtype=np.int64)
        gc, interior, h = self._grid_coords(points)
        i0 = np.floor(gc).astype(np.int64)
        np.minimum(i0, res - 2, out=i0)
        np.maximum(i0, 0, out=i0)
        # Degenerate axes (resolution 1): single corner with full weight.
        f = np.clip(gc - i0, 0.0, 1.0)

        strides = np.array([ny * nz, nz, 1], dtype=np.int64)
        idx = (i0 * strides, np.minimum(i0 + 1, res - 1) * strides)  # (M, 3) each
        w = (1.0 - f, f)

        m = points.shape[0]
        weights = np.empty((8, m))
        corner_flat = np.empty((8, m), dtype=np.int64)
        for ab in range(4):
            a, b = ab >> 1, ab & 1
            wxy = w[a][:, 0] * w[b][:, 1]
            ixy = idx[a][:, 0] + idx[b][:, 1]
            for c in range(2):
                weights[2 * ab + c] = wxy * w[c][:, 2]
                corner_flat[2 * ab + c] = ixy + idx[c][:, 2]
        if not need_dweights:
            return corner_flat, weights, None

        dgc = np.where(interior, 1.0, 0.0) / h  # zero where clamped to the border
        dweights = np.empty((8, m, 3))
        for corner in range(8):
            a, b, c = corner >> 2, (corner >> 1) & 1, corner & 1
            sx = dgc[:, 0] if a else -dgc[:, 0]
            sy = dgc[:, 1] if b else -dgc[:, 1]
            sz = dgc[:, 2] if c else -dgc[:, 2]
            dweights[corner, :, 0] = sx * w[b][:, 1] * w[c][:, 2]
            dweights[corner, :, 1] = w[a][:, 0] * sy * w[c][:, 2]
            dweights[corner, :, 2] = w[a][:, 0] * w[b][:, 1] * sz
        return corner_flat, weights, dweights

    def sample(self, points):
        """(sigma, albedo) at world points, shape-preserving over leading dims."""
        pts = np.asarray(points, dtype=np.float64)
        flat = pts.reshape(-1, 3)
        corners, w, _ = self.interp_weights(flat)
        dens = self.density().reshape(-1)[corners]
        alb = self.albedo().reshape(-1)[corners]
        sigma = (w * dens).sum(axis=0)
        albedo = (w * alb).sum(axis=0)
        return sigma.reshape(pts.shape[:-1]), albedo.reshape(pts.shape[:-1])

    # -- serialization ------------------------------------------------------

    def save(self, path) -> None:
        """Checkpoint: 8-byte magic, u32 resolution triplet, f64 bounds, raw f32 grids."""
        import struct

        with open(path, "wb") as f:
            f.write(FIELD_MAGIC)
            f.write(struct.pack("<III", *self.resolution))
            f.write(np.concatenate([self.bounds.lo, self.bounds.hi]).astype("<f8").tobytes())
            f.write(self.density_raw.astype("<f4").tobytes())
            f.write(self.albedo_raw.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "VoxelField":
        import struct

        with open(path, "rb") as f:
            magic = f.read(8)
            if magic != FIELD_MAGIC:
                raise StoreError(f"not a field checkpoint: bad magic {magic!r}")
            resolution = struct.unpack("<III", f.read(12))
            b = np.frombuffer(f.read(48), dtype="<f8")
            bounds = Box(b[:3].copy(), b[3:].copy())
            count = int(np.prod(resolution))
            dens = np.frombuffer(f.read(4 * count), dtype="<f4").astype(np.float64)
            alb = np.frombuffer(f.read(4 * count), dtype="<f4").astype(np.float64)
            if dens.size != count or alb.size != count:
                raise StoreError("field checkpoint truncated")
        return cls(resolution, bounds, dens.reshape(resolution), alb.reshape(resolution))


# ---------------------------------------------------------------------------
# Analytic scenes (simulation ground truth)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    density: float
    emission: float

    def inside(self, points):
        c = np.asarray(self.center, dtype=np.float64)
        return ((points - c) ** 2).sum(axis=-1) <= self.radius**2


@dataclass(frozen=True)
class Slab:
    """Homogeneous layer lo <= x[axis] <= hi."""

    axis: int
    lo: float
    hi: float
    density: float
    emission: float

    def inside(self, points):
        x = points[..., self.axis]
        return (x >= self.lo) & (x <= self.hi)


@dataclass
class FluxScene:
    """Union of analytic homogeneous primitives used as simulation ground truth.

    Where primitives overlap, densities add and the emission is the
    density-weighted mean, so a single primitive in isolation keeps its exact
    closed-form attenuation integral.
    """

    primitives: list
    bounds: Box

    def sample(self, points):
        pts = np.asarray(points, dtype=np.float64)
        sigma = np.zeros(pts.shape[:-1])
        weighted = np.zeros(pts.shape[:-1])
        for p in self.primitives:
            mask = p.inside(pts)
            sigma += np.where(mask, p.density, 0.0)
            weighted += np.where(mask, p.density * p.emission, 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            emission = np.where(sigma > 0.0, weighted / np.where(sigma > 0.0, sigma, 1.0), 0.0)
        return sigma, emission


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


@dataclass
class RenderCache:
    """Intermediates needed by the backward pass (one batch)."""

    points: np.ndarray        # (B, n, 3)
    t_values: np.ndarray      # (B, n)
    delta: np.ndarray         # (B,)
    sigma: np.ndarray         # (B, n)
    albedo: np.ndarray        # (B, n)
    alpha: np.ndarray         # (B, n)
    transmittance: np.ndarray  # (B, n) T_i before each sample
    weights: np.ndarray       # (B, n)
    corners: np.ndarray | None = None    # (B*n, 8) for voxel fields
    interp_w: np.ndarray | None = None   # (B*n, 8)
    interp_dw: np.ndarray | None = None  # (B*n, 8, 3)


@dataclass
class RenderBatch:
    values: np.ndarray             # (B,)
    transmittance_out: np.ndarray  # (B,)
    weights: np.ndarray            # (B, n)
    cache: RenderCache | None = None


@dataclass
class FieldGradients:
    density_raw: np.ndarray
    albedo_raw: np.ndarray


def render_rays(field, origins, dirs, t_near, t_far, n_samples: int,
                clip_to_bounds: bool = True, jitter_rng=None,
                need_cache: bool = False) -> RenderBatch:
    """March a batch of rays through ``field``.

    ``field`` is anything with ``sample(points)`` (VoxelField or FluxScene).
    With ``clip_to_bounds`` the sampling interval is intersected with
    ``field.bounds``; rays that miss render to value 0 with transmittance 1.
    ``jitter_rng`` switches midpoint sampling to stratified sampling.
    """
    if n_samples < 2:
        raise InputError("n_samples must be >= 2")
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    b = origins.shape[0]
    t_near = np.broadcast_to(np.asarray(t_near, dtype=np.float64), (b,))
    t_far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (b,))
    if np.any(t_near >= t_far):
        raise InputError("degenerate ray: t_near must be < t_far")

    if clip_to_bounds:
        t0, t1 = field.bounds.ray_span(origins, dirs, t_near, t_far)
    else:
        t0, t1 = t_near.copy(), t_far.copy()

    if jitter_rng is None:
        fracs = (np.arange(n_samples) + 0.5) / n_samples
        fracs = np.broadcast_to(fracs, (b, n_samples))
    else:
        fracs = (np.arange(n_samples) + jitter_rng.random((b, n_samples))) / n_samples
    span = (t1 - t0)[:, None]
    t = t0[:, None] + fracs * span
    delta = (t1 - t0) / n_samples

    points = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    needs_interp = need_cache and isinstance(field, VoxelField)
    if needs_interp:
        flat_pts = points.reshape(-1, 3)
        corners, iw, idw = field.interp_weights(flat_pts)
        dens = field.density().reshape(-1)[corners]
        alb_grid = field.albedo().reshape(-1)[corners]
        sigma = (iw * dens).sum(axis=0).reshape(b, n_samples)
        albedo = (iw * alb_grid).sum(axis=0).reshape(b, n_samples)
    else:
        corners = iw = idw = None
        sigma, albedo = field.sample(points)

    tau = sigma * delta[:, None]
    alpha = -np.expm1(-tau)
    cum = np.cumsum(tau, axis=1)
    trans = np.exp(-(cum - tau))  # exclusive prefix: T_i
    weights = trans * alpha
    values = (weights * albedo).sum(axis=1)
    t_out = np.exp(-cum[:, -1])

    cache = None
    if need_cache:
        cache = RenderCache(points, t, delta, sigma, albedo, alpha, trans, weights,
                            corners, iw, idw)
    return RenderBatch(values, t_out, weights, cache)


def render_rays_backward(field: VoxelField, batch: RenderBatch, upstream,
                         need_ray_grads: bool = False):
    """Analytic gradients of ``render_rays`` values w.r.t. raw field parameters.

    upstream: (B,) dL/dvalue. Returns FieldGradients, plus (dL/dorigin,
    dL/ddirection) each (B, 3) when ``need_ray_grads`` (only valid when the
    forward pass ran with ``clip_to_bounds=False`` so the t-grid is fixed).
    The scatter into the parameter grids is a single deterministic reduction,
    so gradients do not depend on any parallel schedule.
    """
    c = batch.cache
    if c is None or c.corners is None:
        raise InputError("backward pass needs a cached forward pass over a VoxelField")
    g = np.asarray(upstream, dtype=np.float64)
    b, n = c.sigma.shape

    wa = c.weights * c.albedo
    csum = np.cumsum(wa, axis=1)
    suffix = csum[:, -1:] - csum  # sum_{j>i} w_j a_j
    trans_next = c.transmittance * (1.0 - c.alpha)
    d_albedo = g[:, None] * c.weights
    d_sigma = g[:, None] * c.delta[:, None] * (trans_next * c.albedo - suffix)

    flat_d_sigma = d_sigma.reshape(-1)
    flat_d_albedo = d_albedo.reshape(-1)
    dens_act = softplus_grad(field.density_raw).reshape(-1)
    alb_act = sigmoid_grad(field.albedo_raw).reshape(-1)

    ncells = int(np.prod(field.resolution))
    idx = c.corners.reshape(-1)
    per_corner_sigma = (flat_d_sigma[None, :] * c.interp_w).reshape(-1)
    per_corner_albedo = (flat_d_albedo[None, :] * c.interp_w).reshape(-1)
    g_density = np.bincount(idx, weights=per_corner_sigma, minlength=ncells) * dens_act
    g_albedo = np.bincount(idx, weights=per_corner_albedo, minlength=ncells) * alb_act
    grads = FieldGradients(
        g_density.reshape(field.resolution), g_albedo.reshape(field.resolution)
    )
    if not need_ray_grads:
        return grads

    # Spatial gradients of the interpolated sigma/albedo fields at each sample.
    if c.interp_dw is None:
        _, _, c.interp_dw = field.interp_weights(c.points.reshape(-1, 3),
                                                 need_dweights=True)
    dens_corner = softplus(field.density_raw).reshape(-1)[c.corners]
    alb_corner = sigmoid(field.albedo_raw).reshape(-1)[c.corners]
    grad_sigma_x = np.einsum("cm,cmk->mk", dens_corner, c.interp_dw)
    grad_albedo_x = np.einsum("cm,cmk->mk", alb_corner, c.interp_dw)
    d_points = (flat_d_sigma[:, None] * grad_sigma_x
                + flat_d_albedo[:, None] * grad_albedo_x).reshape(b, n, 3)
    d_origin = d_points.sum(axis=1)
    d_dir = (d_points * c.t_values[..., None]).sum(axis=1)
    return grads, d_origin, d_dir


def render_ray(field, ray: Ray, n_samples: int, clip_to_bounds: bool = True) -> RenderResult:
    """Render a single ray; see ``render_rays``."""
    batch = render_rays(field, ray.origin[None], ray.direction[None],
                        ray.t_near, ray.t_far, n_samples, clip_to_bounds=clip_to_bounds)
    return RenderResult(float(batch.values[0]), float(batch.transmittance_out[0]),
                        batch.weights[0])


def render_ray_backward(field: VoxelField, ray: Ray, n_samples: int,
                        upstream_gradient: float) -> FieldGradients:
    """Gradients of render_ray's value w.r.t. the raw density/albedo grids."""
    batch = render_rays(field, ray.origin[None], ray.direction[None],
                        ray.t_near, ray.t_far, n_samples, need_cache=True)
    return render_rays_backward(field, batch, np.array([upstream_gradient]))


# ---------------------------------------------------------------------------
# Flux inversion and tonemapping
# ---------------------------------------------------------------------------


class FluxEstimate(NamedTuple):
    flux: np.ndarray | float
    saturated: np.ndarray | bool


def invert_flux(p_hat, tau: float, eps: float = 1e-6) -> FluxEstimate:
    """Recover flux from a detection probability: phi = -ln(1 - p) / tau.

    Probabilities at or above 1 - eps are clamped there and flagged as
    saturated; the inversion diverges at p = 1.
    """
    if tau <= 0:
        raise InputError("tau must be positive")
    p = np.asarray(p_hat, dtype=np.float64)
    if np.any(p < 0.0):
        raise InputError("detection probability must be non-negative")
    saturated = p >= 1.0 - eps
    p_safe = np.where(saturated, 1.0 - eps, p)
    flux = -np.log1p(-p_safe) / tau
    if np.isscalar(p_hat) or p.ndim == 0:
        return FluxEstimate(float(flux), bool(saturated))
    return FluxEstimate(flux, saturated)


def mle_flux_from_frames(binary_mean, tau: float, eps: float = 1e-6) -> FluxEstimate:
    """Maximum-likelihood flux for a static scene from the mean of its binary frames.

    The empirical detection rate of a static pixel estimates p = 1 - exp(-phi*tau);
    inverting that response is the closed-form MLE and serves as the
    reconstruction oracle the trained field is compared against.
    """
    return invert_flux(binary_mean, tau, eps=eps)


class TonemapResult(NamedTuple):
    image: np.ndarray
    clipped_negative: bool


def tonemap(linear, gamma: float = 2.4, scale: float | None = None) -> TonemapResult:
    """Normalize and gamma-encode a linear image into [0, 1].

    ``scale`` is the linear value mapped to 1.0 (default: the image maximum).
    Negative inputs are clamped to zero and flagged.
    """
    x = np.asarray(linear, dtype=np.float64)
    clipped = bool(np.any(x < 0.0))
    x = np.maximum(x, 0.0)
    if scale is None:
        scale = float(x.max()) if x.size else 1.0
    if scale <= 0.0:
        return TonemapResult(np.zeros_like(x), clipped)
    out = np.clip(x / scale, 0.0, 1.0) ** (1.0 / gamma)
    return TonemapResult(out, clipped)


def binary_mean_to_linear(binary_mean, factor: float = 1.0):
    """Invert a Bernoulli response: mean of binary frames -> linear intensity.

    Assumes each frame fired with p = 1 - exp(-factor * linear); the frame
    average tends to p, so linear = -ln(1 - mean) / factor.
    """
    if factor <= 0:
        raise InputError("factor must be positive")
    m = np.asarray(binary_mean, dtype=np.float64)
    if np.any((m < 0.0) | (m >= 1.0)):
        raise InputError("binary mean must lie in [0, 1)")
    return -np.log1p(-m) / factor
