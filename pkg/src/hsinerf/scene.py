"""Analytic facility-and-plume scene used as ground truth.

A ground disc, one building, one stack and a gas plume made of a chain of
Gaussian puffs drifting downwind.  Solids are near-opaque emitters; the
plume only has density in channels where the gas absorbs, and radiates
at a temperature that relaxes toward the air temperature downwind.  All
lengths are metres with the stack base on the ground at the origin by
default.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .render import RayBatch, look_at, rays_for_camera

SOLID_DENSITY = 1e4
BAND_UM = (7.8, 13.4)
PEAK_UM = 10.5
DEFAULT_TAU_OD = 0.03

# radiometric constants (SI)
_H = 6.62607015e-34
_C = 2.99792458e8
_KB = 1.380649e-23


def planck(wavelength_um, temperature):
    """Blackbody spectral radiance in W / (m^2 sr um)."""
    lam = np.asarray(wavelength_um, dtype=np.float64) * 1e-6
    T = np.asarray(temperature, dtype=np.float64)
    a = 2.0 * _H * _C ** 2 / lam ** 5
    b = _H * _C / (lam * _KB * T)
    return a / np.expm1(b) * 1e-6


def wavelength_grid(c, band=BAND_UM):
    if c < 1:
        raise ValueError("need at least one channel")
    return np.linspace(band[0], band[1], c)


def gas_absorption(wavelengths, peak_um=PEAK_UM, width_um=0.4, cutoff=0.01):
    """Single-peak absorption, normalised to 1 at its maximum channel.

    Channels below ``cutoff`` of the peak are set to exactly zero so the
    gas is invisible there.
    """
    wl = np.asarray(wavelengths, dtype=np.float64)
    a = np.exp(-0.5 * ((wl - peak_um) / width_um) ** 2)
    a /= a.max()
    a[a < cutoff] = 0.0
    return a


# ---------------------------------------------------------------------------
# scene description


@dataclass(frozen=True)
class Box:
    center: tuple
    half: tuple
    spectrum: np.ndarray = field(compare=False)

    def contains(self, x):
        c = np.asarray(self.center)
        h = np.asarray(self.half)
        return np.all(np.abs(x - c) <= h, axis=-1)


@dataclass(frozen=True)
class Cylinder:
    base: tuple
    height: float
    radius: float
    spectrum: np.ndarray = field(compare=False)

    def contains(self, x):
        b = np.asarray(self.base)
        r2 = (x[..., 0] - b[0]) ** 2 + (x[..., 1] - b[1]) ** 2
        return (r2 <= self.radius ** 2) & (x[..., 2] >= b[2]) & (x[..., 2] <= b[2] + self.height)

    @property
    def top(self):
        return np.asarray(self.base, dtype=np.float64) + np.array([0.0, 0.0, self.height])


@dataclass(frozen=True)
class Plume:
    """Chain of Gaussian puffs released from ``source`` along ``wind_dir``.

    Puff ``k`` sits ``s_k = s0 + k * wind_speed * release_interval`` metres
    downwind (plus a linear rise), has width ``sigma0 + spread_rate * s_k``
    and peak density ``peak_density * (sigma0 / sigma_k)^3`` per metre at
    the absorption peak.  The gas temperature relaxes from
    ``source_temp`` to ``air_temp`` with e-folding length ``cooling_length``.
    """

    source: tuple
    wind_dir: tuple
    wind_speed: float = 14.3 / 3.6
    release_interval: float = 1.0
    n_puffs: int = 26
    s0: float = 4.0
    sigma0: float = 3.0
    spread_rate: float = 0.08
    rise_rate: float = 0.1
    peak_density: float = 0.007
    source_temp: float = 350.0
    air_temp: float = 310.0
    cooling_length: float = 150.0

    @property
    def spacing(self):
        return self.wind_speed * self.release_interval

    def distances(self):
        return self.s0 + self.spacing * np.arange(self.n_puffs)

    def centers(self):
        s = self.distances()
        w = np.asarray(self.wind_dir, dtype=np.float64)
        up = np.array([0.0, 0.0, 1.0])
        return np.asarray(self.source)[None, :] + s[:, None] * w[None, :] + \
            (self.rise_rate * s)[:, None] * up[None, :]

    def widths(self):
        return self.sigma0 + self.spread_rate * self.distances()

    def peaks(self):
        return self.peak_density * (self.sigma0 / self.widths()) ** 3

    def bounds(self, n_sigma=5.0):
        c = self.centers()
        r = n_sigma * self.widths()[:, None]
        return (c - r).min(axis=0), (c + r).max(axis=0)

    def concentration(self, x, n_sigma=5.0):
        """Peak-channel density per metre at points ``x`` (..., 3)."""
        x = np.asarray(x, dtype=np.float64)
        flat = x.reshape(-1, 3)
        out = np.zeros(len(flat))
        lo, hi = self.bounds(n_sigma)
        near = np.all((flat >= lo) & (flat <= hi), axis=-1)
        if np.any(near):
            pts = flat[near]
            acc = np.zeros(len(pts))
            for c, s, q in zip(self.centers(), self.widths(), self.peaks()):
                d2 = np.sum((pts - c) ** 2, axis=-1)
                acc += q * np.exp(-0.5 * d2 / (s * s))
            out[near] = acc
        return out.reshape(x.shape[:-1])

    def downwind(self, x):
        w = np.asarray(self.wind_dir, dtype=np.float64)
        return np.maximum(0.0, (np.asarray(x) - np.asarray(self.source)) @ w)

    def temperature(self, x):
        s = self.downwind(x)
        return self.air_temp + (self.source_temp - self.air_temp) * np.exp(-s / self.cooling_length)


@dataclass(frozen=True)
class AnalyticScene:
    wavelengths: np.ndarray = field(compare=False)
    absorption: np.ndarray = field(compare=False)
    ground_height: float
    ground_spectrum: np.ndarray = field(compare=False)
    road_y: float
    road_half_width: float
    road_spectrum: np.ndarray = field(compare=False)
    building: Box
    stack: Cylinder
    plume: Plume
    background: np.ndarray = field(compare=False)
    bounding_radius: float = 120.0
    center: tuple = (0.0, 0.0, 0.0)
    solid_density: float = SOLID_DENSITY

    @property
    def channels(self):
        return len(self.wavelengths)

    @property
    def peak_channel(self):
        return int(np.argmax(self.absorption))

    def plume_radiance(self, x):
        """Plume emission (..., C) from its local temperature."""
        T = self.plume.temperature(x)
        return planck(self.wavelengths[None, :], np.reshape(T, (-1, 1))).reshape(
            *np.shape(x)[:-1], self.channels)

    def solid(self, x):
        """Return ``(inside any solid, surface spectrum)`` for points ``x`` (M, 3)."""
        x = np.asarray(x, dtype=np.float64)
        rel = x - np.asarray(self.center)
        in_sphere = np.sum(rel * rel, axis=-1) <= self.bounding_radius ** 2
        ground = in_sphere & (x[:, 2] <= self.ground_height)
        road = ground & (np.abs(x[:, 1] - self.road_y) <= self.road_half_width)
        building = self.building.contains(x)
        stack = self.stack.contains(x)
        spec = np.zeros((len(x), self.channels))
        spec[ground] = self.ground_spectrum
        spec[road] = self.road_spectrum
        spec[building] = self.building.spectrum
        spec[stack] = self.stack.spectrum
        return ground | building | stack, spec

    def equals(self, other):
        if self != other:
            return False
        for name in ("wavelengths", "absorption", "ground_spectrum", "road_spectrum",
                     "background"):
            if not np.array_equal(getattr(self, name), getattr(other, name)):
                return False
        return (np.array_equal(self.building.spectrum, other.building.spectrum)
                and np.array_equal(self.stack.spectrum, other.stack.spectrum))


def make_default_scene(c=8, seed=0, **plume_overrides):
    """Facility scene with parameters drawn deterministically from ``seed``.

    The seed jitters the wind azimuth and the building placement a little;
    everything else is fixed.
    """
    if c < 2:
        raise ValueError("need at least two channels")
    rng = np.random.default_rng(seed)
    wl = wavelength_grid(c)
    absorption = gas_absorption(wl)
    slope = (wl - wl.mean()) / (wl.max() - wl.min())
    ground = planck(wl, 300.0) * (0.95 + 0.02 * slope)
    road = planck(wl, 306.0) * 0.93
    quartz = 1.0 - 0.15 * np.exp(-0.5 * ((wl - 9.0) / 0.5) ** 2)
    concrete = planck(wl, 294.0) * 0.92 * quartz
    steel = planck(wl, 318.0) * 0.85

    az = math.radians(20.0 + rng.uniform(-10.0, 10.0))
    wind = (math.cos(az), math.sin(az), 0.0)
    bx, by = -38.0 + rng.uniform(-4, 4), 32.0 + rng.uniform(-4, 4)
    building = Box((bx, by, 10.0), (24.0, 14.0, 10.0), concrete)
    stack = Cylinder((0.0, 0.0, 0.0), 38.0, 3.0, steel)
    plume = Plume(source=tuple(stack.top), wind_dir=wind, **plume_overrides)
    return AnalyticScene(
        wavelengths=wl, absorption=absorption, ground_height=0.0, ground_spectrum=ground,
        road_y=-34.0, road_half_width=6.0, road_spectrum=road, building=building,
        stack=stack, plume=plume, background=np.zeros(c), bounding_radius=120.0,
        center=(0.0, 0.0, 0.0))


# ---------------------------------------------------------------------------
# fields and oracle rendering


def scene_fields(scene: AnalyticScene, x, j=None):
    """Density and radiance at points ``x`` (..., 3).

    Returns ``(sigma, radiance)`` of shape (..., C), or (...,) when a
    single channel index ``j`` is given.  Inside solids the density is
    ``scene.solid_density`` in every channel; the plume adds
    ``concentration * absorption_j``; radiance is the density-weighted
    mix of solid and plume emission.
    """
    x = np.asarray(x, dtype=np.float64)
    shape = x.shape[:-1]
    flat = x.reshape(-1, 3)
    inside, surf = scene.solid(flat)
    rel = flat - np.asarray(scene.center)
    in_sphere = np.sum(rel * rel, axis=-1) <= scene.bounding_radius ** 2
    conc = np.where(in_sphere, scene.plume.concentration(flat), 0.0)
    sig_s = np.where(inside, scene.solid_density, 0.0)[:, None]
    sig_p = conc[:, None] * scene.absorption[None, :]
    sigma = sig_s + sig_p
    rad = surf * (sig_s > 0)
    has_gas = np.flatnonzero(conc > 0)
    if has_gas.size:
        lp = scene.plume_radiance(flat[has_gas])
        s_s = sig_s[has_gas]
        s_p = sig_p[has_gas]
        tot = s_s + s_p
        mix = np.where(tot > 0, (s_s * surf[has_gas] + s_p * lp) / np.where(tot > 0, tot, 1.0),
                       surf[has_gas])
        rad[has_gas] = mix
    sigma = sigma.reshape(*shape, -1)
    rad = rad.reshape(*shape, -1)
    if j is not None:
        return sigma[..., j], rad[..., j]
    return sigma, rad


def oracle_render(scene: AnalyticScene, rays: RayBatch, n_steps=512, block=64):
    """Fixed-step midpoint ray march, one running transmittance per channel.

    Rays are in world units.  Returns (R, C) radiance.
    """
    if n_steps < 256:
        raise ValueError("oracle rendering needs n_steps >= 256")
    n = len(rays)
    h = (rays.far - rays.near) / n_steps
    color = np.zeros((n, scene.channels))
    trans = np.ones((n, scene.channels))
    for start in range(0, n_steps, block):
        steps = np.arange(start, min(start + block, n_steps))
        t = rays.near[:, None] + (steps[None, :] + 0.5) * h[:, None]
        pts = rays.origins[:, None, :] + t[..., None] * rays.dirs[:, None, :]
        sigma, rad = scene_fields(scene, pts)
        for b in range(len(steps)):
            tau = sigma[:, b] * h[:, None]
            color += trans * -np.expm1(-tau) * rad[:, b]
            trans *= np.exp(-tau)
    color += trans * scene.background[None, :]
    return color


def oracle_samples(rays: RayBatch, n_steps):
    """Sample distances matching :func:`oracle_render`'s march."""
    h = (rays.far - rays.near) / n_steps
    return rays.near[:, None] + (np.arange(n_steps)[None, :] + 0.5) * h[:, None]


def plume_optical_depth(scene: AnalyticScene, rays: RayBatch, n_steps=512, block=64,
                        visible_only=True):
    """Peak-channel plume optical depth along each ray.

    With ``visible_only`` the integral stops at the first solid sample, so
    gas hidden behind buildings or the ground does not count.
    """
    n = len(rays)
    h = (rays.far - rays.near) / n_steps
    tau = np.zeros(n)
    blocked = np.zeros(n, dtype=bool)
    a = scene.absorption[scene.peak_channel]
    for start in range(0, n_steps, block):
        steps = np.arange(start, min(start + block, n_steps))
        t = rays.near[:, None] + (steps[None, :] + 0.5) * h[:, None]
        pts = rays.origins[:, None, :] + t[..., None] * rays.dirs[:, None, :]
        flat = pts.reshape(-1, 3)
        inside, _ = scene.solid(flat)
        rel = flat - np.asarray(scene.center)
        in_sphere = np.sum(rel * rel, axis=-1) <= scene.bounding_radius ** 2
        conc = np.where(in_sphere, scene.plume.concentration(flat), 0.0).reshape(n, -1)
        inside = inside.reshape(n, -1)
        for b in range(len(steps)):
            if visible_only:
                blocked |= inside[:, b]
                tau += np.where(blocked, 0.0, conc[:, b] * a * h)
            else:
                tau += conc[:, b] * a * h
    return tau


# ---------------------------------------------------------------------------
# poses


@dataclass
class CameraPose:
    c2w: np.ndarray
    focal: float
    width: int
    height: int
    near: float
    far: float
    half: str = "top"
    file: str = ""

    @property
    def origin(self):
        return self.c2w[:3, 3]

    def rays(self, image_id=0):
        return rays_for_camera(self.c2w, self.focal, self.width, self.height,
                               self.near, self.far, image_id)


def default_focal(width, radius, bounding_radius):
    """Focal length in pixels so the bounding sphere fills the frame width."""
    return 0.5 * width * radius / bounding_radius


def hemisphere_poses(n, R=1000.0, seed=0, width=32, height=32, target=(0.0, 0.0, 0.0),
                     bounding_radius=120.0, focal=None):
    """Fibonacci-lattice cameras on the upper hemisphere, all aimed at ``target``.

    Heights follow ``z_i = R (i + 1/2) / n`` (equal-area bands) and the
    azimuth advances by the golden angle from a seed-dependent offset.
    Poses whose polar angle is at most the median are labelled ``top``.
    """
    if n < 4:
        raise ValueError("need at least four poses")
    rng = np.random.default_rng(seed)
    offset = rng.uniform(0.0, 2.0 * math.pi)
    golden = math.pi * (3.0 - math.sqrt(5.0))
    i = np.arange(n)
    z = (i + 0.5) / n
    r = np.sqrt(1.0 - z * z)
    phi = offset + golden * i
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
    polar = np.arccos(z)
    median = np.median(polar)
    target = np.asarray(target, dtype=np.float64)
    f = default_focal(width, R, bounding_radius) if focal is None else focal
    poses = []
    for k in range(n):
        origin = target + R * dirs[k]
        poses.append(CameraPose(look_at(origin, target), f, width, height,
                                R - bounding_radius, R + bounding_radius,
                                "top" if polar[k] <= median else "bottom",
                                f"view_{k:03d}.hsic"))
    return poses


def farthest_point_sampling(points, k, rng=None, start=None):
    """Greedy farthest-point order over ``points`` (N, D); returns ``k`` indices."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if k > n:
        raise ValueError("cannot pick more points than available")
    if k == 0:
        return []
    if start is None:
        start = 0 if rng is None else int(rng.integers(n))
    chosen = [start]
    dist = np.sum((points - points[start]) ** 2, axis=-1)
    for _ in range(k - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.sum((points - points[nxt]) ** 2, axis=-1))
    return chosen


def biased_fps(poses, k, top_frac=0.65, seed=0):
    """Pick ``k`` poses, ``ceil(top_frac * k)`` of them from the top half.

    Farthest-point sampling on camera origins runs separately in each
    half with a seeded random start.  If a half cannot fill its quota the
    surplus moves to the other half.  Returns indices into ``poses``.
    """
    if k > len(poses):
        raise ValueError("k exceeds the number of poses")
    rng = np.random.default_rng(seed)
    top = [i for i, p in enumerate(poses) if p.half == "top"]
    bottom = [i for i, p in enumerate(poses) if p.half != "top"]
    n_top = math.ceil(top_frac * k - 1e-9)
    n_bottom = k - n_top
    if n_top > len(top):
        warnings.warn(f"top pool has {len(top)} poses, quota {n_top}; moving surplus to bottom")
        n_bottom += n_top - len(top)
        n_top = len(top)
    if n_bottom > len(bottom):
        warnings.warn(f"bottom pool has {len(bottom)} poses, quota {n_bottom}; moving surplus to top")
        n_top += n_bottom - len(bottom)
        n_bottom = len(bottom)
    picked = []
    for pool, quota in ((top, n_top), (bottom, n_bottom)):
        if quota == 0:
            continue
        origins = np.array([poses[i].origin for i in pool])
        picked += [pool[j] for j in farthest_point_sampling(origins, quota, rng)]
    return picked


def random_patch_cameras(n, train_origins, target, bounding_radius, focal, width, height,
                         seed=0, jitter=0.05):
    """Cameras placed uniformly in the box spanned by the training origins.

    Each looks at ``target`` displaced by a uniform jitter of ``jitter *
    bounding_radius``; positions falling inside the bounding sphere are
    redrawn.
    """
    rng = np.random.default_rng(seed)
    lo = np.min(train_origins, axis=0)
    hi = np.max(train_origins, axis=0)
    target = np.asarray(target, dtype=np.float64)
    poses = []
    while len(poses) < n:
        o = rng.uniform(lo, hi)
        look = target + rng.uniform(-1.0, 1.0, size=3) * jitter * bounding_radius
        dist = np.linalg.norm(o - target)
        if dist <= 1.5 * bounding_radius:
            continue
        poses.append(CameraPose(look_at(o, look), focal, width, height,
                                dist - bounding_radius, dist + bounding_radius, "patch"))
    return poses


def plume_truth_mask(scene: AnalyticScene, pose: CameraPose, tau_od=DEFAULT_TAU_OD,
                     n_steps=512):
    """Pixels whose visible peak-channel plume optical depth exceeds ``tau_od``."""
    if tau_od <= 0:
        raise ValueError("tau_od must be positive")
    tau = plume_optical_depth(scene, pose.rays(), n_steps)
    return (tau > tau_od).reshape(pose.height, pose.width)


def render_view(scene: AnalyticScene, pose: CameraPose, n_steps=512):
    """Ground-truth cube (H, W, C) for one pose."""
    return oracle_render(scene, pose.rays(), n_steps).reshape(pose.height, pose.width, -1)


def emit_dataset(scene: AnalyticScene, poses, out_dir, n_steps=512, tau_od=DEFAULT_TAU_OD):
    """Write cubes, masks, poses and spectra for ``poses`` under ``out_dir``.

    Output is a pure function of its inputs; I/O errors are re-raised as
    ``OSError`` naming the offending path.
    """
    from pathlib import Path

    from . import formats

    out = Path(out_dir)
    try:
        (out / "cubes").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    frames = []
    for k, pose in enumerate(poses):
        name = pose.file or f"view_{k:03d}.hsic"
        cube = render_view(scene, pose, n_steps)
        mask = plume_truth_mask(scene, pose, tau_od, n_steps)
        formats.write_hsic(out / "cubes" / name, cube, scene.wavelengths)
        formats.write_mask_png(out / "masks" / (Path(name).stem + ".png"), mask)
        frames.append(replace(pose, file=f"cubes/{name}"))
    formats.write_poses(out / "poses.json", frames, scene.bounding_radius, scene.center)
    formats.write_json(out / "spectra.json", {
        "wavelengths_um": [float(v) for v in scene.wavelengths],
        "gas_absorption": [float(v) for v in scene.absorption],
        "tau_od": float(tau_od),
        "n_steps": int(n_steps),
    })
    return frames
