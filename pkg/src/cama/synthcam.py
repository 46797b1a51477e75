"""Synthetic camera models: a simplified sensor output model plus in-camera processing.

Each :class:`CameraModelSpec` renders a radiance field ``u`` as

    x0 = (g * v(r) * u) ** gamma
    x  = x0 * (1 + gamma * prnu) + gamma * x0 * noise_std / u * eta,  quantized

followed by RGGB sampling, demosaicing and an optional JPEG round trip. The
vignette ``v(r) = 1 / (1 + s r^2)`` is a low-frequency defect, the PRNU plane
``prnu`` a fixed multiplicative high-frequency one.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from . import kernels
from .imaging import Image, cfa_masks, demosaic_bilinear, from_uint8, mosaic, to_uint8, write_png

log = logging.getLogger(__name__)

DEMOSAIC_VARIANTS = ("bilinear", "smooth-hue")


@dataclass(frozen=True)
class CameraModelSpec:
    model_id: int
    gain: tuple = (1.0, 1.0, 1.0)
    gamma: float = 1.0
    prnu_seed: int = 0
    prnu_std: float = 0.02
    noise_std: float = 0.01
    quant_levels: int = 256
    vignette_strength: float = 0.0
    demosaic_variant: str = "bilinear"
    jpeg_quality: Optional[int] = 95  # None means lossless

    def __post_init__(self):
        if len(self.gain) != 3 or min(self.gain) <= 0:
            raise ValueError("gain must be three positive values")
        if not 0 < self.gamma <= 2:
            raise ValueError("gamma must lie in (0, 2]")
        if self.vignette_strength < 0 or self.noise_std < 0 or self.prnu_std < 0:
            raise ValueError("vignette, noise and PRNU strengths must be non-negative")
        if self.quant_levels < 2:
            raise ValueError("quant_levels must be at least 2")
        if self.demosaic_variant not in DEMOSAIC_VARIANTS:
            raise ValueError(f"unknown demosaic variant {self.demosaic_variant!r}")
        if self.jpeg_quality is not None and not 1 <= self.jpeg_quality <= 100:
            raise ValueError("jpeg_quality must be in 1..100 or None")

    def prnu_plane(self, h: int, w: int) -> np.ndarray:
        return np.random.default_rng(self.prnu_seed).normal(0.0, self.prnu_std, size=(h, w, 3))


@dataclass
class Scene:
    radiance: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.radiance = np.asarray(self.radiance, dtype=np.float64)
        if self.radiance.ndim != 3 or self.radiance.shape[2] != 3:
            raise ValueError("radiance must be H x W x 3")
        if self.radiance.min() <= 0 or self.radiance.max() > 1:
            raise ValueError("radiance must lie in (0, 1]")


def make_scene(seed: int, h: int = 64, w: int = 64) -> Scene:
    """Band-limited noise over a random smooth gradient.

    Luminance varies freely; chroma stays within about a percent of neutral so
    that colour casts introduced by a camera model remain measurable.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    yy, xx = yy / max(h - 1, 1) - 0.5, xx / max(w - 1, 1) - 0.5
    tint = 1.0 + rng.normal(0.0, 0.005, size=3)
    lum = rng.uniform(0.3, 0.7) + rng.uniform(-0.3, 0.3) * yy + rng.uniform(-0.3, 0.3) * xx
    sigma = rng.uniform(1.5, 3.0)
    texture = ndimage.gaussian_filter(rng.normal(size=(h, w, 3)), sigma=(sigma, sigma, 0), mode="wrap")
    luma = texture.mean(axis=-1, keepdims=True)
    texture = luma + 0.05 * (texture - luma)  # mostly achromatic detail
    texture *= rng.uniform(0.06, 0.14) / (texture.std() + 1e-12)
    return Scene(np.clip(lum[..., None] * tint + texture, 0.02, 1.0), seed)


def vignette(h: int, w: int, strength: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    r2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / (cy**2 + cx**2)
    return 1.0 / (1.0 + strength * r2)


def demosaic_smooth_hue(plane: np.ndarray) -> np.ndarray:
    """Bilinear green, then red and blue by interpolating the colour ratio to green."""
    h, w = plane.shape
    masks = cfa_masks(h, w)
    green = kernels.bilinear_fill(plane, masks[1])
    safe_g = np.maximum(green, 1e-3)
    out = np.empty((h, w, 3))
    out[..., 1] = green
    for c in (0, 2):
        ratio = kernels.bilinear_fill(plane / safe_g, masks[c])
        out[..., c] = np.where(masks[c] > 0, plane, ratio * safe_g)
    return np.clip(out, 0.0, 1.0)


def jpeg_roundtrip(x: np.ndarray, quality: int) -> np.ndarray:
    buf = io.BytesIO()
    PILImage.fromarray(to_uint8(x), mode="RGB").save(buf, format="JPEG", quality=int(quality), subsampling=0)
    buf.seek(0)
    with PILImage.open(buf) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def sensor_response(scene: Scene, spec: CameraModelSpec) -> np.ndarray:
    """Stages 1-3: vignette, gain/gamma, PRNU and shot-like noise, quantization."""
    u = scene.radiance
    h, w = u.shape[:2]
    u = u * vignette(h, w, spec.vignette_strength)[..., None]
    x0 = (np.asarray(spec.gain) * u) ** spec.gamma
    eta = np.random.default_rng(scene.seed).standard_normal(u.shape)
    x = x0 * (1.0 + spec.gamma * spec.prnu_plane(h, w)) + spec.gamma * x0 * spec.noise_std / u * eta
    q = spec.quant_levels - 1
    return np.round(np.clip(x, 0.0, 1.0) * q) / q


def render(scene: Scene, spec: CameraModelSpec) -> Image:
    x = sensor_response(scene, spec)
    plane = mosaic(x)
    if spec.demosaic_variant == "bilinear":
        x = demosaic_bilinear(plane)
    else:
        x = demosaic_smooth_hue(plane)
    if spec.jpeg_quality is not None:
        x = jpeg_roundtrip(x, spec.jpeg_quality)
    return Image(np.clip(x, 0.0, 1.0), label=spec.model_id)


def desk_models() -> list[CameraModelSpec]:
    """Three distinguishable models used by the desk-scale experiments."""
    return [
        CameraModelSpec(1, gain=(1.0, 1.0, 1.0), gamma=1.0, prnu_seed=11, prnu_std=0.01, noise_std=0.004,
                        vignette_strength=0.0, demosaic_variant="bilinear", jpeg_quality=None),
        CameraModelSpec(2, gain=(1.05, 1.0, 0.95), gamma=0.95, prnu_seed=22, prnu_std=0.03, noise_std=0.012,
                        vignette_strength=0.25, demosaic_variant="smooth-hue", jpeg_quality=95),
        CameraModelSpec(3, gain=(0.95, 1.0, 1.05), gamma=1.05, prnu_seed=33, prnu_std=0.02, noise_std=0.02,
                        vignette_strength=0.5, demosaic_variant="bilinear", jpeg_quality=85),
    ]


def synth_models(n: int) -> list[CameraModelSpec]:
    """``n`` models: the desk trio first, then seeded variations of it."""
    if n < 2:
        raise ValueError("need at least two camera models")
    base = desk_models()
    out = base[:n]
    rng = np.random.default_rng(2024)
    for model_id in range(len(base) + 1, n + 1):
        tmpl = base[(model_id - 1) % len(base)]
        out.append(
            CameraModelSpec(
                model_id,
                gain=tuple(float(g) for g in rng.uniform(0.94, 1.06, 3)),
                gamma=float(rng.uniform(0.85, 1.15)),
                prnu_seed=11 * model_id,
                prnu_std=float(rng.uniform(0.01, 0.03)),
                noise_std=float(rng.uniform(0.004, 0.02)),
                vignette_strength=float(rng.uniform(0.0, 0.6)),
                demosaic_variant=tmpl.demosaic_variant,
                jpeg_quality=tmpl.jpeg_quality,
            )
        )
    return out


def _render_task(args):
    spec, scene_seed, size, path = args
    write_png(path, render(make_scene(scene_seed, size, size), spec))
    return path


def make_dataset(
    specs: Sequence[CameraModelSpec],
    n_per_model: int,
    out_dir,
    size: int = 64,
    seed: int = 0,
    workers: int = 1,
) -> Path:
    """Render ``n_per_model`` scenes under every model and write a manifest CSV.

    All models see the same scene seeds so content carries no label signal.
    Returns the manifest path.
    """
    if len(specs) < 2:
        raise ValueError("need at least two camera models")
    if n_per_model < 1:
        raise ValueError("n_per_model must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scene_seeds = [seed * 1_000_003 + k for k in range(n_per_model)]
    tasks, rows = [], []
    for spec in specs:
        for k, s in enumerate(scene_seeds):
            rel = Path(f"model_{spec.model_id}") / f"img_{k}.png"
            tasks.append((spec, s, size, out_dir / rel))
            rows.append((rel.as_posix(), spec.model_id, s))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            list(pool.map(_render_task, tasks, chunksize=16))
    else:
        for t in tasks:
            _render_task(t)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label", "scene_seed"])
        writer.writerows(rows)
    log.info("rendered %d images for %d models into %s", len(rows), len(specs), out_dir)
    return manifest


def spec_to_dict(spec: CameraModelSpec) -> dict:
    d = asdict(spec)
    d["gain"] = list(spec.gain)
    return d


def spec_from_dict(d: dict) -> CameraModelSpec:
    d = dict(d)
    d["gain"] = tuple(d.get("gain", (1.0, 1.0, 1.0)))
    return CameraModelSpec(**d)
