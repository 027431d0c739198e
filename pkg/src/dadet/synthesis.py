"""Auxiliary-domain synthesis: rain-streak blending and fog corruption.

The auxiliary domain is built by sampling a rain-streak map from a library,
warping it through randomly combined geometric transform chains, and blending
it additively onto the source image. A uniform-depth atmospheric scattering
model produces the foggy target domain. Every function is a pure function of
its inputs and RNG stream, so per-image generators derived from
(global seed, image index) make the whole pipeline reproducible bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, ContractError, InvalidInputError

RAIN_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass(frozen=True)
class RainMixParams:
    """Transform-chain ranges for rain map augmentation."""

    chains: int = 3
    max_depth: int = 3
    rotation_degrees: float = 30.0
    zoom_range: tuple[float, float] = (0.8, 1.2)
    translate_fraction: float = 0.1
    shear_degrees: float = 10.0
    blend_range: tuple[float, float] = (0.5, 1.0)


# -- image file helpers -------------------------------------------------------


def load_image(path: Path | str) -> np.ndarray:
    """Read an image file as H x W x 3 float32 in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_image(path: Path | str, image: np.ndarray) -> None:
    """Write an H x W x 3 float image in [0, 1] as an 8-bit PNG."""
    data = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def derive_rng(seed: int, index: int) -> np.random.Generator:
    """Per-image generator from (global seed, image index); worker-count free."""
    return np.random.default_rng([seed, index])


# -- rain map sampling and transforms ----------------------------------------


def list_rain_library(library_dir: Path | str) -> list[Path]:
    root = Path(library_dir)
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in RAIN_EXTENSIONS)
    if not files:
        raise ConfigurationError(f"rain library {root} contains no streak images")
    return files


def sample_rain_map(library_dir: Path | str, rng: np.random.Generator) -> np.ndarray:
    """Uniformly pick one streak image; returns H x W intensities in [0, 1]."""
    files = list_rain_library(library_dir)
    choice = files[int(rng.integers(len(files)))]
    with Image.open(choice) as img:
        arr = np.asarray(img.convert("L"), dtype=np.float32)
    return arr / 255.0


def _affine(map2d: np.ndarray, matrix: np.ndarray, offset: np.ndarray) -> np.ndarray:
    return ndimage.affine_transform(
        map2d, matrix, offset=offset, order=1, mode="constant", cval=0.0
    )


def _centered(map2d: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    center = (np.asarray(map2d.shape, dtype=np.float64) - 1.0) / 2.0
    offset = center - matrix @ center
    return _affine(map2d, matrix, offset)


def rotate_map(map2d: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate contents counterclockwise (as displayed) about the map center."""
    phi = math.radians(degrees)
    matrix = np.array([[math.cos(phi), math.sin(phi)], [-math.sin(phi), math.cos(phi)]])
    return _centered(map2d, matrix)

def zoom_map(map2d: np.ndarray, factor: float) -> np.ndarray:
    """Scale contents about the center; factor > 1 magnifies."""
    matrix = np.array([[1.0 / factor, 0.0], [0.0, 1.0 / factor]])
    return _centered(map2d, matrix)


def translate_map(map2d: np.ndarray, dy: float, dx: float) -> np.ndarray:
    """Shift contents by (dy, dx) pixels."""
    return _affine(map2d, np.eye(2), np.array([-dy, -dx]))


def shear_map(map2d: np.ndarray, degrees: float) -> np.ndarray:
    """Horizontal shear proportional to the row offset from center."""
    matrix = np.array([[1.0, 0.0], [math.tan(math.radians(degrees)), 1.0]])
    return _centered(map2d, matrix)


def rainmix_transform(
    rain_map: np.ndarray,
    rng: np.random.Generator,
    params: RainMixParams = RainMixParams(),
) -> np.ndarray:
    """Mix several random transform chains over the map plus a skip connection.

    Each chain applies 1..max_depth randomly chosen transforms (rotate, zoom,
    translate, shear) at magnitudes sampled from the configured ranges; chain
    outputs are combined with simplex-distributed weights and blended with the
    untouched map. Output is clipped to [0, 1] and deterministic per stream.
    """
    h, w = rain_map.shape
    weights = rng.dirichlet(np.ones(params.chains))
    mix = np.zeros_like(rain_map)
    for i in range(params.chains):
        chain = rain_map
        depth = int(rng.integers(1, params.max_depth + 1))
        for _ in range(depth):
            op = int(rng.integers(4))
            if op == 0:
                chain = rotate_map(chain, rng.uniform(-params.rotation_degrees,
                                                      params.rotation_degrees))
            elif op == 1:
                chain = zoom_map(chain, rng.uniform(*params.zoom_range))
            elif op == 2:
                chain = translate_map(
                    chain,
                    rng.uniform(-params.translate_fraction, params.translate_fraction) * h,
                    rng.uniform(-params.translate_fraction, params.translate_fraction) * w,
                )
            else:
                chain = shear_map(chain, rng.uniform(-params.shear_degrees,
                                                     params.shear_degrees))
        mix += weights[i] * chain
    skip = rng.uniform(*params.blend_range)
    out = rain_map + skip * (mix - rain_map)
    return np.clip(out, 0.0, 1.0)


def resize_map(map2d: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a single-channel float map."""
    if map2d.shape == (height, width):
        return map2d
    img = Image.fromarray(map2d.astype(np.float32), mode="F")
    return np.asarray(img.resize((width, height), Image.BILINEAR), dtype=np.float32)


def blend_with_weight(source: np.ndarray, rain_map: np.ndarray, weight: float) -> np.ndarray:
    """out = clip(source + weight * map broadcast over channels, 0, 1)."""
    if rain_map.ndim != 2:
        raise ContractError(f"rain map must be 2-D, got shape {rain_map.shape}")
    h, w = source.shape[:2]
    resized = resize_map(rain_map, h, w)
    if resized.shape != (h, w):
        raise ContractError(f"rain map {resized.shape} does not match image {(h, w)}")
    return np.clip(source + weight * resized[:, :, None], 0.0, 1.0)


def blend_rain(
    source: np.ndarray, rain_map: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Additively blend a streak map over the image at a weight drawn in [0.5, 1]."""
    return blend_with_weight(source, rain_map, rng.uniform(0.5, 1.0))


def synthesize_auxiliary(
    source: np.ndarray,
    library_dir: Path | str,
    rng: np.random.Generator,
    params: RainMixParams = RainMixParams(),
) -> np.ndarray:
    """Full rain pipeline: sample a map, transform it, blend it onto the image.

    The source geometry is untouched, so the output stays pixel-aligned with
    its source image.
    """
    rain = sample_rain_map(library_dir, rng)
    rain = rainmix_transform(rain, rng, params)
    return blend_rain(source, rain, rng)


# -- fog corruption -----------------------------------------------------------


def synthesize_fog(
    source: np.ndarray, density: float, atmospheric_light: float
) -> np.ndarray:
    """Uniform-depth atmospheric scattering: out = src * t + light * (1 - t).

    Transmittance t = exp(-density); density 0 is the identity and large
    densities wash the image out toward the atmospheric light.
    """
    if density < 0:
        raise InvalidInputError(f"fog density must be >= 0, got {density}")
    if not 0.0 <= atmospheric_light <= 1.0:
        raise InvalidInputError(f"atmospheric light must be in [0, 1], got {atmospheric_light}")
    t = math.exp(-density)
    return np.clip(source * t + atmospheric_light * (1.0 - t), 0.0, 1.0)
