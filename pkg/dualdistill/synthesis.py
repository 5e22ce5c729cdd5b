'''Foreground-aware synthetic anomalies.

    A binarized Perlin-noise mask, restricted to the image foreground, selects
    where an external (or self-derived) texture is alpha-blended into a normal
    image:

        out = (1 - M) * I + M * ((1 - beta) * I + beta * A)

    Every function here is a pure function of its inputs and seed.
'''
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from dualdistill.common import ConfigError, InvalidArgumentError, PathLike, derive_seed
from dualdistill.config import SynthesisConfig
from dualdistill.dataset import image_files, load_mask, read_rgb

logger = logging.getLogger(__name__)

BORDER_FRACTION = 0.04
MIN_COMPONENT_FRACTION = 0.01
MIN_FOREGROUND_FRACTION = 0.05
STRUCTURING_ELEMENT = np.ones((5, 5), dtype=bool)

ImageLike = Union[np.ndarray, torch.Tensor]


@dataclass
class NoiseField:
    data: np.ndarray
    raw: np.ndarray
    freq_x: int
    freq_y: int
    seed: int


@dataclass
class ForegroundMask:
    data: np.ndarray
    method: str

    @property
    def fraction(self) -> float:
        return float(self.data.mean())


class SynthesisResult(NamedTuple):
    image: np.ndarray
    mask: np.ndarray
    foreground: np.ndarray
    beta: float


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6 - 15) + 10)


def perlin_noise(h: int, w: int, freq_x: int, freq_y: int, seed: int) -> NoiseField:
    '''Gradient-lattice Perlin noise with `freq_x` periods along the rows and
    `freq_y` along the columns, min-max normalized to [-1, 1].

        Sizes that are not multiples of the frequencies are generated on the
        next larger multiple and cropped.
    '''
    if h <= 0 or w <= 0 or freq_x < 1 or freq_y < 1:
        raise InvalidArgumentError('Invalid perlin arguments h={}, w={}, freq=({}, {})'.format(
            h, w, freq_x, freq_y))
    ph = -(-h // freq_x) * freq_x
    pw = -(-w // freq_y) * freq_y

    rng = np.random.default_rng(seed)
    angles = rng.uniform(0, 2 * np.pi, size=(freq_x + 1, freq_y + 1))
    grad_y, grad_x = np.cos(angles), np.sin(angles)

    rows = np.arange(ph) * freq_x / ph
    cols = np.arange(pw) * freq_y / pw
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]

    def corner(dr: int, dc: int) -> np.ndarray:
        gy = grad_y[np.ix_(r0 + dr, c0 + dc)]
        gx = grad_x[np.ix_(r0 + dr, c0 + dc)]
        return gy * (fr - dr) + gx * (fc - dc)

    u, v = _fade(fr), _fade(fc)
    top = corner(0, 0) * (1 - v) + corner(0, 1) * v
    bottom = corner(1, 0) * (1 - v) + corner(1, 1) * v
    raw = (np.sqrt(2) * (top * (1 - u) + bottom * u))[:h, :w]

    lo, hi = raw.min(), raw.max()
    data = raw.copy() if hi - lo <= 0 else 2 * (raw - lo) / (hi - lo) - 1
    return NoiseField(data=data, raw=raw, freq_x=freq_x, freq_y=freq_y, seed=seed)


def binarize_noise(noise: NoiseField, threshold: float) -> np.ndarray:
    return (noise.data > threshold).astype(np.float64)


# region Foreground extraction

def _as_hwc(image: ImageLike) -> np.ndarray:
    if isinstance(image, torch.Tensor):
        return image.detach().cpu().permute(1, 2, 0).to(torch.float64).numpy()
    return np.asarray(image, dtype=np.float64)


def _border_band(h: int, w: int) -> int:
    return max(1, int(round(BORDER_FRACTION * min(h, w))))


def _clean_foreground(fg: np.ndarray) -> np.ndarray:
    '''Close + open with a 5x5 element, then drop components under 1% of the image'''
    pad = STRUCTURING_ELEMENT.shape[0]
    padded = np.pad(fg, pad, mode='edge')
    padded = ndimage.binary_closing(padded, structure=STRUCTURING_ELEMENT)
    padded = ndimage.binary_opening(padded, structure=STRUCTURING_ELEMENT)
    fg = padded[pad:-pad, pad:-pad]

    labels, count = ndimage.label(fg, structure=np.ones((3, 3)))
    if count == 0:
        return fg
    sizes = np.bincount(labels.ravel())
    keep = sizes >= MIN_COMPONENT_FRACTION * fg.size
    keep[0] = False
    return keep[labels]


def _background_stat_foreground(image: np.ndarray, tau: float = 4.0, **_) -> np.ndarray:
    h, w, c = image.shape
    band = _border_band(h, w)
    border = np.concatenate([
        image[:band].reshape(-1, c), image[-band:].reshape(-1, c),
        image[:, :band].reshape(-1, c), image[:, -band:].reshape(-1, c)])
    mean = border.mean(axis=0)
    cov = np.cov(border, rowvar=False) + 1e-6 * np.eye(c)
    inv = np.linalg.pinv(cov)
    diff = image.reshape(-1, c) - mean
    dist = np.sqrt(np.einsum('ij,jk,ik->i', diff, inv, diff))
    return _clean_foreground((dist > tau).reshape(h, w))


def _graphcut_foreground(image: np.ndarray, iterations: int = 5, **_) -> np.ndarray:
    try:
        import cv2
    except ImportError as exc:
        raise ConfigError('foreground method `graphcut` needs opencv (cv2)') from exc
    h, w, _ = image.shape
    band = _border_band(h, w)
    img8 = np.ascontiguousarray(
        (np.clip(image, 0, 1) * 255).round().astype(np.uint8)[..., ::-1])
    mask = np.zeros((h, w), np.uint8)
    bgd_model = np.zeros((1, 65), np.float64)
    fgd_model = np.zeros((1, 65), np.float64)
    cv2.setRNGSeed(0)
    cv2.grabCut(img8, mask, (band, band, w - 2 * band, h - 2 * band),
                bgd_model, fgd_model, iterations, cv2.GC_INIT_WITH_RECT)
    fg = (mask == cv2.GC_FGD) | (mask == cv2.GC_PR_FGD)
    return _clean_foreground(fg)


def _precomputed_foreground(image: np.ndarray, path: Optional[PathLike] = None,
                            **_) -> np.ndarray:
    if path is None or not Path(path).is_file():
        raise ConfigError('No precomputed foreground mask at {}'.format(path))
    return load_mask(path, image.shape[0]).numpy() > 0.5


def _full_foreground(image: np.ndarray, **_) -> np.ndarray:
    return np.ones(image.shape[:2], dtype=bool)


FOREGROUND_METHODS: Dict[str, Callable[..., np.ndarray]] = {
    'background-stat': _background_stat_foreground,
    'graphcut': _graphcut_foreground,
    'precomputed': _precomputed_foreground,
    'full': _full_foreground,
}


def register_foreground_method(name: str, func: Callable[..., np.ndarray]):
    '''Plugs in a foreground extractor: `func(image_hwc, **options) -> bool mask`'''
    FOREGROUND_METHODS[name] = func


def extract_foreground(image: ImageLike, method: str = 'background-stat',
                       **options) -> ForegroundMask:
    '''Binary foreground of an H x W x 3 array or 3 x H x W tensor.

        Falls back to the full image whenever the extracted foreground covers
        less than 5% of it, so the result is always usable for synthesis.
    '''
    if method not in FOREGROUND_METHODS:
        raise ConfigError('Unknown foreground method `{}`'.format(method))
    data = _as_hwc(image)
    fg = FOREGROUND_METHODS[method](data, **options).astype(bool)
    if method != 'full' and fg.mean() < MIN_FOREGROUND_FRACTION:
        logger.debug('Foreground of {:.1%} too small, using the full image'.format(fg.mean()))
        return ForegroundMask(data=np.ones_like(fg), method='full')
    return ForegroundMask(data=fg, method=method)

# endregion Foreground extraction


def resize_texture(texture: np.ndarray, h: int, w: int) -> np.ndarray:
    '''Bilinear resize of an H' x W' x 3 float texture to h x w'''
    if texture.shape[:2] == (h, w):
        return texture
    t = torch.from_numpy(np.ascontiguousarray(texture, dtype=np.float64))
    t = F.interpolate(t.permute(2, 0, 1)[None], size=(h, w),
                      mode='bilinear', align_corners=False)
    return t[0].permute(1, 2, 0).numpy()


def blend(image: np.ndarray, texture: np.ndarray, mask: np.ndarray,
          beta: float) -> np.ndarray:
    '''Alpha-blends `texture` into `image` inside `mask`; outside it the
    input pixels are returned untouched'''
    mixed = (1 - beta) * image + beta * texture
    return np.where(mask[..., None] > 0, mixed, image)


def synthesize_anomaly(image: np.ndarray, texture: np.ndarray, cfg: SynthesisConfig,
                       seed: int, foreground: Optional[np.ndarray] = None
                       ) -> Tuple[np.ndarray, np.ndarray]:
    '''Synthetic anomalous twin of an unnormalized H x W x 3 image in [0, 1].

        Returns the anomalous image and the binary anomaly mask, which is
        the binarized Perlin noise intersected with `foreground` (the full
        image when omitted).
    '''
    result = _synthesize(image, texture, cfg, seed, foreground)
    return result.image, result.mask


def _synthesize(image: np.ndarray, texture: np.ndarray, cfg: SynthesisConfig,
                seed: int, foreground: Optional[np.ndarray]) -> SynthesisResult:
    h, w = image.shape[:2]
    rng = np.random.default_rng(seed)
    freq_x = int(rng.choice(cfg.freq_choices))
    freq_y = int(rng.choice(cfg.freq_choices))
    noise = perlin_noise(h, w, freq_x, freq_y, seed=int(rng.integers(2**31)))
    beta = float(rng.uniform(*cfg.beta_range))

    if foreground is None:
        foreground = np.ones((h, w), dtype=bool)
    mask = binarize_noise(noise, cfg.noise_threshold) * (foreground > 0)
    anomalous = blend(image, resize_texture(texture, h, w), mask, beta)
    return SynthesisResult(image=anomalous, mask=mask,
                           foreground=foreground.astype(np.float64), beta=beta)


def augment_texture(texture: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    '''Random flip, quarter rotation and per-channel gain'''
    if rng.random() < 0.5:
        texture = texture[:, ::-1]
    texture = np.rot90(texture, k=int(rng.integers(4)))
    gain = rng.uniform(0.6, 1.4, size=3)
    return np.clip(texture * gain, 0, 1)


class AnomalySynthesizer():
    '''Callable turning a normal image and a seed into a `SynthesisResult`.

        Parameters
        ----------

        cfg : SynthesisConfig

        category : str. Used to resolve `foreground_mode = "auto"`.

        fas : bool. Foreground-aware synthesis; when off the whole image is eligible.

        self_pool : [ Sequence[np.ndarray] ]. Images used as textures when
        `cfg.texture_source` is `"self"`.

        foreground_dir : [ path ]. Directory of precomputed foreground masks.
    '''

    def __init__(self, cfg: SynthesisConfig, category: str = '', fas: bool = True,
                 self_pool: Optional[Sequence[np.ndarray]] = None,
                 foreground_dir: Optional[PathLike] = None) -> None:
        self.cfg = cfg
        self.category = category
        self.foreground_method = cfg.resolve_foreground_mode(category, fas)
        self.foreground_dir = Path(foreground_dir) if foreground_dir else None
        self.self_pool = list(self_pool or [])
        self.texture_paths = []
        if cfg.texture_source != 'self':
            directory = Path(cfg.texture_source)
            if not directory.is_dir():
                raise ConfigError('Texture directory not found: {}'.format(directory))
            self.texture_paths = image_files(directory)
            if not self.texture_paths:
                raise ConfigError('Texture directory {} holds no images'.format(directory))
        self._textures: Dict[int, np.ndarray] = {}
        self._foregrounds: Dict[str, np.ndarray] = {}

    def foreground(self, image: np.ndarray, key: Optional[str] = None) -> np.ndarray:
        if key is not None and key in self._foregrounds:
            return self._foregrounds[key]
        options = {}
        if self.foreground_method == 'background-stat':
            options['tau'] = self.cfg.foreground_tau
        elif self.foreground_method == 'precomputed':
            stem = Path(key).stem if key else ''
            options['path'] = (self.foreground_dir or Path('.')) / '{}.png'.format(stem)
        fg = extract_foreground(image, self.foreground_method, **options).data
        if key is not None:
            self._foregrounds[key] = fg
        return fg

    def texture(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        h, w = image.shape[:2]
        if self.texture_paths:
            pick = int(rng.integers(len(self.texture_paths)))
            if pick not in self._textures:
                self._textures[pick] = read_rgb(self.texture_paths[pick], h)
            return resize_texture(self._textures[pick], h, w)
        pool = self.self_pool or [image]
        source = pool[int(rng.integers(len(pool)))]
        return resize_texture(augment_texture(source, rng), h, w)

    def __call__(self, image: np.ndarray, seed: int,
                 key: Optional[str] = None) -> SynthesisResult:
        texture = self.texture(image, np.random.default_rng(derive_seed(seed, 1)))
        return _synthesize(image, texture, self.cfg, seed, self.foreground(image, key))


def preview_strip(normal: np.ndarray, anomalous: np.ndarray, mask: np.ndarray) -> np.ndarray:
    '''normal | anomalous | mask side by side, H x 3W x 3 in [0, 1]'''
    mask_rgb = np.repeat(mask.astype(np.float64)[..., None], 3, axis=2)
    return np.concatenate([normal, anomalous, mask_rgb], axis=1)
