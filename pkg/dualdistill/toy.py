'''Seeded synthetic category in the MVTec layout for desk-scale runs.

    Normal images show a jittered disk on a noisy background; defective ones
    add a blob or a scratch inside the disk, with the matching ground-truth
    mask.
'''
import logging
from pathlib import Path
from typing import Tuple

import numpy as np
from PIL import Image, ImageDraw

from dualdistill.common import InvalidArgumentError, PathLike

logger = logging.getLogger(__name__)

TOY_CATEGORY = 'toy_shapes'
DEFECT_TYPES = ('blob', 'scratch')
BACKGROUND = (40, 40, 48)
OBJECT = (200, 160, 60)
BLOB = (40, 90, 220)
SCRATCH = (20, 20, 20)
NOISE_STD = 4.0


Disk = Tuple[float, float, float]


def _normal_scene(rng: np.random.Generator, size: int) -> Tuple[Image.Image, Disk]:
    image = Image.new('RGB', (size, size), BACKGROUND)
    draw = ImageDraw.Draw(image)
    cx, cy = (size / 2 + rng.uniform(-size / 16, size / 16, size=2)).tolist()
    r = size * rng.uniform(0.26, 0.32)
    color = tuple(int(c + rng.integers(-10, 11)) for c in OBJECT)
    draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=color)
    inner = r * 0.35
    draw.rectangle([cx - inner, cy - inner, cx + inner, cy + inner],
                   fill=tuple(int(c * 0.8) for c in color))
    return image, (cx, cy, r)


def _add_defect(image: Image.Image, disk: Disk, kind: str,
                rng: np.random.Generator) -> Image.Image:
    cx, cy, r = disk
    size = image.size[0]
    mask = Image.new('L', image.size, 0)
    draws = [ImageDraw.Draw(image), ImageDraw.Draw(mask)]
    angle = rng.uniform(0, 2 * np.pi)
    dist = rng.uniform(0, r * 0.5)
    x, y = cx + dist * np.cos(angle), cy + dist * np.sin(angle)
    if kind == 'blob':
        rx, ry = size * rng.uniform(0.05, 0.1, size=2)
        for draw, fill in zip(draws, (BLOB, 255)):
            draw.ellipse([x - rx, y - ry, x + rx, y + ry], fill=fill)
    else:
        length = r * rng.uniform(0.6, 1.0)
        theta = rng.uniform(0, np.pi)
        dx, dy = length / 2 * np.cos(theta), length / 2 * np.sin(theta)
        width = max(2, size // 32)
        for draw, fill in zip(draws, (SCRATCH, 255)):
            draw.line([x - dx, y - dy, x + dx, y + dy], fill=fill, width=width)
    return mask


def _finish(image: Image.Image, rng: np.random.Generator) -> Image.Image:
    data = np.asarray(image, dtype=np.float64)
    data = data + rng.normal(0, NOISE_STD, size=data.shape)
    return Image.fromarray(np.clip(np.round(data), 0, 255).astype(np.uint8))


def make_toy_dataset(root: PathLike, category: str = TOY_CATEGORY, size: int = 64,
                     n_train: int = 40, n_test_normal: int = 10, n_test_defect: int = 20,
                     seed: int = 0) -> Path:
    '''Writes `<root>/<category>` and returns that directory.

        Defective test images alternate between the defect types.
    '''
    if size < 16:
        raise InvalidArgumentError('Toy images need size >= 16, got {}'.format(size))
    if min(n_train, n_test_normal, n_test_defect) < 0:
        raise InvalidArgumentError('Image counts must be non-negative')
    rng = np.random.default_rng(seed)
    base = Path(root) / category
    dirs = [base / 'train' / 'good', base / 'test' / 'good']
    dirs += [base / 'test' / kind for kind in DEFECT_TYPES]
    dirs += [base / 'ground_truth' / kind for kind in DEFECT_TYPES]
    for directory in dirs:
        directory.mkdir(parents=True, exist_ok=True)

    for split, count in (('train', n_train), ('test', n_test_normal)):
        for i in range(count):
            image, _ = _normal_scene(rng, size)
            _finish(image, rng).save(base / split / 'good' / '{:03d}.png'.format(i))

    counters = dict.fromkeys(DEFECT_TYPES, 0)
    for i in range(n_test_defect):
        kind = DEFECT_TYPES[i % len(DEFECT_TYPES)]
        image, disk = _normal_scene(rng, size)
        mask = _add_defect(image, disk, kind, rng)
        stem = '{:03d}'.format(counters[kind])
        counters[kind] += 1
        _finish(image, rng).save(base / 'test' / kind / (stem + '.png'))
        mask.save(base / 'ground_truth' / kind / (stem + '_mask.png'))

    logger.info('Wrote toy category {} ({} train, {} test normal, {} defective)'.format(
        base, n_train, n_test_normal, n_test_defect))
    return base
