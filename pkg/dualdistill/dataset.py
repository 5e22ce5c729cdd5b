import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from PIL import Image, UnidentifiedImageError
from torch import Tensor
from torch.utils.data import Dataset

from dualdistill.common import (IMAGE_SUFFIXES, IMAGENET_MEAN, IMAGENET_STD,
                                NORMAL_DIR_NAMES, CorruptDatasetError,
                                DatasetNotFoundError, ImageIOError,
                                InvalidArgumentError, PathLike, derive_seed,
                                destandardize, standardize)
from dualdistill.worker import run_workers

logger = logging.getLogger(__name__)

SPLITS = ('train', 'test')
NORMAL, ANOMALOUS = 'normal', 'anomalous'
INDEX_COLUMNS = ['image_path', 'label', 'mask_path', 'defect']


@dataclass
class DatasetIndex:
    '''Sorted listing of one split of one category.

        `entries` is a `pandas.DataFrame` with columns `image_path`, `label`
        (`normal` / `anomalous`), `mask_path` (None for normal images) and
        `defect` (sub-directory name).
    '''
    root: Path
    category: str
    split: str
    entries: pd.DataFrame

    def __len__(self) -> int:
        return self.entries.index.size

    def __iter__(self) -> Iterator[Any]:
        return self.entries.itertuples(index=False)

    @property
    def image_paths(self) -> List[Path]:
        return list(self.entries['image_path'])

    @property
    def labels(self) -> np.ndarray:
        return (self.entries['label'] == ANOMALOUS).to_numpy(dtype=np.int64)

    @property
    def n_anomalous(self) -> int:
        return int(self.labels.sum())

    def validate(self):
        df = self.entries
        normal = df['label'] == NORMAL
        has_mask = df['mask_path'].notna()
        if self.split == 'train' and not normal.all():
            raise CorruptDatasetError('Anomalous images in the train split of {}'.format(
                self.category))
        if (normal & has_mask).any():
            raise CorruptDatasetError('Normal images with masks in {}'.format(self.category))
        if (~normal & ~has_mask).any():
            missing = df.loc[~normal & ~has_mask, 'image_path'].iloc[0]
            raise CorruptDatasetError('No ground-truth mask for {}'.format(missing))


@dataclass
class TrainingPair:
    normal: Tensor
    anomalous: Tensor
    gt_mask: Tensor
    foreground: Tensor


def image_files(directory: Path) -> List[Path]:
    return sorted(p for p in directory.iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def _find_mask(gt_dir: Path, image_path: Path) -> Optional[Path]:
    for name in ('{}_mask.png'.format(image_path.stem), '{}.png'.format(image_path.stem)):
        candidate = gt_dir / name
        if candidate.is_file():
            return candidate
    return None


def list_categories(root: PathLike) -> List[str]:
    '''Category directories under `root` that look like dataset categories'''
    root = Path(root)
    if not root.is_dir():
        raise DatasetNotFoundError('Dataset root not found: {}'.format(root))
    return sorted(p.name for p in root.iterdir()
                  if (p / 'train').is_dir() and (p / 'test').is_dir())


def load_dataset(root: PathLike, category: str, split: str) -> DatasetIndex:
    '''Indexes `<root>/<category>/<split>` in the MVTec AD directory layout.

        Normal images live in `good` (or `ok`) sub-directories; every other
        test sub-directory is a defect type whose masks are looked up in
        `ground_truth/<defect>/<stem>_mask.png` (or `<stem>.png`).
    '''
    if split not in SPLITS:
        raise InvalidArgumentError('Unknown split `{}`'.format(split))
    base = Path(root) / category
    for sub in SPLITS:
        if not (base / sub).is_dir():
            raise DatasetNotFoundError('Missing directory {}'.format(base / sub))

    rows = []
    split_dir = base / split
    for sub_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        is_normal = sub_dir.name in NORMAL_DIR_NAMES
        if split == 'train' and not is_normal:
            logger.warning('Skipping non-normal train directory {}'.format(sub_dir))
            continue
        for image_path in image_files(sub_dir):
            if is_normal:
                rows.append((image_path, NORMAL, None, sub_dir.name))
                continue
            mask_path = _find_mask(base / 'ground_truth' / sub_dir.name, image_path)
            if mask_path is None:
                raise CorruptDatasetError('No ground-truth mask for {}'.format(image_path))
            rows.append((image_path, ANOMALOUS, mask_path, sub_dir.name))

    entries = pd.DataFrame(rows, columns=INDEX_COLUMNS)
    entries = entries.sort_values(
        by='image_path', key=lambda s: s.map(str)).reset_index(drop=True)
    index = DatasetIndex(root=Path(root), category=category, split=split, entries=entries)
    index.validate()
    logger.info('Indexed {} {} images of `{}` ({} anomalous)'.format(
        len(index), split, category, index.n_anomalous))
    return index


def read_rgb(path: PathLike, input_size: int) -> np.ndarray:
    '''Decodes an image as RGB, bilinear-resizes it to `input_size`^2 and
    returns a float64 H x W x 3 array in [0, 1]'''
    try:
        with Image.open(path) as img:
            img = img.convert('RGB')
            if img.size != (input_size, input_size):
                img = img.resize((input_size, input_size), Image.BILINEAR)
            data = np.asarray(img, dtype=np.float64)
    except (OSError, UnidentifiedImageError) as exc:
        raise ImageIOError('Cannot decode image {}: {}'.format(path, exc)) from exc
    return data / 255.0


def load_image(path: PathLike, input_size: int,
               mean: Sequence[float] = IMAGENET_MEAN,
               std: Sequence[float] = IMAGENET_STD) -> Tensor:
    '''3 x input_size x input_size standardized float32 tensor'''
    return standardize(read_rgb(path, input_size), mean, std)


def save_image(tensor: Tensor, path: PathLike,
               mean: Sequence[float] = IMAGENET_MEAN,
               std: Sequence[float] = IMAGENET_STD):
    '''Writes a standardized 3 x H x W tensor as an 8-bit PNG'''
    data = destandardize(tensor, mean, std)
    Image.fromarray(np.round(data * 255).astype(np.uint8)).save(path)


def load_mask(path: PathLike, input_size: int) -> Tensor:
    '''Nearest-neighbour resize to `input_size`^2, binarized at 127.5'''
    try:
        with Image.open(path) as img:
            img = img.convert('L')
            if img.size != (input_size, input_size):
                img = img.resize((input_size, input_size), Image.NEAREST)
            data = np.asarray(img, dtype=np.float32)
    except (OSError, UnidentifiedImageError) as exc:
        raise ImageIOError('Cannot decode mask {}: {}'.format(path, exc)) from exc
    return torch.from_numpy((data > 127.5).astype(np.float32))


def read_images(paths: Sequence[PathLike], input_size: int,
                num_workers: int = 0) -> List[np.ndarray]:
    '''Decodes many images, in parallel when `num_workers` > 0'''
    results, errors = run_workers(
        lambda p: read_rgb(p, input_size), list(paths), num_workers)
    if errors:
        _, exc_info = errors[0]
        raise exc_info[1]
    return results


def make_training_pair(normal: np.ndarray, synthesizer, rng_seed: int,
                       key: Optional[str] = None,
                       mean: Sequence[float] = IMAGENET_MEAN,
                       std: Sequence[float] = IMAGENET_STD) -> TrainingPair:
    '''Synthesizes the anomalous twin of an unnormalized H x W x 3 image.

        `key` identifies the source image for foreground caching.
    '''
    result = synthesizer(normal, seed=rng_seed, key=key)
    return TrainingPair(
        normal=standardize(normal, mean, std),
        anomalous=standardize(result.image, mean, std),
        gt_mask=torch.from_numpy(result.mask.astype(np.float32)),
        foreground=torch.from_numpy(result.foreground.astype(np.float32)))


class TrainingPairDataset(Dataset):
    '''Normal / synthetic-anomalous pairs over the train split.

        Images are decoded once up front; each epoch draws fresh synthetic
        anomalies from seeds derived from (seed, epoch, position).
    '''

    def __init__(self, index: DatasetIndex, synthesizer, input_size: int,
                 seed: int = 0, num_workers: int = 0,
                 mean: Sequence[float] = IMAGENET_MEAN,
                 std: Sequence[float] = IMAGENET_STD) -> None:
        super(TrainingPairDataset, self).__init__()
        self.index = index
        self.synthesizer = synthesizer
        self.seed = seed
        self.epoch = 0
        self.mean = mean
        self.std = std
        self.images = read_images(index.image_paths, input_size, num_workers)

    def set_epoch(self, epoch: int):
        self.epoch = epoch

    def pair_seed(self, position: int) -> int:
        return derive_seed(self.seed, self.epoch, position)

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, position: int) -> Dict[str, Any]:
        seed = self.pair_seed(position)
        pair = make_training_pair(
            self.images[position], self.synthesizer, seed,
            key=str(self.index.image_paths[position]), mean=self.mean, std=self.std)
        return {'normal': pair.normal, 'anomalous': pair.anomalous,
                'gt_mask': pair.gt_mask.unsqueeze(0),
                'foreground': pair.foreground.unsqueeze(0),
                'seed': seed}


class EvalImageDataset(Dataset):
    '''Test split images with masks (all-zero for normal images) and labels'''

    def __init__(self, index: DatasetIndex, input_size: int,
                 mean: Sequence[float] = IMAGENET_MEAN,
                 std: Sequence[float] = IMAGENET_STD) -> None:
        super(EvalImageDataset, self).__init__()
        self.index = index
        self.input_size = input_size
        self.mean = mean
        self.std = std

    def __len__(self) -> int:
        return len(self.index)

    def __getitem__(self, position: int) -> Dict[str, Any]:
        row = self.index.entries.iloc[position]
        image = load_image(row['image_path'], self.input_size, self.mean, self.std)
        if pd.isnull(row['mask_path']):
            mask = torch.zeros(self.input_size, self.input_size)
        else:
            mask = load_mask(row['mask_path'], self.input_size)
        return {'image': image, 'mask': mask.unsqueeze(0),
                'label': int(row['label'] == ANOMALOUS),
                'path': str(row['image_path'])}
