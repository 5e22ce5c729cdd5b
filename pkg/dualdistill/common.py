import os
import hashlib
import random
from typing import List, Sequence, Tuple, Union

import numpy as np
import torch
from torch import Tensor

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

NUM_STAGES = 4
IMAGE_SUFFIXES = ('.png', '.jpg', '.jpeg', '.bmp', '.tif', '.tiff')
NORMAL_DIR_NAMES = ('good', 'ok')
TEXTURE_CATEGORIES = ('carpet', 'grid', 'leather', 'tile', 'wood')

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = range(4)

FeaturePyramid = List[Tensor]
PathLike = Union[str, os.PathLike]


class DualDistillError(Exception):
    exit_code = EXIT_RUNTIME


class ConfigError(DualDistillError):
    exit_code = EXIT_USAGE


class FingerprintMismatchError(DualDistillError):
    exit_code = EXIT_USAGE


class DatasetNotFoundError(DualDistillError):
    exit_code = EXIT_DATA


class CorruptDatasetError(DualDistillError):
    exit_code = EXIT_DATA


class ImageIOError(DualDistillError):
    exit_code = EXIT_DATA


class UndefinedMetricError(DualDistillError):
    exit_code = EXIT_DATA


class InvalidArgumentError(DualDistillError, ValueError):
    pass


class NonFiniteLossError(DualDistillError):
    pass


class FrozenParameterError(DualDistillError):
    pass


def seed_everything(seed: int):
    '''Seeds python, numpy and torch generators'''
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def derive_seed(*parts: int) -> int:
    '''Stable 31-bit seed from a tuple of integers'''
    digest = hashlib.sha256(
        ','.join(str(int(p)) for p in parts).encode()).digest()
    return int.from_bytes(digest[:4], 'little') & 0x7FFFFFFF


def parameter_hash(module: torch.nn.Module) -> str:
    '''SHA-256 over every parameter and buffer of `module`, in state-dict order'''
    sha = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        sha.update(name.encode())
        sha.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return sha.hexdigest()


def check_same_shape(a: Tensor, b: Tensor, what: str = 'tensors'):
    if a.shape != b.shape:
        raise InvalidArgumentError('Shape mismatch between {}: {} vs {}'.format(
            what, tuple(a.shape), tuple(b.shape)))


def check_pyramids(*pyramids: Sequence[Tensor]):
    '''Checks that all pyramids have the same number of stages and shapes'''
    first = pyramids[0]
    for pyramid in pyramids[1:]:
        if len(pyramid) != len(first):
            raise InvalidArgumentError('Pyramids with {} and {} stages'.format(
                len(first), len(pyramid)))
        for i, (a, b) in enumerate(zip(first, pyramid)):
            check_same_shape(a, b, 'stage {} features'.format(i + 1))


def as_batch(t: Tensor, ndim: int = 4) -> Tuple[Tensor, bool]:
    '''Adds leading singleton dims up to `ndim`; returns the tensor and
    whether it was unbatched'''
    unbatched = t.dim() < ndim
    while t.dim() < ndim:
        t = t.unsqueeze(0)
    return t, unbatched


def standardize(image: Union[np.ndarray, Tensor],
                mean: Sequence[float] = IMAGENET_MEAN,
                std: Sequence[float] = IMAGENET_STD) -> Tensor:
    '''H x W x 3 array in [0, 1] -> standardized 3 x H x W float32 tensor'''
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image))
    data = image.permute(2, 0, 1).to(torch.float32)
    mean_t = torch.tensor(mean, dtype=torch.float32).view(3, 1, 1)
    std_t = torch.tensor(std, dtype=torch.float32).view(3, 1, 1)
    return (data - mean_t) / std_t


def destandardize(tensor: Tensor,
                  mean: Sequence[float] = IMAGENET_MEAN,
                  std: Sequence[float] = IMAGENET_STD) -> np.ndarray:
    '''Inverse of `standardize`: 3 x H x W tensor -> H x W x 3 array in [0, 1]'''
    mean_t = torch.tensor(mean, dtype=tensor.dtype).view(3, 1, 1)
    std_t = torch.tensor(std, dtype=tensor.dtype).view(3, 1, 1)
    data = tensor.detach().cpu() * std_t + mean_t
    return data.permute(1, 2, 0).clamp(0, 1).numpy()
