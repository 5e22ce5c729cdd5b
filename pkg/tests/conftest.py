from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from dualdistill.backbone import DecoupledStudentTeacher
from dualdistill.config import AblationFlags, BackboneSpec, RunConfig
from dualdistill.toy import make_toy_dataset

TOY = 'toy_shapes'


@pytest.fixture(scope='session')
def toy_root(tmp_path_factory) -> Path:
    '''Small toy category: 8 train, 4 test normal, 6 defective'''
    root = tmp_path_factory.mktemp('data')
    make_toy_dataset(root, TOY, n_train=8, n_test_normal=4, n_test_defect=6, seed=0)
    return root


@pytest.fixture
def toy_config(toy_root, tmp_path) -> RunConfig:
    return RunConfig(backbone='toy', input_size=64, epochs=2, batch_size=4, top_k=10,
                     dataset_root=str(toy_root), category=TOY,
                     output_dir=str(tmp_path / 'runs')).validate()


@pytest.fixture
def toy_model() -> DecoupledStudentTeacher:
    return DecoupledStudentTeacher(BackboneSpec.toy(), AblationFlags(), seed=0)


@pytest.fixture
def identity_model() -> DecoupledStudentTeacher:
    '''Exact identity decouple layers and no PMN: the student equals the teacher'''
    flags = AblationFlags(pmn_inner=False, pmn_outer=False)
    return DecoupledStudentTeacher(BackboneSpec.toy(), flags, decouple_init_std=0.0, seed=0)


@pytest.fixture
def images() -> torch.Tensor:
    return torch.randn(2, 3, 64, 64, generator=torch.Generator().manual_seed(0))


def write_png(path: Path, data: np.ndarray) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data.astype(np.uint8)).save(path)
    return path


def disk_image(size: int = 64, radius: float = 16.0):
    '''White disk on black, H x W x 3 in [0, 1], and its support'''
    yy, xx = np.mgrid[:size, :size]
    disk = (yy - size / 2 + 0.5) ** 2 + (xx - size / 2 + 0.5) ** 2 <= radius ** 2
    image = np.repeat(disk[..., None].astype(np.float64), 3, axis=2)
    return image, disk
