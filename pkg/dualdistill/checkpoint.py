import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import torch

from dualdistill.backbone import DecoupledStudentTeacher, build_model
from dualdistill.common import FingerprintMismatchError, ImageIOError, PathLike
from dualdistill.config import RunConfig, from_flat
from dualdistill.seg_head import FusionHead, build_head

logger = logging.getLogger(__name__)

LAST, BEST = 'last.pt', 'best.pt'


@dataclass
class CheckpointBundle:
    '''Everything needed to rebuild a trained student and head.

        The teacher is never stored; it is rebuilt from the backbone spec
        named in `config`.
    '''
    student: Dict[str, torch.Tensor]
    head: Dict[str, torch.Tensor]
    epoch: int
    fingerprint: str
    config: Dict[str, Any]
    seed_state: Dict[str, Any] = field(default_factory=dict)
    head_loss: float = math.inf

    @classmethod
    def capture(cls, cfg: RunConfig, model: DecoupledStudentTeacher,
                head: FusionHead, epoch: int,
                head_loss: float = math.inf) -> 'CheckpointBundle':
        return cls(
            student={k: v.detach().cpu().clone() for k, v in model.student.state_dict().items()},
            head={k: v.detach().cpu().clone() for k, v in head.state_dict().items()},
            epoch=epoch,
            fingerprint=cfg.fingerprint(),
            config=cfg.to_dict(),
            seed_state={'seed': cfg.seed, 'torch': torch.get_rng_state()},
            head_loss=float(head_loss))

    def run_config(self) -> RunConfig:
        return from_flat(self.config)


def save_checkpoint(bundle: CheckpointBundle, path: PathLike) -> Path:
    '''Writes `bundle` atomically (temporary file, then rename)'''
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + '.tmp')
    torch.save(asdict(bundle), tmp)
    os.replace(tmp, path)
    logger.debug('Wrote checkpoint {} (epoch {})'.format(path, bundle.epoch))
    return path


def load_checkpoint(path: PathLike, cfg: Optional[RunConfig] = None,
                    force: bool = False) -> CheckpointBundle:
    '''Reads a checkpoint; with `cfg`, rejects a fingerprint mismatch unless `force`'''
    path = Path(path)
    if not path.is_file():
        raise ImageIOError('Checkpoint not found: {}'.format(path))
    try:
        data = torch.load(path, map_location='cpu', weights_only=True)
    except Exception as exc:
        raise ImageIOError('Cannot read checkpoint {}: {}'.format(path, exc)) from exc
    bundle = CheckpointBundle(**data)
    if cfg is not None and cfg.fingerprint() != bundle.fingerprint:
        message = 'Checkpoint {} was trained with config {}, current config is {}'.format(
            path, bundle.fingerprint, cfg.fingerprint())
        if not force:
            raise FingerprintMismatchError(message)
        logger.warning(message + ' (forced)')
    return bundle


def restore(bundle: CheckpointBundle, cfg: Optional[RunConfig] = None,
            device: str = 'cpu') -> Tuple[DecoupledStudentTeacher, FusionHead]:
    '''Rebuilds the model (teacher included) and head from a bundle, in eval mode'''
    cfg = cfg or bundle.run_config()
    model = build_model(cfg)
    model.student.load_state_dict(bundle.student)
    head = build_head(cfg)
    head.load_state_dict(bundle.head)
    return model.to(device).eval(), head.to(device).eval()


class CheckpointManager():
    '''Keeps `last.pt` (every epoch) and `best.pt` (lowest head loss) in `directory`'''

    def __init__(self, directory: PathLike) -> None:
        self.directory = Path(directory)
        self.best_loss = math.inf

    @property
    def last_path(self) -> Path:
        return self.directory / LAST

    @property
    def best_path(self) -> Path:
        return self.directory / BEST

    def save(self, bundle: CheckpointBundle) -> Path:
        save_checkpoint(bundle, self.last_path)
        if bundle.head_loss < self.best_loss or not self.best_path.exists():
            self.best_loss = bundle.head_loss
            save_checkpoint(bundle, self.best_path)
            logger.info('New best checkpoint at epoch {} (head loss {:.4f})'.format(
                bundle.epoch, bundle.head_loss))
        return self.last_path
