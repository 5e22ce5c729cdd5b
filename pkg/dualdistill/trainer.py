'''Per-category training: a distillation pass over normal / synthetic-anomalous
pairs, then a segmentation-head pass with student and teacher frozen, each
epoch.'''
import json
import logging
import math
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import pandas as pd
import torch
from torch import Tensor
from torch.utils.data import DataLoader
from tqdm import tqdm

from dualdistill.backbone import DecoupledStudentTeacher, build_model
from dualdistill.checkpoint import CheckpointBundle, CheckpointManager
from dualdistill.common import (CorruptDatasetError, FrozenParameterError,
                                NonFiniteLossError, PathLike, derive_seed,
                                parameter_hash, seed_everything)
from dualdistill.config import RunConfig
from dualdistill.dataset import TrainingPairDataset, load_dataset
from dualdistill.losses import DistillLossReport, distillation_loss
from dualdistill.seg_head import (FusionHead, anomaly_score, build_head, is_trainable,
                                  map_stack, seg_loss)
from dualdistill.synthesis import AnomalySynthesizer

logger = logging.getLogger(__name__)

TRAIN_LOG = 'train_log.jsonl'


class TrainingLog():
    '''Newline-delimited JSON, one record per distillation step'''

    def __init__(self, path: PathLike) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def reset(self):
        self.path.write_text('')

    def append(self, record: Dict[str, Any]):
        with open(self.path, 'a') as fh:
            fh.write(json.dumps(record) + '\n')

    def read(self) -> pd.DataFrame:
        if not self.path.is_file() or self.path.stat().st_size == 0:
            return pd.DataFrame(columns=['epoch', 'step', 'l_ngm', 'l_aim', 'total'])
        return pd.read_json(self.path, lines=True)

    def epoch_means(self) -> pd.DataFrame:
        df = self.read()
        if df.empty:
            return df
        return df.groupby('epoch')[['l_ngm', 'l_aim', 'total']].mean()


def _check_finite(loss: Tensor, seeds: Optional[Tensor], what: str):
    if not torch.isfinite(loss):
        seeds = [] if seeds is None else [int(s) for s in seeds.reshape(-1)]
        raise NonFiniteLossError('Non-finite {} loss {}; batch seeds {}'.format(
            what, float(loss), seeds))


def _unpack(batch: Dict[str, Any], device: str) -> Tuple[Tensor, Tensor, Tensor]:
    return (batch['normal'].to(device), batch['anomalous'].to(device),
            batch['gt_mask'].to(device))


def train_step(batch: Dict[str, Any], model: DecoupledStudentTeacher,
               optimizer: torch.optim.Optimizer, ngm_weight: float = 1.0,
               aim_weight: float = 1.0, device: str = 'cpu') -> DistillLossReport:
    '''One optimizer step on a batch of pairs.

        Normal and anomalous images go through the student together; the
        normal-image teacher features are the NGM target for both.
    '''
    normal, anomalous, gt_mask = _unpack(batch, device)
    model.student.train()
    n = normal.shape[0]
    teacher = model.teacher_forward(torch.cat([normal, anomalous]))
    normality, abnormality = model.student_forward(torch.cat([normal, anomalous]))

    def _split(pyramid):
        return [f[:n] for f in pyramid], [f[n:] for f in pyramid]

    teacher_n, teacher_a = _split(teacher)
    normality_n, normality_a = _split(normality)
    abnormality_n, abnormality_a = _split(abnormality)
    total, report = distillation_loss(
        teacher_n, teacher_a, normality_n, normality_a, abnormality_n, abnormality_a,
        gt_mask, ngm_weight, aim_weight,
        use_ngm=model.flags.use_normality, use_aim=model.flags.use_abnormality)
    _check_finite(total, batch.get('seed'), 'distillation')

    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return report


def distill_epoch(model: DecoupledStudentTeacher, loader: DataLoader,
                  optimizer: torch.optim.Optimizer, cfg: RunConfig, epoch: int,
                  log: Optional[TrainingLog] = None) -> float:
    totals: List[float] = []
    for step, batch in enumerate(tqdm(loader, desc='distill {}'.format(epoch),
                                      leave=False, disable=None)):
        report = train_step(batch, model, optimizer, cfg.ngm_weight, cfg.aim_weight,
                            cfg.device)
        totals.append(report.total)
        if log is not None:
            log.append({'epoch': epoch, 'step': step, **report.to_record()})
        logger.debug('epoch {} step {}: ngm {:.4f} aim {:.4f}'.format(
            epoch, step, report.l_ngm, report.l_aim))
    return sum(totals) / max(len(totals), 1)


def seg_step(batch: Dict[str, Any], model: DecoupledStudentTeacher, head: FusionHead,
             optimizer: torch.optim.Optimizer, cfg: RunConfig) -> float:
    '''One head update; a loss with no path to a head parameter (MM off)
    is evaluated but not stepped'''
    normal, anomalous, gt_mask = _unpack(batch, cfg.device)
    images = torch.cat([normal, anomalous])
    masks = torch.cat([torch.zeros_like(gt_mask), gt_mask])
    with torch.no_grad():
        stack = map_stack(model, images, cfg.flags.pyramid_upsampling)
    head.train()
    maps = head(stack)
    scores = anomaly_score(maps, cfg.top_k, cfg.score_extra_sigmoid)
    loss = seg_loss(maps, scores, masks)
    _check_finite(loss, batch.get('seed'), 'segmentation')
    if not loss.requires_grad:
        return loss.item()
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    head.constrain_()
    return loss.item()


def train_seg_epoch(loader: DataLoader, model: DecoupledStudentTeacher,
                    head: FusionHead, optimizer: torch.optim.Optimizer,
                    cfg: RunConfig, epoch: int = 0) -> Dict[str, float]:
    '''Head pass over the pairs; raises `FrozenParameterError` if the
    student or teacher changed during it'''
    model.eval()
    before = parameter_hash(model)
    losses = [seg_step(batch, model, head, optimizer, cfg)
              for batch in tqdm(loader, desc='head {}'.format(epoch), leave=False, disable=None)]
    if parameter_hash(model) != before:
        raise FrozenParameterError('Student or teacher parameters changed during the head pass')
    return {'seg_loss': sum(losses) / max(len(losses), 1), 'steps': len(losses)}


def make_loader(dataset: TrainingPairDataset, cfg: RunConfig) -> DataLoader:
    generator = torch.Generator().manual_seed(derive_seed(cfg.seed, 2))
    return DataLoader(dataset, batch_size=cfg.batch_size, shuffle=True,
                      generator=generator, num_workers=0)


def build_training_set(cfg: RunConfig, category: Optional[str] = None) -> TrainingPairDataset:
    category = category or cfg.category
    index = load_dataset(cfg.dataset_root, category, 'train')
    synthesizer = AnomalySynthesizer(
        cfg.synthesis, category=category, fas=cfg.flags.fas,
        foreground_dir=Path(cfg.dataset_root) / category / 'foreground')
    dataset = TrainingPairDataset(index, synthesizer, cfg.input_size, seed=cfg.seed,
                                  num_workers=cfg.num_workers, mean=cfg.mean, std=cfg.std)
    synthesizer.self_pool = list(dataset.images)
    return dataset


def run_training(cfg: RunConfig, category: Optional[str] = None,
                 on_epoch_end: Optional[Callable[[int, Dict[str, float]], None]] = None
                 ) -> Path:
    '''Trains one category and returns the path of the last checkpoint.

        Data and config errors surface before the first step. `on_epoch_end`
        receives (epoch, stats) after each epoch.
    '''
    category = category or cfg.category
    cfg = cfg.replace(category=category)
    dataset = build_training_set(cfg, category)
    if len(dataset) == 0:
        raise CorruptDatasetError('No training images for `{}`'.format(category))

    seed_everything(cfg.seed)
    model = build_model(cfg).to(cfg.device)
    head = build_head(cfg).to(cfg.device)
    optimizer = torch.optim.Adam(model.trainable_parameters(), lr=cfg.lr)
    head_optimizer = (torch.optim.Adam(head.parameters(), lr=cfg.head_lr)
                      if is_trainable(head) else None)
    loader = make_loader(dataset, cfg)

    run_dir = cfg.run_dir
    log = TrainingLog(run_dir / TRAIN_LOG)
    log.reset()
    manager = CheckpointManager(run_dir)
    teacher_hash = parameter_hash(model.teacher)
    epochs = cfg.epochs_for(category)
    logger.info('Training `{}` for {} epochs ({} pairs, fingerprint {})'.format(
        category, epochs, len(dataset), cfg.fingerprint()))

    for epoch in range(1, epochs + 1):
        dataset.set_epoch(epoch)
        distill = distill_epoch(model, loader, optimizer, cfg, epoch, log)
        if head_optimizer is not None:
            seg_loss_value = train_seg_epoch(loader, model, head, head_optimizer, cfg,
                                             epoch)['seg_loss']
        else:
            # plain-sum fusion has nothing to train; best.pt follows the distillation loss
            seg_loss_value = math.nan
        if parameter_hash(model.teacher) != teacher_hash:
            raise FrozenParameterError('Teacher parameters changed in epoch {}'.format(epoch))
        stats = {'distill_loss': distill, 'seg_loss': seg_loss_value}
        selection = distill if head_optimizer is None else seg_loss_value
        manager.save(CheckpointBundle.capture(cfg, model, head, epoch, selection))
        logger.info('epoch {}/{}: distill {:.4f} head {:.4f}'.format(
            epoch, epochs, distill, seg_loss_value))
        if on_epoch_end is not None:
            on_epoch_end(epoch, stats)
    return manager.last_path
