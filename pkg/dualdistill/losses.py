'''Distillation losses.

    Normality guidance pulls the student's normality features of both the
    normal and the synthetic anomalous image towards the teacher's features
    of the normal image. Abnormality inverse mimicking pushes the
    teacher / student-abnormality cosine distance towards the (downsampled)
    ground-truth mask: 0 on normal pixels, 1 (orthogonal) on anomalous ones.
'''
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor

from dualdistill.common import (FeaturePyramid, InvalidArgumentError, as_batch,
                                check_pyramids, check_same_shape)

logger = logging.getLogger(__name__)

EPS = 1e-8


def cosine_distance_map(a: Tensor, b: Tensor) -> Tensor:
    '''1 - cosine similarity along the channel axis.

        Accepts C x H x W or B x C x H x W and returns H x W or B x H x W,
        values clamped to [0, 2]. The norm product is clamped below by 1e-8 so a zero
        feature vector has distance 1.
    '''
    check_same_shape(a, b, 'feature maps')
    if a.dim() not in (3, 4):
        raise InvalidArgumentError('Expected C x H x W or B x C x H x W, got {}'.format(
            tuple(a.shape)))
    dim = a.dim() - 3
    dot = (a * b).sum(dim=dim)
    norms = a.norm(dim=dim) * b.norm(dim=dim)
    return (1 - dot / norms.clamp_min(EPS)).clamp(0, 2)


def stage_distances(teacher: FeaturePyramid, student: FeaturePyramid) -> List[Tensor]:
    check_pyramids(teacher, student)
    return [cosine_distance_map(t, s) for t, s in zip(teacher, student)]


def ngm_stage_terms(teacher_normal: FeaturePyramid,
                    student_norm_of_normal: FeaturePyramid,
                    student_norm_of_anomalous: FeaturePyramid) -> List[Tensor]:
    '''Per-stage mean(D^n) + mean(D^a)'''
    check_pyramids(teacher_normal, student_norm_of_normal, student_norm_of_anomalous)
    d_normal = stage_distances(teacher_normal, student_norm_of_normal)
    d_anomalous = stage_distances(teacher_normal, student_norm_of_anomalous)
    return [dn.mean() + da.mean() for dn, da in zip(d_normal, d_anomalous)]


def ngm_loss(teacher_normal: FeaturePyramid,
             student_norm_of_normal: FeaturePyramid,
             student_norm_of_anomalous: FeaturePyramid) -> Tensor:
    '''Stage mean of the spatial-mean distances of both student normality
    pyramids to the teacher pyramid of the normal image; lies in [0, 4]'''
    terms = ngm_stage_terms(teacher_normal, student_norm_of_normal, student_norm_of_anomalous)
    return torch.stack(terms).mean()


def downsample_mask(mask: Tensor, target: Sequence[int]) -> Tensor:
    '''Block-average pooling of an image-resolution mask to `target` (h, w).

        `mask` is H x W, 1 x H x W or B x 1 x H x W; the result keeps the
        leading dimensions. Raises `InvalidArgumentError` when the target
        does not divide the mask size.
    '''
    h, w = mask.shape[-2:]
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1 or h % th or w % tw:
        raise InvalidArgumentError('Cannot block-average a {}x{} mask to {}x{}'.format(
            h, w, th, tw))
    batched, _ = as_batch(mask if mask.is_floating_point() else mask.float())
    pooled = F.avg_pool2d(batched, kernel_size=(h // th, w // tw))
    return pooled.reshape(*mask.shape[:-2], th, tw)


def aim_stage_terms(teacher: FeaturePyramid, student_abn: FeaturePyramid,
                    gt_mask: Tensor) -> List[Tensor]:
    check_pyramids(teacher, student_abn)
    terms = []
    for distance in stage_distances(teacher, student_abn):
        target = downsample_mask(gt_mask, distance.shape[-2:])
        if target.dim() == distance.dim() + 1:
            target = target.squeeze(-3)
        if torch.broadcast_shapes(distance.shape, target.shape) != distance.shape:
            raise InvalidArgumentError('Mask of shape {} does not fit distances {}'.format(
                tuple(gt_mask.shape), tuple(distance.shape)))
        terms.append((distance - target.to(distance.dtype)).abs().mean())
    return terms


def aim_loss(teacher: FeaturePyramid, student_abn: FeaturePyramid, gt_mask: Tensor) -> Tensor:
    '''Stage mean of the spatial-mean |D_i - mask_i|, mask_i being `gt_mask`
    block-averaged to the stage size. Per-stage terms lie in [0, 2].'''
    return torch.stack(aim_stage_terms(teacher, student_abn, gt_mask)).mean()


@dataclass
class DistillLossReport:
    l_ngm: float
    l_aim: float
    total: float
    ngm_stages: List[float] = field(default_factory=list)
    aim_stages: List[float] = field(default_factory=list)

    def to_record(self) -> Dict[str, float]:
        record = {'l_ngm': self.l_ngm, 'l_aim': self.l_aim, 'total': self.total}
        for i, value in enumerate(self.ngm_stages):
            record['ngm_{}'.format(i + 1)] = value
        for i, value in enumerate(self.aim_stages):
            record['aim_{}'.format(i + 1)] = value
        return record


def distillation_loss(teacher_normal: FeaturePyramid, teacher_anomalous: FeaturePyramid,
                      normality_of_normal: FeaturePyramid,
                      normality_of_anomalous: FeaturePyramid,
                      abnormality_of_normal: FeaturePyramid,
                      abnormality_of_anomalous: FeaturePyramid,
                      gt_mask: Tensor, ngm_weight: float = 1.0, aim_weight: float = 1.0,
                      use_ngm: bool = True, use_aim: bool = True
                      ) -> Tuple[Tensor, DistillLossReport]:
    '''Weighted sum of both losses over a normal / anomalous pair.

        The AIM term averages the normal image (all-zero mask) and the
        anomalous image (`gt_mask`). A single-branch student drops the other
        branch's term from the total; the report still carries both.
    '''
    ngm_terms = ngm_stage_terms(teacher_normal, normality_of_normal, normality_of_anomalous)
    zero_mask = torch.zeros_like(gt_mask)
    aim_normal = aim_stage_terms(teacher_normal, abnormality_of_normal, zero_mask)
    aim_anomalous = aim_stage_terms(teacher_anomalous, abnormality_of_anomalous, gt_mask)
    aim_terms = [(n + a) / 2 for n, a in zip(aim_normal, aim_anomalous)]

    l_ngm = torch.stack(ngm_terms).mean()
    l_aim = torch.stack(aim_terms).mean()
    if not (use_ngm or use_aim):
        raise InvalidArgumentError('At least one of the NGM and AIM terms must be used')
    parts = ([ngm_weight * l_ngm] if use_ngm else []) + ([aim_weight * l_aim] if use_aim else [])
    total = torch.stack(parts).sum()
    report = DistillLossReport(
        l_ngm=l_ngm.item(), l_aim=l_aim.item(), total=total.item(),
        ngm_stages=[t.item() for t in ngm_terms],
        aim_stages=[t.item() for t in aim_terms])
    return total, report
