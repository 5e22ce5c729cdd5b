import logging
from typing import List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from dualdistill.backbone import DecoupledStudentTeacher, resize_to
from dualdistill.common import NUM_STAGES, FeaturePyramid, InvalidArgumentError
from dualdistill.config import AblationFlags, RunConfig
from dualdistill.losses import stage_distances

logger = logging.getLogger(__name__)

NUM_MAPS = 2 * NUM_STAGES
BCE_EPS = 1e-7


def compute_stage_maps(teacher: FeaturePyramid, student_norm: FeaturePyramid,
                       student_abn: FeaturePyramid) -> Tuple[List[Tensor], List[Tensor]]:
    '''Per-stage cosine distances teacher / normality and teacher / abnormality'''
    return stage_distances(teacher, student_norm), stage_distances(teacher, student_abn)


def _accumulate(maps: List[Tensor], top_down: bool) -> List[Tensor]:
    order = range(len(maps) - 1, -1, -1) if top_down else range(len(maps))
    out = list(maps)
    carried = None
    for i in order:
        if carried is not None:
            out[i] = maps[i] + resize_to(carried, maps[i].shape[-2:])
        carried = out[i]
    return out


def pyramid_upsample(ngm_maps: Sequence[Tensor], aim_maps: Sequence[Tensor],
                     size: Sequence[int], pu: bool = True) -> Tensor:
    '''Stacks the eight stage maps into B x 8 x H x W at `size`.

        NGM maps are accumulated top-down, AIM maps bottom-up, before the
        final bilinear resize. Channel order is NGM 1..4 then AIM 1..4.
        With `pu` off each map is resized on its own.
    '''
    if len(ngm_maps) != NUM_STAGES or len(aim_maps) != NUM_STAGES:
        raise InvalidArgumentError('Expected {0} + {0} stage maps, got {1} + {2}'.format(
            NUM_STAGES, len(ngm_maps), len(aim_maps)))
    ngm = [m.reshape(-1, 1, *m.shape[-2:]) for m in ngm_maps]
    aim = [m.reshape(-1, 1, *m.shape[-2:]) for m in aim_maps]
    if pu:
        ngm = _accumulate(ngm, top_down=True)
        aim = _accumulate(aim, top_down=False)
    size = tuple(int(s) for s in size)
    upsampled = [F.interpolate(m, size=size, mode='bilinear', align_corners=False)
                 for m in ngm + aim]
    return torch.cat(upsampled, dim=1)


class ChannelAttention(nn.Module):
    '''Squeeze-and-excitation gate, 2 * sigmoid so a zero last layer is identity'''

    def __init__(self, channels: int = NUM_MAPS, reduction: int = 4) -> None:
        super(ChannelAttention, self).__init__()
        self.fc = nn.Sequential(
            nn.Linear(channels, channels // reduction),
            nn.ReLU(inplace=True),
            nn.Linear(channels // reduction, channels))
        nn.init.zeros_(self.fc[2].weight)
        nn.init.zeros_(self.fc[2].bias)

    def forward(self, x: Tensor) -> Tensor:
        gate = 2 * torch.sigmoid(self.fc(x.mean(dim=(2, 3))))
        return x * gate[:, :, None, None]


class SpatialAttention(nn.Module):
    '''Per-pixel gate 2 * sigmoid(conv([channel max, channel mean])).

        With a non-negative kernel the gate never falls as the response
        rises, so gating keeps the pixel order of a non-negative stack.
        `constrain_` projects the kernel back onto that set.
    '''

    def __init__(self, kernel_size: int = 7) -> None:
        super(SpatialAttention, self).__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)
        nn.init.zeros_(self.conv.weight)
        nn.init.zeros_(self.conv.bias)

    def forward(self, x: Tensor) -> Tensor:
        pooled = torch.cat([x.amax(dim=1, keepdim=True), x.mean(dim=1, keepdim=True)], dim=1)
        return x * 2 * torch.sigmoid(self.conv(pooled))

    @torch.no_grad()
    def constrain_(self):
        self.conv.weight.clamp_(min=0)


class MultiPerceptionHead(nn.Module):
    '''Fuses the map stack into one map in (0, 1).

        Channel attention, then spatial attention, then a per-pixel convex
        channel weighting softmax(G) whose channel sum is added to a 1x1
        compression of the weighted stack before the sigmoid.

        At construction both attentions are identity, G is zero and the
        compression is zero, so the head equals sigmoid(channel mean), which
        is also what it computes with `mm` off.

        After `constrain_` (run after every optimizer step) the spatial
        kernel is non-negative and every compression weight is at least -1,
        so for fixed channel gates the output never decreases when a stack
        value increases.

        Parameters
        ----------

        map_size : int. Side of the (square) input resolution; G is channels x map_size x map_size.

        channels : int. 8 for the dual-branch stack, 4 for a single branch.

        mm : bool. Multi-perception on; when off the head has no effect.
    '''

    def __init__(self, map_size: int, channels: int = NUM_MAPS, reduction: int = 4,
                 spatial_kernel: int = 7, mm: bool = True) -> None:
        super(MultiPerceptionHead, self).__init__()
        self.map_size = map_size
        self.channels = channels
        self.mm = mm
        self.channel_attention = ChannelAttention(channels, reduction)
        self.spatial_attention = SpatialAttention(spatial_kernel)
        self.global_attention = nn.Parameter(torch.zeros(channels, map_size, map_size))
        self.compress = nn.Conv2d(channels, 1, kernel_size=1)
        nn.init.zeros_(self.compress.weight)
        nn.init.zeros_(self.compress.bias)

    def forward(self, stack: Tensor) -> Tensor:
        _check_stack(stack, self.channels)
        if not self.mm:
            return torch.sigmoid(stack.mean(dim=1))
        if tuple(stack.shape[-2:]) != tuple(self.global_attention.shape[-2:]):
            raise InvalidArgumentError('Map size {} differs from the head size {}'.format(
                tuple(stack.shape[-2:]), tuple(self.global_attention.shape[-2:])))
        x = self.spatial_attention(self.channel_attention(stack))
        weighted = x * torch.softmax(self.global_attention, dim=0)
        logits = self.compress(weighted)[:, 0] + weighted.sum(dim=1)
        return torch.sigmoid(logits)

    @torch.no_grad()
    def constrain_(self):
        '''Projects the parameters back onto the order-preserving set'''
        self.spatial_attention.constrain_()
        self.compress.weight.clamp_(min=-1)


class PlainSumFusion(nn.Module):
    '''Untrained fusion: the channel sum of the stack, not bounded to (0, 1)'''

    def __init__(self, channels: int = NUM_MAPS) -> None:
        super(PlainSumFusion, self).__init__()
        self.channels = channels

    def forward(self, stack: Tensor) -> Tensor:
        _check_stack(stack, self.channels)
        return stack.sum(dim=1)

    def constrain_(self):
        pass


FusionHead = Union[MultiPerceptionHead, PlainSumFusion]


def _check_stack(stack: Tensor, channels: int):
    if stack.dim() != 4 or stack.shape[1] != channels:
        raise InvalidArgumentError('Expected B x {} x H x W maps, got {}'.format(
            channels, tuple(stack.shape)))


def is_trainable(head: nn.Module) -> bool:
    return any(p.requires_grad for p in head.parameters())


def fuse(stack: Tensor, head: FusionHead) -> Tensor:
    return head(stack)


def anomaly_score(m: Tensor, k: int = 100, extra_sigmoid: bool = False) -> Tensor:
    '''Mean of the `k` largest values of an H x W (or B x H x W) map'''
    flat = m.reshape(-1, m.shape[-2] * m.shape[-1]) if m.dim() > 2 else m.reshape(1, -1)
    if k < 1 or k > flat.shape[1]:
        raise InvalidArgumentError('k = {} outside [1, {}]'.format(k, flat.shape[1]))
    score = flat.topk(k, dim=1).values.mean(dim=1)
    if extra_sigmoid:
        score = torch.sigmoid(score)
    return score.reshape(m.shape[:-2])


def _bce(p: Tensor, y: Tensor) -> Tensor:
    p = p.clamp(BCE_EPS, 1 - BCE_EPS)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p))


def seg_loss(m: Tensor, s: Tensor, gt: Tensor) -> Tensor:
    '''Pixel-mean BCE(M, gt) plus BCE(S, max(gt)), averaged over the batch'''
    if gt.numel() != m.numel():
        raise InvalidArgumentError('Map {} and mask {} differ in size'.format(
            tuple(m.shape), tuple(gt.shape)))
    gt = gt.reshape(m.shape).to(m.dtype)
    pixel = _bce(m, gt).mean()
    label = gt.reshape(-1, m.shape[-2] * m.shape[-1]).amax(dim=1)
    image = _bce(s.reshape(-1), label).mean()
    return pixel + image


@torch.no_grad()
def predict(model: DecoupledStudentTeacher, head: FusionHead, images: Tensor,
            pu: bool = True, top_k: int = 100, extra_sigmoid: bool = False
            ) -> Tuple[Tensor, Tensor]:
    '''Fused maps (B x H x W) and scores (B,) for a batch of standardized images'''
    stack = map_stack(model, images, pu)
    maps = head(stack)
    return maps, anomaly_score(maps, top_k, extra_sigmoid)


def stack_channels(flags: AblationFlags) -> int:
    return NUM_STAGES * (int(flags.use_normality) + int(flags.use_abnormality))


def map_stack(model: DecoupledStudentTeacher, images: Tensor, pu: bool = True) -> Tensor:
    '''B x C x H x W distance stack, C = 8 or 4 when the model keeps one branch'''
    teacher = model.teacher_forward(images)
    normality, abnormality = model.student_forward(images)
    ngm_maps, aim_maps = compute_stage_maps(teacher, normality, abnormality)
    stack = pyramid_upsample(ngm_maps, aim_maps, images.shape[-2:], pu)
    if not model.flags.use_abnormality:
        return stack[:, :NUM_STAGES]
    if not model.flags.use_normality:
        return stack[:, NUM_STAGES:]
    return stack


def build_head(cfg: RunConfig, seed: Optional[int] = None) -> FusionHead:
    channels = stack_channels(cfg.flags)
    if not cfg.flags.msn:
        return PlainSumFusion(channels)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed if seed is None else seed)
        return MultiPerceptionHead(cfg.input_size, channels, mm=cfg.flags.mm)
