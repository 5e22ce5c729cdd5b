import copy
import logging
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from dualdistill.common import FeaturePyramid, InvalidArgumentError
from dualdistill.config import AblationFlags, BackboneSpec, RunConfig

logger = logging.getLogger(__name__)

NORMALITY, ABNORMALITY = 'normality', 'abnormality'
TOP_DOWN, BOTTOM_UP = 'top-down', 'bottom-up'


# region Trunks

def _toy_stage(c_in: int, c_out: int, stem: bool = False) -> nn.Sequential:
    layers: List[nn.Module] = []
    if stem:
        layers += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
        c_in = c_out
    layers += [nn.Conv2d(c_in, c_out, 3, padding=1),
               nn.GroupNorm(4, c_out),
               nn.ReLU(inplace=True),
               nn.AvgPool2d(2)]
    return nn.Sequential(*layers)


def _toy_trunk(spec: BackboneSpec) -> nn.ModuleList:
    '''Four {3x3 conv, group norm, ReLU, stride-2 pool} stages; the first
    stage carries a stride-2 stem so stage i runs at input / 2^(i+1)'''
    channels = spec.stage_channels
    stages = [_toy_stage(3, channels[0], stem=True)]
    stages += [_toy_stage(c_in, c_out) for c_in, c_out in zip(channels[:-1], channels[1:])]
    return nn.ModuleList(stages)


def _wideresnet50_trunk(spec: BackboneSpec) -> nn.ModuleList:
    from torchvision.models import Wide_ResNet50_2_Weights, wide_resnet50_2
    weights = Wide_ResNet50_2_Weights.IMAGENET1K_V1 if spec.pretrained else None
    model = wide_resnet50_2(weights=weights)
    return nn.ModuleList([
        nn.Sequential(model.conv1, model.bn1, model.relu, model.maxpool, model.layer1),
        model.layer2,
        model.layer3,
        model.layer4,
    ])


def build_trunk(spec: BackboneSpec) -> nn.ModuleList:
    if spec.kind == 'toy':
        return _toy_trunk(spec)
    return _wideresnet50_trunk(spec)

# endregion Trunks


def _check_input(x: Tensor, input_size: int):
    if x.dim() != 4 or x.shape[1] != 3 or x.shape[-2:] != (input_size, input_size):
        raise InvalidArgumentError('Expected a B x 3 x {0} x {0} batch, got {1}'.format(
            input_size, tuple(x.shape)))


class Teacher(nn.Module):
    '''Frozen trunk; always in inference mode and never tracked by autograd'''

    def __init__(self, trunk: nn.ModuleList, input_size: int) -> None:
        super(Teacher, self).__init__()
        self.stages = trunk
        self.input_size = input_size
        for param in self.parameters():
            param.requires_grad = False
        self.eval()

    def train(self, mode: bool = True) -> 'Teacher':
        return super(Teacher, self).train(False)

    @torch.no_grad()
    def forward(self, x: Tensor) -> FeaturePyramid:
        _check_input(x, self.input_size)
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return features


class DecoupleLayer(nn.Module):
    '''1x1 convolution C -> 2C whose output halves are the normality and
    abnormality features. Both halves start as identity maps.'''

    def __init__(self, channels: int, init_std: float = 0.0,
                 generator: Optional[torch.Generator] = None) -> None:
        super(DecoupleLayer, self).__init__()
        self.channels = channels
        self.conv = nn.Conv2d(channels, 2 * channels, kernel_size=1)
        eye = torch.eye(channels)
        with torch.no_grad():
            weight = torch.cat([eye, eye], dim=0)
            if init_std > 0:
                weight[channels:] += init_std * torch.randn(
                    channels, channels, generator=generator)
            self.conv.weight.copy_(weight[:, :, None, None])
            self.conv.bias.zero_()

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        normality, abnormality = self.conv(x).chunk(2, dim=1)
        return normality, abnormality


def resize_to(x: Tensor, size: Sequence[int]) -> Tensor:
    '''Bilinear upsampling or average-pool downsampling to `size`'''
    size = tuple(size)
    if tuple(x.shape[-2:]) == size:
        return x
    if x.shape[-2] < size[0]:
        return F.interpolate(x, size=size, mode='bilinear', align_corners=False)
    return F.adaptive_avg_pool2d(x, size)


class PyramidModelingNetwork(nn.Module):
    '''Bidirectional dual-path fusion over a 4-stage pyramid.

        The normality branch runs its inner path top-down (stage 4 -> 1) and
        its outer path bottom-up; the abnormality branch does the opposite.
        Each path projects laterally to a common width, adds the resized
        neighbour and smooths with a 3x3 convolution; output 1x1
        convolutions restore the stage widths. Disabled paths are identity,
        and with both disabled the pyramid passes through unchanged.
    '''

    def __init__(self, stage_channels: Sequence[int], branch: str,
                 width: Optional[int] = None, inner: bool = True, outer: bool = True) -> None:
        super(PyramidModelingNetwork, self).__init__()
        if branch not in (NORMALITY, ABNORMALITY):
            raise InvalidArgumentError('Unknown branch `{}`'.format(branch))
        self.branch = branch
        self.inner_direction = TOP_DOWN if branch == NORMALITY else BOTTOM_UP
        self.outer_direction = BOTTOM_UP if branch == NORMALITY else TOP_DOWN
        self.enabled = inner or outer
        width = width or stage_channels[0]

        def _smooth() -> nn.ModuleList:
            return nn.ModuleList([nn.Conv2d(width, width, 3, padding=1) for _ in stage_channels])

        self.lateral = nn.ModuleList(
            [nn.Conv2d(c, width, 1) for c in stage_channels]) if self.enabled else None
        self.inner = _smooth() if inner else None
        self.outer = _smooth() if outer else None
        self.output = nn.ModuleList(
            [nn.Conv2d(width, c, 1) for c in stage_channels]) if self.enabled else None

    @staticmethod
    def _path(features: List[Tensor], smooth: nn.ModuleList, direction: str) -> List[Tensor]:
        order = range(len(features) - 1, -1, -1) if direction == TOP_DOWN else range(len(features))
        out: List[Optional[Tensor]] = [None] * len(features)
        carried = None
        for i in order:
            x = features[i]
            if carried is not None:
                x = x + resize_to(carried, x.shape[-2:])
            carried = x
            out[i] = smooth[i](x)
        return out

    def forward(self, pyramid: FeaturePyramid) -> FeaturePyramid:
        if not self.enabled:
            return list(pyramid)
        features = [lateral(x) for lateral, x in zip(self.lateral, pyramid)]
        if self.inner is not None:
            features = self._path(features, self.inner, self.inner_direction)
        if self.outer is not None:
            features = self._path(features, self.outer, self.outer_direction)
        return [output(x) for output, x in zip(self.output, features)]


def freeze_batchnorm(module: nn.Module):
    for child in module.modules():
        if isinstance(child, nn.modules.batchnorm._BatchNorm):
            child.eval()


class Student(nn.Module):
    '''Trunk with a decouple layer after every stage and one PMN per branch.

        Stage i+1 consumes the normality half of stage i. Batch-norm layers of
        the trunk stay in inference mode.
    '''

    def __init__(self, trunk: nn.ModuleList, spec: BackboneSpec, flags: AblationFlags,
                 pmn_width: Optional[int] = None, decouple_init_std: float = 0.0,
                 trainable_trunk: bool = True, generator: Optional[torch.Generator] = None
                 ) -> None:
        super(Student, self).__init__()
        self.input_size = spec.input_size
        self.stages = trunk
        self.decouple = nn.ModuleList([
            DecoupleLayer(c, decouple_init_std, generator) for c in spec.stage_channels])
        # a dropped branch keeps its decouple half but gets no PMN
        use_n, use_a = flags.use_normality, flags.use_abnormality
        self.pmn_normality = PyramidModelingNetwork(
            spec.stage_channels, NORMALITY, pmn_width,
            flags.pmn_inner and use_n, flags.pmn_outer and use_n)
        self.pmn_abnormality = PyramidModelingNetwork(
            spec.stage_channels, ABNORMALITY, pmn_width,
            flags.pmn_inner and use_a, flags.pmn_outer and use_a)
        for param in self.stages.parameters():
            param.requires_grad = trainable_trunk

    def train(self, mode: bool = True) -> 'Student':
        super(Student, self).train(mode)
        freeze_batchnorm(self.stages)
        return self

    def decoupled(self, x: Tensor) -> Tuple[FeaturePyramid, FeaturePyramid]:
        '''Per-stage normality / abnormality halves before PMN refinement'''
        _check_input(x, self.input_size)
        normality, abnormality = [], []
        for stage, decouple in zip(self.stages, self.decouple):
            n, a = decouple(stage(x))
            normality.append(n)
            abnormality.append(a)
            x = n
        return normality, abnormality

    def forward(self, x: Tensor) -> Tuple[FeaturePyramid, FeaturePyramid]:
        normality, abnormality = self.decoupled(x)
        return self.pmn_normality(normality), self.pmn_abnormality(abnormality)


class DecoupledStudentTeacher(nn.Module):
    '''Frozen teacher plus decoupled student built from the same trunk weights.

        Parameters
        ----------

        spec : BackboneSpec. Which trunk to build.

        flags : AblationFlags. Only the PMN and branch flags are used here.

        seed : int. Seeds trunk (toy) and head-independent student initialization.
    '''

    def __init__(self, spec: BackboneSpec, flags: Optional[AblationFlags] = None,
                 pmn_width: Optional[int] = None, decouple_init_std: float = 0.0,
                 trainable_trunk: bool = True, seed: int = 0) -> None:
        super(DecoupledStudentTeacher, self).__init__()
        self.spec = spec
        flags = flags or AblationFlags()
        self.flags = flags
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            trunk = build_trunk(spec)
            generator = torch.Generator().manual_seed(seed)
            self.teacher = Teacher(copy.deepcopy(trunk), spec.input_size)
            self.student = Student(trunk, spec, flags, pmn_width, decouple_init_std,
                                   trainable_trunk, generator)
        logger.debug('Built {} student-teacher, {} trainable parameters'.format(
            spec.kind, sum(p.numel() for p in self.trainable_parameters())))

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for p in self.student.parameters() if p.requires_grad]

    def teacher_forward(self, image: Tensor) -> FeaturePyramid:
        return self.teacher(image)

    def student_forward(self, image: Tensor) -> Tuple[FeaturePyramid, FeaturePyramid]:
        return self.student(image)

    def forward(self, image: Tensor) -> Tuple[FeaturePyramid, FeaturePyramid, FeaturePyramid]:
        normality, abnormality = self.student(image)
        return self.teacher(image), normality, abnormality


def build_model(cfg: RunConfig) -> DecoupledStudentTeacher:
    return DecoupledStudentTeacher(
        cfg.backbone_spec, cfg.flags, pmn_width=cfg.pmn_width,
        decouple_init_std=cfg.decouple_init_std,
        trainable_trunk=cfg.trainable_trunk, seed=cfg.seed)
