import math

import pytest
import torch
from torch.autograd import gradcheck

from dualdistill.common import InvalidArgumentError
from dualdistill.backbone import DecoupledStudentTeacher
from dualdistill.config import AblationFlags, BackboneSpec
from dualdistill.seg_head import (NUM_MAPS, MultiPerceptionHead, PlainSumFusion, anomaly_score,
                                  build_head, fuse, is_trainable, map_stack, predict,
                                  pyramid_upsample, seg_loss)

STAGE_SIZES = (16, 8, 4, 2)


def _constant_maps(values, batch=1):
    return [torch.full((batch, s, s), float(v)) for v, s in zip(values, STAGE_SIZES)]


def _randomize(head: MultiPerceptionHead, seed: int = 0):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in head.parameters():
            p.copy_(torch.randn(p.shape, generator=g) * 0.5)
    return head


# region Pyramid upsampling

def test_pyramid_upsample_accumulates_in_both_directions():
    ngm = _constant_maps([1, 2, 4, 8])
    aim = _constant_maps([10, 20, 40, 80])
    stack = pyramid_upsample(ngm, aim, (32, 32))
    assert stack.shape == (1, NUM_MAPS, 32, 32)
    expected = [15, 14, 12, 8, 10, 30, 70, 150]
    for channel, value in enumerate(expected):
        torch.testing.assert_close(stack[0, channel], torch.full((32, 32), float(value)))


def test_pyramid_upsample_without_pu_resizes_each_map():
    stack = pyramid_upsample(_constant_maps([1, 2, 4, 8]), _constant_maps([3, 5, 7, 9]),
                             (16, 16), pu=False)
    for channel, value in enumerate([1, 2, 4, 8, 3, 5, 7, 9]):
        torch.testing.assert_close(stack[0, channel], torch.full((16, 16), float(value)))


def test_pyramid_upsample_rejects_missing_stage():
    with pytest.raises(InvalidArgumentError):
        pyramid_upsample(_constant_maps([1, 2, 3]), _constant_maps([1, 2, 3, 4]), (16, 16))


def test_map_stack_of_identity_student(identity_model, images):
    stack = map_stack(identity_model.eval(), images, pu=False)
    assert stack.shape == (2, NUM_MAPS, 64, 64)
    # both student halves are the same at exact identity init
    torch.testing.assert_close(stack[:, :4], stack[:, 4:])
    assert (stack >= 0).all()

def test_map_stack_of_one_branch(images):
    full = DecoupledStudentTeacher(BackboneSpec.toy(), AblationFlags(), seed=0).eval()
    normality_only = DecoupledStudentTeacher(
        BackboneSpec.toy(), AblationFlags(branches='normality'), seed=0).eval()
    abnormality_only = DecoupledStudentTeacher(
        BackboneSpec.toy(), AblationFlags(branches='abnormality'), seed=0).eval()
    with torch.no_grad():
        stack = map_stack(full, images)
        normality = map_stack(normality_only, images)
        abnormality = map_stack(abnormality_only, images)
    assert normality.shape == abnormality.shape == (2, 4, 64, 64)
    # the normality PMN is built first, so both models share its weights
    torch.testing.assert_close(normality, stack[:, :4])
    assert (abnormality >= 0).all()

# endregion Pyramid upsampling


# region Fusion

def test_fuse_of_zero_stack_is_one_half():
    head = MultiPerceptionHead(16)
    out = fuse(torch.zeros(2, NUM_MAPS, 16, 16), head)
    assert out.shape == (2, 16, 16)
    torch.testing.assert_close(out, torch.full((2, 16, 16), 0.5))


def test_head_at_init_equals_head_without_mm():
    stack = torch.rand(2, NUM_MAPS, 16, 16, generator=torch.Generator().manual_seed(0))
    with_mm = MultiPerceptionHead(16, mm=True)
    without = MultiPerceptionHead(16, mm=False)
    torch.testing.assert_close(with_mm(stack), without(stack))
    torch.testing.assert_close(without(stack), torch.sigmoid(stack.mean(dim=1)))


def test_head_output_in_unit_interval():
    head = _randomize(MultiPerceptionHead(8))
    out = head(torch.randn(3, NUM_MAPS, 8, 8, generator=torch.Generator().manual_seed(1)) * 5)
    assert ((out > 0) & (out < 1)).all()


def test_head_is_channel_permutation_equivariant():
    head = _randomize(MultiPerceptionHead(8))
    stack = torch.rand(2, NUM_MAPS, 8, 8, generator=torch.Generator().manual_seed(2))
    perm = torch.randperm(NUM_MAPS, generator=torch.Generator().manual_seed(3))
    permuted = MultiPerceptionHead(8)
    state = {k: v.clone() for k, v in head.state_dict().items()}
    state['channel_attention.fc.0.weight'] = state['channel_attention.fc.0.weight'][:, perm]
    state['channel_attention.fc.2.weight'] = state['channel_attention.fc.2.weight'][perm]
    state['channel_attention.fc.2.bias'] = state['channel_attention.fc.2.bias'][perm]
    state['global_attention'] = state['global_attention'][perm]
    state['compress.weight'] = state['compress.weight'][:, perm]
    permuted.load_state_dict(state)
    torch.testing.assert_close(head(stack), permuted(stack[:, perm]))


def test_head_rejects_wrong_shapes():
    head = MultiPerceptionHead(16)
    with pytest.raises(InvalidArgumentError):
        head(torch.zeros(1, 4, 16, 16))
    with pytest.raises(InvalidArgumentError):
        head(torch.zeros(1, NUM_MAPS, 8, 8))


def test_every_head_parameter_receives_gradient():
    head = MultiPerceptionHead(8)
    # move off the zero init so every gate passes gradient
    with torch.no_grad():
        head.channel_attention.fc[0].weight.fill_(0.1)
        head.channel_attention.fc[0].bias.fill_(0.1)
        head.channel_attention.fc[2].weight.fill_(0.1)
        head.spatial_attention.conv.weight.fill_(0.1)
        head.compress.weight.fill_(0.1)
    stack = torch.rand(2, NUM_MAPS, 8, 8, generator=torch.Generator().manual_seed(0))
    gt = torch.zeros(2, 8, 8)
    gt[1, 2:5, 2:5] = 1
    maps = head(stack)
    seg_loss(maps, anomaly_score(maps, k=4), gt).backward()
    for name, p in head.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name

def test_constrain_projects_head_parameters():
    head = _randomize(MultiPerceptionHead(8))
    with torch.no_grad():
        head.spatial_attention.conv.weight.fill_(-3.0)
        head.compress.weight.fill_(-2.0)
    bias = head.spatial_attention.conv.bias.clone()
    head.constrain_()
    assert (head.spatial_attention.conv.weight == 0).all()
    assert (head.compress.weight == -1).all()
    assert torch.equal(head.spatial_attention.conv.bias, bias)


def test_constrained_head_never_lowers_any_pixel_when_a_value_rises():
    g = torch.Generator().manual_seed(4)
    for seed in range(5):
        head = _randomize(MultiPerceptionHead(8), seed)
        with torch.no_grad():
            head.channel_attention.fc[2].weight.zero_()
            head.channel_attention.fc[2].bias.zero_()
        head.constrain_()
        stack = torch.rand(1, NUM_MAPS, 8, 8, generator=g)
        c, i, j = (torch.randint(0, n, (1,), generator=g).item() for n in (NUM_MAPS, 8, 8))
        raised = stack.clone()
        raised[0, c, i, j] += 1.0
        with torch.no_grad():
            before, after = head(stack), head(raised)
        assert (after >= before - 1e-6).all()


def test_plain_sum_fusion():
    stack = torch.rand(2, NUM_MAPS, 8, 8, generator=torch.Generator().manual_seed(0))
    fusion = PlainSumFusion()
    torch.testing.assert_close(fuse(stack, fusion), stack.sum(dim=1))
    assert not is_trainable(fusion)
    with pytest.raises(InvalidArgumentError):
        fusion(torch.zeros(1, 4, 8, 8))


def test_build_head_follows_flags(toy_config):
    head = build_head(toy_config)
    assert isinstance(head, MultiPerceptionHead) and head.channels == NUM_MAPS
    single = build_head(toy_config.replace(branches='abnormality'))
    assert single.channels == 4
    assert single(torch.rand(1, 4, 64, 64)).shape == (1, 64, 64)
    plain = build_head(toy_config.replace(msn=False, branches='normality'))
    assert isinstance(plain, PlainSumFusion) and plain.channels == 4

# endregion Fusion


# region Scoring and loss

def test_anomaly_score_examples():
    m = torch.arange(16, dtype=torch.float64).reshape(4, 4)
    assert anomaly_score(m, k=1).item() == 15
    assert anomaly_score(m, k=16).item() == pytest.approx(7.5)
    assert anomaly_score(m, k=4).item() == pytest.approx(13.5)
    assert anomaly_score(torch.full((4, 4), 0.3), k=5).item() == pytest.approx(0.3)
    assert anomaly_score(m, k=1, extra_sigmoid=True).item() == pytest.approx(
        1 / (1 + math.exp(-15)))


def test_anomaly_score_top_k_selection():
    m = torch.full((32, 32), 0.1, dtype=torch.float64)
    m.view(-1)[torch.randperm(1024, generator=torch.Generator().manual_seed(0))[:100]] = 0.9
    assert anomaly_score(m, k=100).item() == pytest.approx(0.9, abs=1e-12)


def test_anomaly_score_matches_sort_oracle():
    g = torch.Generator().manual_seed(1)
    for _ in range(10):
        m = torch.rand(16, 16, generator=g, dtype=torch.float64)
        expected = sorted(m.flatten().tolist(), reverse=True)[:30]
        assert anomaly_score(m, k=30).item() == pytest.approx(sum(expected) / 30, abs=1e-12)


def test_anomaly_score_batches_and_validates():
    m = torch.rand(3, 8, 8)
    assert anomaly_score(m, k=10).shape == (3,)
    with pytest.raises(InvalidArgumentError):
        anomaly_score(m, k=0)
    with pytest.raises(InvalidArgumentError):
        anomaly_score(m, k=65)


def test_anomaly_score_is_monotone():
    g = torch.Generator().manual_seed(0)
    for _ in range(20):
        m = torch.rand(8, 8, generator=g)
        raised = m.clone()
        i, j = torch.randint(0, 8, (2,), generator=g).tolist()
        raised[i, j] += torch.rand(1, generator=g).item()
        assert anomaly_score(raised, k=5) >= anomaly_score(m, k=5)


def test_seg_loss_at_one_half():
    m = torch.full((1, 8, 8), 0.5, dtype=torch.float64)
    s = torch.full((1,), 0.5, dtype=torch.float64)
    loss = seg_loss(m, s, torch.ones(1, 8, 8, dtype=torch.float64))
    assert loss.item() == pytest.approx(2 * math.log(2), abs=1e-9)
    loss = seg_loss(m, s, torch.zeros(1, 8, 8, dtype=torch.float64))
    assert loss.item() == pytest.approx(2 * math.log(2), abs=1e-9)


def test_seg_loss_matches_pixel_oracle():
    g = torch.Generator().manual_seed(0)
    m = torch.rand(2, 4, 4, generator=g, dtype=torch.float64) * 0.98 + 0.01
    s = torch.tensor([0.2, 0.7], dtype=torch.float64)
    gt = (torch.rand(2, 4, 4, generator=g) > 0.7).double()
    gt[0] = 0
    pixel = 0.0
    for value, target in zip(m.flatten().tolist(), gt.flatten().tolist()):
        pixel -= target * math.log(value) + (1 - target) * math.log(1 - value)
    pixel /= m.numel()
    image = -(math.log(1 - 0.2) + (math.log(0.7) if gt[1].max() > 0 else math.log(0.3))) / 2
    assert seg_loss(m, s, gt).item() == pytest.approx(pixel + image, rel=1e-9)


def test_seg_loss_gradcheck():
    g = torch.Generator().manual_seed(0)
    m = (torch.rand(1, 8, 8, generator=g, dtype=torch.float64) * 0.9 + 0.05).requires_grad_()
    s = torch.tensor([0.4], dtype=torch.float64, requires_grad=True)
    gt = (torch.rand(1, 8, 8, generator=g) > 0.5).double()
    assert gradcheck(lambda a, b: seg_loss(a, b, gt), (m, s), eps=1e-6, atol=1e-8, rtol=1e-4)


def test_seg_loss_rejects_mismatched_mask():
    with pytest.raises(InvalidArgumentError):
        seg_loss(torch.rand(1, 8, 8), torch.rand(1), torch.zeros(1, 4, 4))


def test_predict_shapes(toy_model, images):
    head = MultiPerceptionHead(64)
    maps, scores = predict(toy_model.eval(), head, images, top_k=10)
    assert maps.shape == (2, 64, 64)
    assert scores.shape == (2,)
    assert ((maps > 0) & (maps < 1)).all()

# endregion Scoring and loss
