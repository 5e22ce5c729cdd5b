import pytest
import torch
from conftest import TOY

from dualdistill.backbone import build_model
from dualdistill.checkpoint import BEST, LAST, load_checkpoint, restore
from dualdistill.common import CorruptDatasetError, NonFiniteLossError, parameter_hash
from dualdistill.dataset import load_dataset
from dualdistill.inference import evaluate
from dualdistill.seg_head import PlainSumFusion, build_head
from dualdistill.toy import make_toy_dataset
from dualdistill.trainer import (TRAIN_LOG, TrainingLog, build_training_set, make_loader,
                                 run_training, seg_step, train_seg_epoch, train_step)


def _batch(images, anomalous=None, mask=None):
    n = images.shape[0]
    return {'normal': images,
            'anomalous': images.clone() if anomalous is None else anomalous,
            'gt_mask': torch.zeros(n, 1, 64, 64) if mask is None else mask,
            'seed': torch.arange(n)}


def test_identity_step_has_zero_losses(identity_model, images):
    optimizer = torch.optim.Adam(identity_model.trainable_parameters(), lr=1e-3)
    report = train_step(_batch(images), identity_model, optimizer)
    assert report.l_ngm == pytest.approx(0, abs=1e-5)
    assert report.l_aim == pytest.approx(0, abs=1e-5)


def test_train_step_updates_student_only(toy_model, images):
    optimizer = torch.optim.Adam(toy_model.trainable_parameters(), lr=1e-2)
    teacher_before = parameter_hash(toy_model.teacher)
    student_before = parameter_hash(toy_model.student)
    mask = torch.zeros(2, 1, 64, 64)
    mask[:, :, 16:32, 16:32] = 1
    anomalous = images.clone()
    anomalous[:, :, 16:32, 16:32] = 2.0
    report = train_step(_batch(images, anomalous, mask), toy_model, optimizer)
    assert report.total > 0
    assert parameter_hash(toy_model.teacher) == teacher_before
    assert parameter_hash(toy_model.student) != student_before


def test_non_finite_loss_reports_seeds(toy_model, images):
    optimizer = torch.optim.Adam(toy_model.trainable_parameters(), lr=1e-3)
    broken = images.clone()
    broken[0, 0, 0, 0] = float('nan')
    with pytest.raises(NonFiniteLossError, match=r'\[0, 1\]'):
        train_step(_batch(broken), toy_model, optimizer)


def test_seg_epoch_leaves_student_and_teacher_untouched(toy_config):
    dataset = build_training_set(toy_config)
    loader = make_loader(dataset, toy_config)
    model = build_model(toy_config)
    head = build_head(toy_config)
    before, head_before = parameter_hash(model), parameter_hash(head)
    optimizer = torch.optim.Adam(head.parameters(), lr=toy_config.head_lr)
    stats = train_seg_epoch(loader, model, head, optimizer, toy_config)
    assert stats['steps'] == 2
    assert stats['seg_loss'] > 0
    assert parameter_hash(model) == before
    assert parameter_hash(head) != head_before


def test_head_pass_without_mm_evaluates_but_does_not_step(toy_config):
    cfg = toy_config.replace(mm=False)
    dataset = build_training_set(cfg)
    model = build_model(cfg)
    head = build_head(cfg)
    head_before = parameter_hash(head)
    optimizer = torch.optim.Adam(head.parameters(), lr=cfg.head_lr)
    stats = train_seg_epoch(make_loader(dataset, cfg), model, head, optimizer, cfg)
    assert stats['steps'] == 2
    assert stats['seg_loss'] > 0
    assert parameter_hash(head) == head_before


def test_seg_step_projects_the_head(toy_config):
    dataset = build_training_set(toy_config)
    batch = next(iter(make_loader(dataset, toy_config)))
    model = build_model(toy_config).eval()
    head = build_head(toy_config)
    with torch.no_grad():
        head.spatial_attention.conv.weight.fill_(-1.0)
        head.compress.weight.fill_(-5.0)
    optimizer = torch.optim.Adam(head.parameters(), lr=toy_config.head_lr)
    seg_step(batch, model, head, optimizer, toy_config)
    assert (head.spatial_attention.conv.weight >= 0).all()
    assert (head.compress.weight >= -1).all()


def test_loader_order_is_seeded(toy_config):
    dataset = build_training_set(toy_config)
    first = [batch['seed'].tolist() for batch in make_loader(dataset, toy_config)]
    second = [batch['seed'].tolist() for batch in make_loader(dataset, toy_config)]
    assert first == second


def test_training_log_round_trip(tmp_path):
    log = TrainingLog(tmp_path / 'log' / TRAIN_LOG)
    assert log.read().empty
    for epoch in (1, 2):
        for step, total in enumerate((1.0, 3.0)):
            log.append({'epoch': epoch, 'step': step, 'l_ngm': total / 2,
                        'l_aim': total / 2, 'total': total * epoch})
    df = log.read()
    assert len(df) == 4
    means = log.epoch_means()
    assert means.loc[1, 'total'] == pytest.approx(2.0)
    assert means.loc[2, 'total'] == pytest.approx(4.0)
    log.reset()
    assert log.read().empty


def test_run_training_writes_artifacts(toy_config):
    seen = []
    last = run_training(toy_config, on_epoch_end=lambda epoch, stats: seen.append(epoch))
    run_dir = toy_config.run_dir
    assert last == run_dir / LAST
    assert (run_dir / BEST).is_file()
    assert seen == [1, 2]
    assert load_checkpoint(last, toy_config).epoch == 2
    df = TrainingLog(run_dir / TRAIN_LOG).read()
    assert sorted(df['epoch'].unique()) == [1, 2]
    assert len(df) == 4


def test_training_is_deterministic(toy_config):
    first = load_checkpoint(run_training(toy_config))
    second = load_checkpoint(run_training(toy_config))
    for key, value in first.student.items():
        assert torch.equal(second.student[key], value), key
    for key, value in first.head.items():
        assert torch.equal(second.head[key], value), key


@pytest.mark.parametrize('flag, value', [
    ('mm', False), ('pu', False), ('pmn_inner', False), ('pmn_outer', False), ('fas', False),
    ('msn', False), ('branches', 'normality'), ('branches', 'abnormality')])
def test_one_epoch_per_ablation_flag(toy_config, toy_root, flag, value):
    cfg = toy_config.replace(epochs=1, **{flag: value}).validate()
    model, head = restore(load_checkpoint(run_training(cfg), cfg), cfg)
    if flag == 'msn':
        assert isinstance(head, PlainSumFusion)
    report = evaluate(model, head, cfg, load_dataset(toy_root, TOY, 'test'))
    assert report.n_images == 10
    assert 0 <= report.pro <= 1


def test_same_seed_gives_the_same_report(toy_config, toy_root, tmp_path):
    index = load_dataset(toy_root, TOY, 'test')
    reports = []
    for run in ('a', 'b'):
        cfg = toy_config.replace(output_dir=str(tmp_path / run))
        model, head = restore(load_checkpoint(run_training(cfg), cfg), cfg)
        reports.append(evaluate(model, head, cfg, index).to_dict())
    assert reports[0] == reports[1]


def test_empty_training_split(tmp_path, toy_config):
    root = tmp_path / 'empty'
    make_toy_dataset(root, TOY, n_train=0, n_test_normal=1, n_test_defect=2)
    with pytest.raises(CorruptDatasetError):
        run_training(toy_config.replace(dataset_root=str(root)))


@pytest.mark.slow
def test_distillation_loss_decreases(toy_config):
    cfg = toy_config.replace(epochs=5)
    run_training(cfg)
    means = TrainingLog(cfg.run_dir / TRAIN_LOG).epoch_means()
    assert means.loc[5, 'total'] < means.loc[1, 'total']


@pytest.mark.slow
def test_smoke_experiment(tmp_path, toy_config):
    root = make_toy_dataset(tmp_path / 'full', TOY, seed=0).parent
    cfg = toy_config.replace(dataset_root=str(root), epochs=30, batch_size=8)
    bundle = load_checkpoint(run_training(cfg))
    model, head = restore(bundle, cfg)
    report = evaluate(model, head, cfg, load_dataset(root, TOY, 'test'))
    assert report.p_auc >= 0.9
    assert report.i_auc >= 0.9


@pytest.mark.slow
def test_pmn_does_not_hurt_pro(tmp_path, toy_config):
    root = make_toy_dataset(tmp_path / 'full', TOY, seed=0).parent
    index = load_dataset(root, TOY, 'test')

    def smoke_pro(seed, pmn):
        cfg = toy_config.replace(dataset_root=str(root), epochs=30, batch_size=8, seed=seed,
                                 pmn_inner=pmn, pmn_outer=pmn,
                                 output_dir=str(tmp_path / 'runs' / '{}-{}'.format(seed, pmn)))
        model, head = restore(load_checkpoint(run_training(cfg)), cfg)
        return evaluate(model, head, cfg, index).pro

    with_pmn = sum(smoke_pro(seed, True) for seed in range(3)) / 3
    without = sum(smoke_pro(seed, False) for seed in range(3)) / 3
    assert with_pmn >= without - 0.02
