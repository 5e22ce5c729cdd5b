import json

from conftest import TOY

from dualdistill.cli import main
from dualdistill.common import EXIT_DATA, EXIT_OK, EXIT_USAGE
from dualdistill.config import DATA_ROOT_ENV
from dualdistill.inference import RESULTS_FILE


def _common(root, out, *extra):
    return ['--dataset-root', str(root), '--output-dir', str(out), '--category', TOY,
            '--backbone', 'toy', '--set', 'input_size=64', '--set', 'top_k=10',
            '--set', 'batch_size=4', *extra]


def test_missing_command_is_usage_error():
    assert main([]) == EXIT_USAGE


def test_unknown_flag_is_usage_error():
    assert main(['train', '--no-such-flag']) == EXIT_USAGE


def test_bad_override_fails_before_side_effects(tmp_path):
    out = tmp_path / 'runs'
    code = main(['train', '--dataset-root', str(tmp_path), '--output-dir', str(out),
                 '--set', 'epochs=0'])
    assert code == EXIT_USAGE
    assert not out.exists()


def test_missing_dataset_is_data_error(tmp_path):
    code = main(['train', *_common(tmp_path / 'nowhere', tmp_path / 'runs')])
    assert code == EXIT_DATA
    assert not (tmp_path / 'runs').exists()


def test_make_toy_dataset_uses_env_root(tmp_path, monkeypatch):
    monkeypatch.setenv(DATA_ROOT_ENV, str(tmp_path / 'env'))
    assert main(['make-toy-dataset', '--n-train', '2', '--n-test-normal', '1',
                 '--n-test-defect', '2']) == EXIT_OK
    assert len(list((tmp_path / 'env' / TOY / 'train' / 'good').glob('*.png'))) == 2


def test_synth_writes_previews(toy_root, tmp_path):
    out = tmp_path / 'synth'
    assert main(['synth', *_common(toy_root, tmp_path / 'runs'), '-n', '3',
                 '--out', str(out)]) == EXIT_OK
    assert sorted(p.name for p in out.iterdir()) == ['0000.png', '0001.png', '0002.png']


def test_synth_zero_writes_nothing(toy_root, tmp_path):
    out = tmp_path / 'synth'
    assert main(['synth', *_common(toy_root, tmp_path / 'runs'), '-n', '0',
                 '--out', str(out)]) == EXIT_OK
    assert not out.exists()


def test_eval_without_checkpoint_is_data_error(toy_root, tmp_path):
    assert main(['eval', *_common(toy_root, tmp_path / 'runs')]) == EXIT_DATA


def test_train_eval_infer(toy_root, tmp_path, capsys):
    runs = tmp_path / 'runs'
    common = _common(toy_root, runs, '--epochs', '1')
    assert main(['train', *common]) == EXIT_OK
    assert (runs / TOY / 'last.pt').is_file()

    assert main(['eval', *common]) == EXIT_OK
    report = json.loads((runs / TOY / 'report.json').read_text())
    assert report['category'] == TOY
    assert report['n_images'] == 10
    assert TOY in capsys.readouterr().out

    # a different training config is refused unless forced
    assert main(['eval', *common, '--set', 'lr=0.1']) == EXIT_USAGE
    assert main(['eval', *common, '--set', 'lr=0.1', '--force']) == EXIT_OK

    out = tmp_path / 'infer'
    assert main(['infer', str(toy_root / TOY / 'test'), *common, '--out', str(out)]) == EXIT_OK
    assert len((out / RESULTS_FILE).read_text().splitlines()) == 10

    (tmp_path / 'bad.png').write_bytes(b'junk')
    assert main(['infer', str(tmp_path / 'bad.png'), *common,
                 '--out', str(tmp_path / 'bad')]) == EXIT_DATA
