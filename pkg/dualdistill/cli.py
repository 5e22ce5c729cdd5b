'''Command-line entry points.

    python -m dualdistill make-toy-dataset --dataset-root data
    python -m dualdistill train --config smoke.toml --category toy_shapes
    python -m dualdistill eval --category toy_shapes
    python -m dualdistill infer data/toy_shapes/test --out runs/toy_shapes/infer
    python -m dualdistill synth -n 8
'''
import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

from dualdistill.checkpoint import BEST, LAST, load_checkpoint, restore
from dualdistill.common import (EXIT_DATA, EXIT_OK, EXIT_RUNTIME, ConfigError,
                                DatasetNotFoundError, DualDistillError, destandardize)
from dualdistill.config import RunConfig, load_config, parse_override
from dualdistill.dataset import list_categories, load_dataset
from dualdistill.inference import collect_inputs, evaluate, infer_paths, write_report
from dualdistill.metrics import format_summary, summarize_reports
from dualdistill.synthesis import preview_strip
from dualdistill.toy import make_toy_dataset
from dualdistill.trainer import build_training_set, run_training

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'
REPORT_FILE = 'report.json'
SUMMARY_FILE = 'summary.csv'

# CLI flag -> config key
_FLAG_KEYS = {
    'dataset_root': 'dataset_root',
    'category': 'category',
    'output_dir': 'output_dir',
    'backbone': 'backbone',
    'epochs': 'epochs',
    'seed': 'seed',
    'device': 'device',
    'num_workers': 'num_workers',
}


class _Parser(argparse.ArgumentParser):

    def error(self, message):
        raise ConfigError(message)


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument('--config', type=Path, help='flat TOML config file')
    parser.add_argument('--set', dest='overrides', action='append', default=[],
                        metavar='KEY=VALUE', help='config override, repeatable')
    parser.add_argument('--dataset-root')
    parser.add_argument('--category')
    parser.add_argument('--output-dir')
    parser.add_argument('--backbone', choices=['wideresnet50', 'toy'])
    parser.add_argument('--epochs', type=int)
    parser.add_argument('--seed', type=int)
    parser.add_argument('--device')
    parser.add_argument('--num-workers', type=int)
    parser.add_argument('-v', '--verbose', action='store_true')


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='dualdistill', description=__doc__.split('\n')[0])
    commands = parser.add_subparsers(dest='command', parser_class=_Parser)
    commands.required = True

    train = commands.add_parser('train', help='train one category (or all)')
    _add_common(train)
    train.add_argument('--all-categories', action='store_true')

    evaluate_cmd = commands.add_parser('eval', help='I-AUC, P-AUC and PRO of a checkpoint')
    _add_common(evaluate_cmd)
    evaluate_cmd.add_argument('--checkpoint', type=Path,
                              help='default: <output_dir>/<category>/best.pt')
    evaluate_cmd.add_argument('--split', default='test', choices=['train', 'test'])
    evaluate_cmd.add_argument('--report', type=Path, help='JSON report path')
    evaluate_cmd.add_argument('--force', action='store_true',
                              help='accept a checkpoint trained with another config')
    evaluate_cmd.add_argument('--all-categories', action='store_true')

    infer = commands.add_parser('infer', help='anomaly maps, heatmaps and scores')
    _add_common(infer)
    infer.add_argument('input', type=Path, help='image file or directory')
    infer.add_argument('--checkpoint', type=Path)
    infer.add_argument('--out', type=Path, help='default: <output_dir>/<category>/infer')
    infer.add_argument('--force', action='store_true')
    infer.add_argument('--score-extra-sigmoid', action='store_true')

    synth = commands.add_parser('synth', help='write normal | anomalous | mask previews')
    _add_common(synth)
    synth.add_argument('-n', type=int, default=8)
    synth.add_argument('--out', type=Path, help='default: <output_dir>/<category>/synth')

    toy = commands.add_parser('make-toy-dataset', help='write the seeded toy category')
    _add_common(toy)
    toy.add_argument('--size', type=int, default=64)
    toy.add_argument('--n-train', type=int, default=40)
    toy.add_argument('--n-test-normal', type=int, default=10)
    toy.add_argument('--n-test-defect', type=int, default=20)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    '''Config file, then dedicated flags, then `--set` overrides'''
    overrides: Dict[str, Any] = {}
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, 'score_extra_sigmoid', False):
        overrides['score_extra_sigmoid'] = True
    for text in args.overrides:
        overrides.update(parse_override(text))
    return load_config(args.config, overrides)


def _categories(cfg: RunConfig, all_categories: bool) -> List[str]:
    if not all_categories:
        return [cfg.category]
    categories = list_categories(cfg.dataset_root)
    if not categories:
        raise DatasetNotFoundError('No categories under {}'.format(cfg.dataset_root))
    return categories


def _checkpoint_path(cfg: RunConfig, explicit: Optional[Path]) -> Path:
    if explicit is not None:
        return explicit
    best = cfg.run_dir / BEST
    return best if best.is_file() else cfg.run_dir / LAST


def _runtime_config(trained: RunConfig, cfg: RunConfig) -> RunConfig:
    '''Trained model settings with the paths and runtime settings of `cfg`'''
    return trained.replace(
        dataset_root=cfg.dataset_root, output_dir=cfg.output_dir, category=cfg.category,
        num_workers=cfg.num_workers, device=cfg.device,
        score_extra_sigmoid=cfg.score_extra_sigmoid)


def cmd_train(cfg: RunConfig, all_categories: bool = False) -> List[Path]:
    categories = _categories(cfg, all_categories)
    for category in categories:
        load_dataset(cfg.dataset_root, category, 'train')
    return [run_training(cfg, category) for category in categories]


def cmd_eval(cfg: RunConfig, checkpoint: Optional[Path] = None, split: str = 'test',
             report_path: Optional[Path] = None, force: bool = False,
             all_categories: bool = False):
    reports = []
    for category in _categories(cfg, all_categories):
        category_cfg = cfg.replace(category=category)
        index = load_dataset(category_cfg.dataset_root, category, split)
        bundle = load_checkpoint(_checkpoint_path(category_cfg, checkpoint), category_cfg, force)
        run_cfg = _runtime_config(bundle.run_config(), category_cfg)
        model, head = restore(bundle, run_cfg, run_cfg.device)
        report = evaluate(model, head, run_cfg, index)
        write_report(report, report_path if report_path and not all_categories
                     else category_cfg.run_dir / REPORT_FILE)
        reports.append(report)
    summary = summarize_reports(reports)
    if all_categories:
        Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
        summary.to_csv(Path(cfg.output_dir) / SUMMARY_FILE)
    return reports, summary


def cmd_infer(cfg: RunConfig, target: Path, checkpoint: Optional[Path] = None,
              out_dir: Optional[Path] = None, force: bool = False):
    paths, root = collect_inputs(target)
    bundle = load_checkpoint(_checkpoint_path(cfg, checkpoint), cfg, force)
    run_cfg = _runtime_config(bundle.run_config(), cfg)
    model, head = restore(bundle, run_cfg, run_cfg.device)
    return infer_paths(model, head, run_cfg, paths, out_dir or cfg.run_dir / 'infer', root)


def cmd_synth(cfg: RunConfig, n: int, out_dir: Optional[Path] = None) -> List[Path]:
    dataset = build_training_set(cfg)
    if n <= 0:
        return []
    out_dir = out_dir or cfg.run_dir / 'synth'
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i in range(n):
        dataset.set_epoch(i // len(dataset))
        item = dataset[i % len(dataset)]
        strip = preview_strip(destandardize(item['normal'], cfg.mean, cfg.std),
                              destandardize(item['anomalous'], cfg.mean, cfg.std),
                              item['gt_mask'][0].numpy())
        path = out_dir / '{:04d}.png'.format(i)
        Image.fromarray(np.round(strip * 255).astype(np.uint8)).save(path)
        written.append(path)
    logger.info('Wrote {} synthesis previews to {}'.format(len(written), out_dir))
    return written


def _configure_logging(verbose: bool):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _configure_logging(args.verbose)
        if args.command == 'make-toy-dataset':
            cfg = config_from_args(args)
            make_toy_dataset(cfg.dataset_root, cfg.category, args.size, args.n_train,
                             args.n_test_normal, args.n_test_defect, cfg.seed)
            return EXIT_OK

        cfg = config_from_args(args)
        if args.command == 'train':
            for path in cmd_train(cfg, args.all_categories):
                print(path)
        elif args.command == 'eval':
            _, summary = cmd_eval(cfg, args.checkpoint, args.split, args.report,
                                  args.force, args.all_categories)
            print(format_summary(summary))
        elif args.command == 'infer':
            _, failures = cmd_infer(cfg, args.input, args.checkpoint, args.out, args.force)
            if failures:
                logger.error('{} image(s) failed'.format(len(failures)))
                return EXIT_DATA
        elif args.command == 'synth':
            cmd_synth(cfg, args.n, args.out)
        return EXIT_OK
    except DualDistillError as exc:
        logger.error('{}: {}'.format(type(exc).__name__, exc))
        return exc.exit_code
    except Exception:
        logger.error('Unexpected error', exc_info=True)
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())
