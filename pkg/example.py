"""Example for how to use the `dualdistill` package."""

import logging
import sys
import tempfile
from pathlib import Path

from dualdistill import (RunConfig, TOY_CATEGORY, TrainingLog, TRAIN_LOG, evaluate,
                         format_summary, load_checkpoint, load_dataset, make_toy_dataset,
                         restore, run_training, summarize_reports)


def make_config(workdir: Path) -> RunConfig:
    """Desk-scale settings: toy backbone on 64 px images."""
    return RunConfig(backbone='toy', input_size=64, epochs=5, batch_size=8, top_k=10,
                     dataset_root=str(workdir / 'data'), category=TOY_CATEGORY,
                     output_dir=str(workdir / 'runs')).validate()


def print_epoch(epoch, stats):
    print('epoch {:>3}  distill {:.4f}  head {:.4f}'.format(
        epoch, stats['distill_loss'], stats['seg_loss']))


def main():
    """Entry point for this script."""
    logging.basicConfig(level=logging.WARNING)
    with tempfile.TemporaryDirectory() as tmp:
        workdir = Path(tmp)
        cfg = make_config(workdir)
        make_toy_dataset(cfg.dataset_root, cfg.category, size=cfg.input_size, seed=cfg.seed)

        checkpoint = run_training(cfg, on_epoch_end=print_epoch)
        print(TrainingLog(cfg.run_dir / TRAIN_LOG).epoch_means())

        model, head = restore(load_checkpoint(checkpoint, cfg), cfg)
        report = evaluate(model, head, cfg, load_dataset(cfg.dataset_root, cfg.category, 'test'))
        print(format_summary(summarize_reports([report])))
    return 0


if __name__ == '__main__':
    sys.exit(main())
