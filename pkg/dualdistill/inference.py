import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import matplotlib
import numpy as np
from PIL import Image
from torch.utils.data import DataLoader
from tqdm import tqdm

from dualdistill.backbone import DecoupledStudentTeacher
from dualdistill.common import (IMAGE_SUFFIXES, NORMAL_DIR_NAMES, CorruptDatasetError,
                                DatasetNotFoundError, ImageIOError, PathLike)
from dualdistill.config import RunConfig
from dualdistill.dataset import DatasetIndex, EvalImageDataset, load_image
from dualdistill.metrics import MetricsReport, compute_report
from dualdistill.seg_head import FusionHead, predict
from dualdistill.worker import run_workers

logger = logging.getLogger(__name__)

MAP_SUFFIX = '.f32'
HEADER_DTYPE = np.dtype('<u4')
MAP_DTYPE = np.dtype('<f4')
RESULTS_FILE = 'scores.jsonl'
HEATMAP_CMAP = 'jet'


# region Artifacts

def write_float_map(data: np.ndarray, path: PathLike):
    '''Little-endian uint32 header {H, W} followed by H*W float32 values, row-major'''
    data = np.asarray(data, dtype=MAP_DTYPE)
    if data.ndim != 2:
        raise ImageIOError('Expected an H x W map, got shape {}'.format(data.shape))
    with open(path, 'wb') as fh:
        fh.write(np.array(data.shape, dtype=HEADER_DTYPE).tobytes())
        fh.write(np.ascontiguousarray(data).tobytes())


def read_float_map(path: PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = HEADER_DTYPE.itemsize * 2
    if len(raw) < header:
        raise ImageIOError('Truncated map file {}'.format(path))
    h, w = np.frombuffer(raw[:header], dtype=HEADER_DTYPE)
    values = np.frombuffer(raw[header:], dtype=MAP_DTYPE)
    if values.size != h * w:
        raise ImageIOError('Map file {} holds {} values, header says {}x{}'.format(
            path, values.size, h, w))
    return values.reshape(int(h), int(w)).copy()


def save_heatmap(data: np.ndarray, path: PathLike, cmap: str = HEATMAP_CMAP):
    '''8-bit RGB heatmap; a map reaching above 1 (plain-sum fusion) is scaled by its maximum'''
    if data.size and data.max() > 1:
        data = data / data.max()
    colored = matplotlib.colormaps[cmap](np.clip(data, 0, 1))
    Image.fromarray((colored[..., :3] * 255).round().astype(np.uint8)).save(path)

# endregion Artifacts


def evaluate(model: DecoupledStudentTeacher, head: FusionHead, cfg: RunConfig,
             index: DatasetIndex) -> MetricsReport:
    '''Image AUROC, pixel AUROC and PRO of a trained model over `index`'''
    if len(index) == 0:
        raise CorruptDatasetError('No {} images for `{}`'.format(index.split, index.category))
    dataset = EvalImageDataset(index, cfg.input_size, cfg.mean, cfg.std)
    loader = DataLoader(dataset, batch_size=cfg.batch_size, shuffle=False)
    model.eval()
    head.eval()
    scores, labels, maps, masks = [], [], [], []
    for batch in tqdm(loader, desc='eval {}'.format(index.category), leave=False, disable=None):
        batch_maps, batch_scores = predict(
            model, head, batch['image'].to(cfg.device), cfg.flags.pyramid_upsampling,
            cfg.top_k, cfg.score_extra_sigmoid)
        scores.extend(batch_scores.cpu().tolist())
        labels.extend(int(label) for label in batch['label'])
        maps.extend(batch_maps.cpu().numpy().astype(np.float64))
        masks.extend(batch['mask'][:, 0].numpy())
    report = compute_report(index.category, scores, labels, maps, masks,
                            cfg.fpr_limit, cfg.pro_max_thresholds, cfg.fingerprint())
    logger.info('`{}`: I-AUC {:.4f} P-AUC {:.4f} PRO {:.4f} over {} images'.format(
        report.category, report.i_auc, report.p_auc, report.pro, report.n_images))
    return report


def write_report(report: MetricsReport, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2))
    return path


def collect_inputs(target: PathLike) -> Tuple[List[Path], Optional[Path]]:
    '''Images to run on and the root that artifact names are relative to'''
    target = Path(target)
    if target.is_file():
        return [target], None
    if not target.is_dir():
        raise DatasetNotFoundError('No such image or directory: {}'.format(target))
    paths = sorted(p for p in target.rglob('*')
                   if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
                   and 'ground_truth' not in p.relative_to(target).parts)
    return paths, target


def artifact_name(path: Path, root: Optional[Path]) -> str:
    if root is None:
        return path.stem
    return '__'.join(path.relative_to(root).with_suffix('').parts)


def guess_label(path: Path) -> Optional[int]:
    '''0 / 1 for images inside a `test/<defect>/` directory, else None'''
    if path.parent.parent.name != 'test':
        return None
    return 0 if path.parent.name in NORMAL_DIR_NAMES else 1


def infer_paths(model: DecoupledStudentTeacher, head: FusionHead, cfg: RunConfig,
                paths: Sequence[Path], out_dir: PathLike, root: Optional[Path] = None
                ) -> Tuple[List[Dict[str, Any]], List[Tuple[Path, BaseException]]]:
    '''Writes a float map and a heatmap per image plus a JSON-lines score file.

        A failing image is logged and skipped; the failures are returned with
        the records of the images that succeeded.
    '''
    out_dir = Path(out_dir)
    (out_dir / 'maps').mkdir(parents=True, exist_ok=True)
    (out_dir / 'heatmaps').mkdir(parents=True, exist_ok=True)
    model.eval()
    head.eval()

    def _run(path: Path) -> Dict[str, Any]:
        image = load_image(path, cfg.input_size, cfg.mean, cfg.std)
        maps, scores = predict(model, head, image[None].to(cfg.device),
                               cfg.flags.pyramid_upsampling, cfg.top_k,
                               cfg.score_extra_sigmoid)
        data = maps[0].cpu().numpy()
        name = artifact_name(path, root)
        write_float_map(data, out_dir / 'maps' / (name + MAP_SUFFIX))
        save_heatmap(data, out_dir / 'heatmaps' / (name + '.png'))
        record = {'path': str(path), 'score': float(scores[0])}
        label = guess_label(path)
        if label is not None:
            record['label'] = label
        return record

    results, errors = run_workers(_run, list(paths), cfg.num_workers)
    failures = []
    for position, exc_info in errors:
        logger.warning('Inference failed for {}: {}'.format(paths[position], exc_info[1]))
        failures.append((paths[position], exc_info[1]))
    records = [r for r in results if r is not None]
    with open(out_dir / RESULTS_FILE, 'w') as fh:
        for record in records:
            fh.write(json.dumps(record) + '\n')
    logger.info('Wrote {} anomaly maps to {} ({} failed)'.format(
        len(records), out_dir, len(failures)))
    return records, failures
