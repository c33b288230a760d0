'''Segmentation and classification metrics, evaluation and ablations.

Overlap conventions: when prediction and ground truth are both empty
every overlap metric is 1.0; when exactly one is empty the undefined
ratio is 0.0.  HD95 is None whenever either mask is empty.
'''
from concurrent.futures import ProcessPoolExecutor
import csv
from dataclasses import asdict, dataclass, field
import itertools
import json
import logging
import os

import numpy as np
from scipy import ndimage

from .base import DimensionError, ParameterError
from .config import RunConfig
from .hilbert_codec import SCHEMES
from .importer import atomic_write
from .net import HilbertMambaSegmenter
from .prompt_fusion import DiagnosisLabel, PromptClassifier, classify
from .synth import synth_dataset
from .training import fit_classifier, fit_segmenter, predict_mask


logger = logging.getLogger(__name__)

SEG_SCHEMA = 'hvlm.segmetrics/1'
ABLATION_SCHEMA = 'hvlm.ablation/1'


def _binary(mask):
    data = np.asarray(getattr(mask, 'data', mask))
    if data.ndim == 4 and data.shape[0] == 1:
        data = data[0]
    return data != 0


def _counts(pred, gt):
    p, g = _binary(pred), _binary(gt)
    if p.shape != g.shape:
        raise DimensionError('mask shapes differ: {0} vs {1}'.format(
            p.shape, g.shape))
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return tp, fp, fn


def _ratio(num, den, empty):
    return num / den if den else empty


def dice(pred, gt):
    tp, fp, fn = _counts(pred, gt)
    return _ratio(2.0 * tp, 2 * tp + fp + fn, 1.0)


def iou(pred, gt):
    tp, fp, fn = _counts(pred, gt)
    return _ratio(float(tp), tp + fp + fn, 1.0)


def precision(pred, gt):
    tp, fp, fn = _counts(pred, gt)
    return _ratio(float(tp), tp + fp, 1.0 if fn == 0 else 0.0)


def sensitivity(pred, gt):
    tp, fp, fn = _counts(pred, gt)
    return _ratio(float(tp), tp + fn, 1.0 if fp == 0 else 0.0)


def surface(mask):
    '''On-voxels with at least one face neighbour off (or off-grid)'''
    structure = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure, border_value=0)


def surface_distances(a, b, spacing):
    '''Distance from each surface voxel of a to the surface of b'''
    dt = ndimage.distance_transform_edt(~surface(b), sampling=spacing)
    return dt[surface(a)]


def hd95(pred, gt, spacing=(1.0, 1.0, 1.0)):
    p, g = _binary(pred), _binary(gt)
    if p.shape != g.shape:
        raise DimensionError('mask shapes differ: {0} vs {1}'.format(
            p.shape, g.shape))
    if not p.any() or not g.any():
        return None
    spacing = tuple(float(s) for s in spacing)
    distances = np.concatenate([surface_distances(p, g, spacing),
                                surface_distances(g, p, spacing)])
    return float(np.percentile(distances, 95))


@dataclass
class SegMetrics(object):
    dice: float
    iou: float
    precision: float
    sensitivity: float
    hd95: float = None

    FIELDS = ('dice', 'iou', 'precision', 'sensitivity', 'hd95')

    def to_dict(self):
        return asdict(self)


def segmentation_metrics(pred, gt, spacing=None):
    if spacing is None:
        spacing = getattr(gt, 'spacing', (1.0, 1.0, 1.0))
    return SegMetrics(
        dice=dice(pred, gt), iou=iou(pred, gt),
        precision=precision(pred, gt), sensitivity=sensitivity(pred, gt),
        hd95=hd95(pred, gt, spacing))


def mean_seg_metrics(metrics):
    if not metrics:
        raise ParameterError('no metrics to average')
    defined = [m.hd95 for m in metrics if m.hd95 is not None]
    return SegMetrics(
        dice=float(np.mean([m.dice for m in metrics])),
        iou=float(np.mean([m.iou for m in metrics])),
        precision=float(np.mean([m.precision for m in metrics])),
        sensitivity=float(np.mean([m.sensitivity for m in metrics])),
        hd95=float(np.mean(defined)) if defined else None)


@dataclass
class ClsMetrics(object):
    acc: float
    recall: float
    precision: float
    f1: float

    def to_dict(self):
        return asdict(self)


def confusion_matrix(y_true, y_pred, n_classes=len(DiagnosisLabel)):
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise DimensionError('{0} labels vs {1} predictions'.format(
            y_true.size, y_pred.size))
    return np.bincount(n_classes * y_true + y_pred,
                       minlength=n_classes ** 2).reshape(n_classes, n_classes)


def classification_metrics(y_true, y_pred, n_classes=len(DiagnosisLabel)):
    '''Accuracy plus macro precision and recall over the classes that
    occur in either labels or predictions; F1 from the macro pair'''
    cm = confusion_matrix(y_true, y_pred, n_classes)
    total = cm.sum()
    if total == 0:
        raise ParameterError('no predictions to score')
    tp = np.diag(cm).astype(np.float64)
    predicted, actual = cm.sum(axis=0), cm.sum(axis=1)
    present = (predicted + actual) > 0
    prec = np.divide(tp, predicted, out=np.zeros_like(tp),
                     where=predicted > 0)[present].mean()
    rec = np.divide(tp, actual, out=np.zeros_like(tp),
                    where=actual > 0)[present].mean()
    f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return ClsMetrics(acc=float(tp.sum() / total), recall=float(rec),
                      precision=float(prec), f1=float(f1))


def evaluate_segmenter(model, samples):
    '''[(sample id, SegMetrics)] for predicted vs ground-truth masks'''
    rows = []
    for sample in samples:
        gt = sample.mask
        rows.append((sample.id, segmentation_metrics(
            predict_mask(model, sample.volume), gt, gt.spacing)))
    return rows


def evaluate_classifier(model, samples, seg_model=None):
    '''Classify with ground-truth masks, or masks from ``seg_model``'''
    y_true, y_pred, predictions = [], [], []
    for sample in samples:
        volume = sample.volume
        mask = predict_mask(seg_model, volume) if seg_model is not None \
            else sample.mask
        label, probabilities = classify(volume, mask, model)
        y_true.append(DiagnosisLabel(sample.label).index)
        y_pred.append(label.index)
        predictions.append({
            'id': sample.id, 'label': sample.label,
            'predicted': label.value,
            'probabilities': [float(p) for p in probabilities]})
    return classification_metrics(y_true, y_pred), predictions


def _fmt(value):
    if value is None:
        return ''
    if isinstance(value, float):
        return repr(value)
    return value


def write_seg_metrics_csv(rows, f):
    '''One row per volume plus a mean row; the first column tags the schema'''
    writer = csv.writer(f, lineterminator='\n')
    writer.writerow(('schema', 'id') + SegMetrics.FIELDS)
    metrics = []
    for sample_id, m in rows:
        metrics.append(m)
        writer.writerow([SEG_SCHEMA, sample_id] +
                        [_fmt(getattr(m, k)) for k in SegMetrics.FIELDS])
    mean = mean_seg_metrics(metrics)
    writer.writerow([SEG_SCHEMA, 'mean'] +
                    [_fmt(getattr(mean, k)) for k in SegMetrics.FIELDS])


@dataclass(frozen=True)
class AblationRun(object):
    index: int
    scan_order: str
    memory: bool
    lam: float
    use_prompt: bool
    seed: int


@dataclass
class AblationConfig(object):
    scan_orders: tuple = SCHEMES
    memory: tuple = (True, False)
    lams: tuple = (0.0, 0.5)
    use_prompt: tuple = (True,)
    seeds: tuple = (0, 1, 2)
    data_seed: int = 7
    base: dict = field(default_factory=dict)

    KEYS = ('scan_orders', 'memory', 'lams', 'use_prompt', 'seeds',
            'data_seed', 'base')

    def __post_init__(self):
        bad = [s for s in self.scan_orders if s not in SCHEMES]
        if bad:
            raise ParameterError('unknown scan orders {0}'.format(bad))
        if not all((self.scan_orders, self.memory, self.lams,
                    self.use_prompt, self.seeds)):
            raise ParameterError('every ablation axis needs at least one '
                                 'value')

    @classmethod
    def from_dict(cls, data):
        unknown = sorted(set(data) - set(cls.KEYS))
        if unknown:
            raise ParameterError('unknown ablation keys: {0}'.format(
                ', '.join(unknown)))
        data = dict(data)
        for key in cls.KEYS[:5]:
            if key in data:
                value = data[key]
                data[key] = tuple(value if isinstance(value, list)
                                  else [value])
        return cls(**data)

    def runs(self):
        product = itertools.product(self.scan_orders, self.memory, self.lams,
                                    self.use_prompt, self.seeds)
        return [AblationRun(i, s, bool(m), float(lam), bool(p), int(seed))
                for i, (s, m, lam, p, seed) in enumerate(product)]


ABLATION_FIELDS = (
    'schema', 'index', 'scan_order', 'memory', 'lam', 'use_prompt', 'seed',
    'dice', 'iou', 'precision', 'sensitivity', 'hd95',
    'acc', 'recall', 'cls_precision', 'f1', 'error')


def run_single(run, base):
    '''Train and evaluate one configuration; failures land in ``error``'''
    row = dict((k, None) for k in ABLATION_FIELDS)
    row.update(schema=ABLATION_SCHEMA, index=run.index,
               scan_order=run.scan_order, memory=run.memory, lam=run.lam,
               use_prompt=run.use_prompt, seed=run.seed)
    try:
        cfg = RunConfig.from_dict(dict(
            base['config'], seed=run.seed, hilbert_variant=run.scan_order,
            memory=run.memory, lam=run.lam, use_prompt=run.use_prompt))
        data = synth_dataset(cfg.synth_spec(), base['data_seed'])
        samples = list(data.samples)
        train, test = samples[:cfg.n_train], samples[cfg.n_train:]
        seg = HilbertMambaSegmenter(cfg.seg_model_config())
        fit_segmenter(seg, train, cfg.steps, cfg.lr, cfg.batch_size,
                      seed=cfg.seed, optimizer=cfg.optimizer)
        seg_rows = evaluate_segmenter(seg, test)
        row.update(mean_seg_metrics([m for _, m in seg_rows]).to_dict())
        cls = PromptClassifier(cfg.classifier_config())
        fit_classifier(cls, train, cfg.cls_steps, cfg.cls_lr,
                       cfg.cls_batch_size, cfg.lam, cfg.tau, seed=cfg.seed,
                       optimizer=cfg.optimizer)
        metrics, _ = evaluate_classifier(cls, test, seg_model=seg)
        row.update(acc=metrics.acc, recall=metrics.recall,
                   cls_precision=metrics.precision, f1=metrics.f1)
    except Exception as e:
        logger.warning('run %d failed: %s', run.index, e)
        row['error'] = '{0}: {1}'.format(type(e).__name__, e)
    return row


def _run_and_store(args):
    run, base, workdir = args
    row = run_single(run, base)
    if workdir is not None:
        name = os.path.join(workdir, 'run_{0:04d}.json'.format(run.index))
        with atomic_write(name, binary=False) as f:
            json.dump(row, f, sort_keys=True)
    return row


def run_ablation(config, jobs=1, workdir=None):
    '''Rows in run order; with ``jobs > 1`` runs go to worker processes'''
    base = {'config': RunConfig.from_dict(config.base).to_dict(),
            'data_seed': config.data_seed}
    base['config'].pop('seed')
    if workdir is not None and not os.path.isdir(workdir):
        os.makedirs(workdir)
    runs = config.runs()
    logger.info('ablation: %d runs on %d worker(s)', len(runs), jobs)
    tasks = [(run, base, workdir) for run in runs]
    if jobs <= 1:
        rows = [_run_and_store(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_and_store, tasks))
    return sorted(rows, key=lambda r: r['index'])


def write_ablation_csv(rows, f):
    writer = csv.writer(f, lineterminator='\n')
    writer.writerow(ABLATION_FIELDS)
    for row in rows:
        writer.writerow([_fmt(row.get(k)) for k in ABLATION_FIELDS])
