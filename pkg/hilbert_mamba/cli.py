'''The ``hilbert-mamba`` command.

Data goes to stdout (JSON or CSV) or to ``--out``; logs go to stderr.
Bad flags exit 2; runtime failures exit 1 after printing one JSON line
``{"error": ..., "message": ...}`` to stderr.
'''
import argparse
import csv
import io
import json
import logging
import sys

import requests
import yaml

from . import __version__
from .base import HilbertMambaError
from .config import RunConfig, load_model, load_run_config, write_sidecar
from .evalkit import (
    AblationConfig, evaluate_classifier, evaluate_segmenter, run_ablation,
    write_ablation_csv, write_seg_metrics_csv)
from .gradcheck import TARGETS, run_suite
from .hilbert_codec import SCHEMES, build_scan_map, locality_report
from .importer import (
    Dataset, MaskVolume, Volume, atomic_write, save_checkpoint)
from .net import HilbertMambaSegmenter
from .prompt_fusion import (
    DiagnosisLabel, PromptClassifier, classify, extract_attributes,
    render_sentence)
from .synth import SynthSpec, class_counts, synth_dataset
from .training import fit_classifier, fit_segmenter, predict_mask


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1


def _is_url(path):
    return path.startswith(('http://', 'https://'))


def read_volume(path, cls=Volume):
    return cls.from_url(path) if _is_url(path) else cls.from_filename(path)


def read_dataset(path):
    return Dataset.from_url(path) if _is_url(path) else \
        Dataset.from_filename(path)


def _int_list(text):
    try:
        return [int(v) for v in text.split(',')]
    except ValueError:
        raise argparse.ArgumentTypeError(
            'expected comma-separated integers, got {0!r}'.format(text))


def _float_list(text):
    try:
        return [float(v) for v in text.split(',')]
    except ValueError:
        raise argparse.ArgumentTypeError(
            'expected comma-separated numbers, got {0!r}'.format(text))


def emit_text(text, out=None):
    if out is None:
        sys.stdout.write(text)
    else:
        with atomic_write(out, binary=False) as f:
            f.write(text)


def emit_json(data, out=None):
    emit_text(json.dumps(data, sort_keys=True) + '\n', out)


def _run_config(args):
    overrides = dict((k, getattr(args, k, None)) for k in RunConfig.keys())
    return load_run_config(getattr(args, 'config', None), **overrides)


def _split(dataset, split, n_train):
    samples = list(dataset.samples)
    if split == 'train':
        return samples[:n_train]
    if split == 'test':
        return samples[n_train:]
    return samples


def cmd_hilbert_map(args):
    scan_map = build_scan_map(args.scheme, args.dims, args.order)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(['index'] + list('xyz'[:args.dims]))
    for i, coord in enumerate(scan_map.index_to_coord):
        writer.writerow([i] + coord.tolist())
    emit_text(buf.getvalue(), args.out)


def cmd_hilbert_locality(args):
    emit_json(locality_report(args.scheme, args.grid).to_dict(), args.out)


def cmd_synth(args):
    cfg = _run_config(args)
    spec = SynthSpec(n=args.n if args.n is not None else
                     cfg.n_train + cfg.n_test, extent=cfg.extent)
    dataset = synth_dataset(spec, cfg.seed)
    dataset.write(args.out)
    emit_json({'out': args.out, 'samples': spec.n, 'seed': cfg.seed,
               'counts': dict((label.value, n) for label, n in
                              class_counts(spec).items())})


def cmd_train_seg(args):
    cfg = _run_config(args)
    samples = _split(read_dataset(args.data), args.split, cfg.n_train)
    model = HilbertMambaSegmenter(cfg.seg_model_config())
    logger.info('segmenter: %d parameters, %d samples',
                model.parameter_count(), len(samples))
    losses = fit_segmenter(model, samples, cfg.steps, cfg.lr, cfg.batch_size,
                           seed=cfg.seed, optimizer=cfg.optimizer)
    save_checkpoint(model, args.ckpt)
    write_sidecar(args.ckpt, model)
    emit_json({'checkpoint': args.ckpt, 'steps': len(losses),
               'final_loss': losses[-1] if losses else None})


def cmd_eval_seg(args):
    cfg = _run_config(args)
    samples = _split(read_dataset(args.data), args.split, cfg.n_train)
    model = load_model(args.ckpt, 'segmenter')
    buf = io.StringIO()
    write_seg_metrics_csv(evaluate_segmenter(model, samples), buf)
    emit_text(buf.getvalue(), args.out)


def cmd_train_cls(args):
    cfg = _run_config(args)
    samples = _split(read_dataset(args.data), args.split, cfg.n_train)
    model = PromptClassifier(cfg.classifier_config())
    losses = fit_classifier(model, samples, cfg.cls_steps, cfg.cls_lr,
                            cfg.cls_batch_size, cfg.lam, cfg.tau,
                            seed=cfg.seed, optimizer=cfg.optimizer)
    save_checkpoint(model, args.ckpt)
    write_sidecar(args.ckpt, model)
    emit_json({'checkpoint': args.ckpt, 'steps': len(losses),
               'final_loss': losses[-1] if losses else None})


def cmd_eval_cls(args):
    cfg = _run_config(args)
    samples = _split(read_dataset(args.data), args.split, cfg.n_train)
    model = load_model(args.ckpt, 'classifier')
    seg = load_model(args.seg_ckpt, 'segmenter') if args.seg_ckpt else None
    metrics, predictions = evaluate_classifier(model, samples, seg)
    emit_json({'metrics': metrics.to_dict(), 'predictions': predictions},
              args.out)


def cmd_segment(args):
    model = load_model(args.ckpt, 'segmenter')
    mask = predict_mask(model, read_volume(args.volume), args.threshold)
    mask.to_filename(args.out)
    emit_json({'out': args.out, 'voxels': mask.voxel_count})


def cmd_prompt(args):
    mask = read_volume(args.mask, MaskVolume)
    attrs = extract_attributes(mask, args.spacing)
    emit_json({'attributes': attrs.to_dict(),
               'sentence': render_sentence(attrs)})


def cmd_classify(args):
    model = load_model(args.ckpt, 'classifier')
    volume = read_volume(args.volume)
    mask = read_volume(args.mask, MaskVolume)
    label, probabilities = classify(volume, mask, model)
    emit_json({'label': label.value, 'probabilities': dict(
        (c.value, float(p)) for c, p in zip(DiagnosisLabel, probabilities))})


def cmd_ablate(args):
    data = {}
    if args.matrix:
        with open(args.matrix) as f:
            data = yaml.safe_load(f) or {}
    config = AblationConfig.from_dict(data)
    if args.config:
        config.base = dict(RunConfig.from_filename(args.config).to_dict(),
                           **config.base)
    jobs = args.jobs or RunConfig.from_dict(config.base).jobs
    rows = run_ablation(config, jobs=jobs, workdir=args.workdir)
    buf = io.StringIO()
    write_ablation_csv(rows, buf)
    emit_text(buf.getvalue(), args.out)


def cmd_gradcheck(args):
    results = run_suite(args.target, seeds=range(args.seeds))
    for result in results:
        emit_json(result.to_dict())
    failed = [r for r in results if not r.passed]
    if failed:
        logger.warning('%d of %d checks above threshold', len(failed),
                       len(results))
        return EXIT_FAILURE
    logger.info('all %d checks passed', len(results))
    return EXIT_OK


def _common():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='YAML run configuration')
    common.add_argument('--seed', type=int, help='overrides config and '
                        'HVLM_SEED')
    common.add_argument('--jobs', type=int, help='worker processes')
    noise = common.add_mutually_exclusive_group()
    noise.add_argument('-v', '--verbose', action='store_true')
    noise.add_argument('-q', '--quiet', action='store_true')
    return common


def _model_flags(p):
    p.add_argument('--steps', type=int)
    p.add_argument('--lr', type=float)
    p.add_argument('--batch-size', dest='batch_size', type=int)
    p.add_argument('--optimizer', choices=('adam', 'sgd'))
    p.add_argument('--channels', type=int)
    p.add_argument('--d-state', dest='d_state', type=int)
    p.add_argument('--scan-order', dest='hilbert_variant', choices=SCHEMES)
    p.add_argument('--no-memory', dest='memory', action='store_false',
                   default=None)
    p.add_argument('--memory-depth', dest='memory_depth', type=int)
    p.add_argument('--gate-kernel', dest='gate_kernel', type=int,
                   choices=(1, 3))
    p.add_argument('--chunk', type=int)
    p.add_argument('--bidirectional', action='store_true', default=None)
    p.add_argument('--hmca-interaction', dest='hmca_interaction',
                   choices=('attention', 'mamba'))


def _cls_flags(p):
    p.add_argument('--steps', dest='cls_steps', type=int)
    p.add_argument('--lr', dest='cls_lr', type=float)
    p.add_argument('--batch-size', dest='cls_batch_size', type=int)
    p.add_argument('--optimizer', choices=('adam', 'sgd'))
    p.add_argument('--width', dest='cls_width', type=int)
    p.add_argument('--lam', type=float)
    p.add_argument('--tau', type=float)
    p.add_argument('--no-prompt', dest='use_prompt', action='store_false',
                   default=None)
    p.add_argument('--visual-as-query', dest='text_as_query',
                   action='store_false', default=None)


def _data_flags(p, split):
    p.add_argument('--data', required=True,
                   help='dataset directory, manifest file or manifest URL')
    p.add_argument('--split', choices=('train', 'test', 'all'),
                   default=split, help='the first n_train samples are train')
    p.add_argument('--n-train', dest='n_train', type=int)


def build_parser():
    common = _common()
    parser = argparse.ArgumentParser(
        prog='hilbert-mamba',
        description='Hilbert-curve Mamba segmentation and prompt-fused '
        'classification on synthetic volumes')
    parser.add_argument('--version', action='version', version=__version__)
    sub = parser.add_subparsers(dest='command', metavar='command')
    sub.required = True

    hilbert = sub.add_parser('hilbert', help='curve tables and locality')
    hsub = hilbert.add_subparsers(dest='hilbert_command', metavar='command')
    hsub.required = True
    p = hsub.add_parser('map', parents=[common],
                        help='index to coordinate table as CSV')
    p.add_argument('--dims', type=int, choices=(2, 3), required=True)
    p.add_argument('--order', type=int, required=True)
    p.add_argument('--scheme', choices=SCHEMES, default='hilbert')
    p.add_argument('--out')
    p.set_defaults(func=cmd_hilbert_map)
    p = hsub.add_parser('locality', parents=[common],
                        help='adjacent-index gap report as JSON')
    p.add_argument('--scheme', choices=SCHEMES, default='hilbert')
    p.add_argument('--grid', type=_int_list, required=True)
    p.add_argument('--out')
    p.set_defaults(func=cmd_hilbert_locality)

    p = sub.add_parser('synth', parents=[common],
                       help='write a synthetic dataset')
    p.add_argument('--n', type=int)
    p.add_argument('--extent', type=int)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser('train-seg', parents=[common],
                       help='train the segmenter')
    _data_flags(p, 'train')
    _model_flags(p)
    p.add_argument('--ckpt', required=True)
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser('eval-seg', parents=[common],
                       help='per-volume segmentation metrics as CSV')
    _data_flags(p, 'test')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--out')
    p.set_defaults(func=cmd_eval_seg)

    p = sub.add_parser('train-cls', parents=[common],
                       help='train the prompt classifier')
    _data_flags(p, 'train')
    _cls_flags(p)
    p.add_argument('--d-state', dest='d_state', type=int)
    p.add_argument('--ckpt', required=True)
    p.set_defaults(func=cmd_train_cls)

    p = sub.add_parser('eval-cls', parents=[common],
                       help='classification metrics as JSON')
    _data_flags(p, 'test')
    p.add_argument('--ckpt', required=True)
    p.add_argument('--seg-ckpt', dest='seg_ckpt',
                   help='classify with predicted instead of true masks')
    p.add_argument('--out')
    p.set_defaults(func=cmd_eval_cls)

    p = sub.add_parser('segment', parents=[common],
                       help='predict a mask for one volume')
    p.add_argument('--volume', required=True)
    p.add_argument('--ckpt', required=True)
    p.add_argument('--threshold', type=float, default=0.5)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser('prompt', parents=[common],
                       help='lesion attributes and sentence for a mask')
    p.add_argument('--mask', required=True)
    p.add_argument('--spacing', type=_float_list)
    p.set_defaults(func=cmd_prompt)

    p = sub.add_parser('classify', parents=[common],
                       help='class probabilities for one volume')
    p.add_argument('--volume', required=True)
    p.add_argument('--mask', required=True)
    p.add_argument('--ckpt', required=True)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser('ablate', parents=[common],
                       help='scan order / memory / lam ablation as CSV')
    p.add_argument('--matrix', help='YAML ablation matrix')
    p.add_argument('--workdir', help='directory for per-run JSON results')
    p.add_argument('--out')
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser('gradcheck', parents=[common],
                       help='finite-difference gradient checks')
    p.add_argument('--target', choices=TARGETS, default='all')
    p.add_argument('--seeds', type=int, default=1)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def configure_logging(args):
    level = logging.INFO
    if getattr(args, 'verbose', False):
        level = logging.DEBUG
    elif getattr(args, 'quiet', False):
        level = logging.WARNING
    root = logging.getLogger()
    root.setLevel(level)
    if not any(getattr(h, '_hilbert_mamba', False) for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(
            '%(levelname)s %(name)s: %(message)s'))
        handler._hilbert_mamba = True
        root.addHandler(handler)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args)
    try:
        status = args.func(args)
    except (HilbertMambaError, OSError, yaml.YAMLError,
            requests.RequestException) as e:
        sys.stderr.write(json.dumps({'error': type(e).__name__,
                                     'message': str(e)}) + '\n')
        return EXIT_FAILURE
    return EXIT_OK if status is None else status


if __name__ == '__main__':
    sys.exit(main())
