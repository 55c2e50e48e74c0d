import argparse
import json
import os
import sys
from typing import Dict, List, Optional, Sequence, Tuple

from .core.cascade import predict_samples, train_sdm
from .core.geometry import CorrespondenceMap
from .core.utils import get_num_threads
from .core.pipeline import DatasetSplits, cross_matrix, run_tcr, score
from .core.transductive import filter_pseudo, train_transductive, transfer_annotations
from .errors import DataError, SchemaMismatch, TcrError
from .io.config import RunConfig, load_run_config
from .io.dataset import Dataset, load_correspondence, load_dataset, load_manifest, load_splits, sample_name
from .io.model_file import export_json, load_model, save_model
from .io.report import report_row, write_pseudo_labels, write_report
from .synth import generate_corpus, write_corpus
from .utils import put


class UsageError(TcrError):
    pass


class ArgumentParser(argparse.ArgumentParser):
    # Usage errors exit with code 1, not argparse's 2, which is reserved for data errors
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        raise UsageError(f'{self.prog}: error: {message}')


def _run_config(args: argparse.Namespace) -> RunConfig:
    config = load_run_config(args.config) if args.config else RunConfig()
    return config.with_seed(args.seed) if args.seed is not None else config


def _seed(args: argparse.Namespace, config: RunConfig) -> int:
    return config.cascade.rng_seed if args.seed is None else args.seed


def _write_json(path: str, document: dict) -> None:
    put(path, json.dumps(document, sort_keys=True, indent=1))


def _check_correspondence(correspondence: CorrespondenceMap, source: Dataset, target: Dataset) -> None:
    if correspondence.source_schema != source.schema or correspondence.target_schema != target.schema:
        raise SchemaMismatch(f'Correspondence {correspondence.source_schema.name!r} -> '
                             f'{correspondence.target_schema.name!r} does not match datasets '
                             f'{source.schema.name!r} -> {target.schema.name!r}')


def cmd_synth(args: argparse.Namespace, config: RunConfig) -> None:
    corpus = generate_corpus(config.synth, _seed(args, config))
    paths = write_corpus(corpus, args.out)
    _write_json(os.path.join(args.out, 'corpus.json'), {'seed': _seed(args, config), 'paths': paths,
                                                       'synth': config.synth.to_dict()})
    print(f'Wrote synthetic corpus to {args.out}', file=sys.stderr)


def cmd_train(args: argparse.Namespace, config: RunConfig) -> None:
    dataset = load_dataset(args.manifest)
    model = train_sdm(dataset.samples, dataset.schema, config.cascade)
    os.makedirs(args.out, exist_ok=True)
    save_model(model, os.path.join(args.out, 'model.tcr'))
    if args.json:
        export_json(model, os.path.join(args.out, 'model.json'))
    _write_json(os.path.join(args.out, 'train_log.json'), {'samples': len(dataset), 'skipped': dataset.skipped,
                                                          'training_errors': list(model.training_errors)})


def cmd_transfer(args: argparse.Namespace, config: RunConfig) -> None:
    source, target = load_dataset(args.source), load_dataset(args.target)
    correspondence = load_correspondence(args.correspondence)
    _check_correspondence(correspondence, source, target)
    model = train_transductive(source.samples, correspondence, config.cascade, config.pipeline.use_guidance)
    pseudo = transfer_annotations(model, target.samples, correspondence)
    retained = filter_pseudo(pseudo, config.pipeline.epsilon)
    image_paths = {sample_name(e.image): e.image
                   for e in load_manifest(args.target).entries}
    write_pseudo_labels(pseudo, retained, args.out, image_paths)
    _write_json(os.path.join(args.out, 'transfer_log.json'), {
        'transferred': len(pseudo), 'retained': len(retained), 'rejected': len(pseudo) - len(retained),
        'epsilon': config.pipeline.epsilon, 'training_errors': list(model.training_errors)})


def cmd_fuse(args: argparse.Namespace, config: RunConfig) -> None:
    source, target = load_dataset(args.source), load_dataset(args.target)
    correspondence = load_correspondence(args.correspondence)
    _check_correspondence(correspondence, source, target)
    model, log = run_tcr(source.samples, target.samples, correspondence, config.cascade, config.pipeline)
    os.makedirs(args.out, exist_ok=True)
    save_model(model, os.path.join(args.out, 'model.tcr'))
    if args.json:
        export_json(model, os.path.join(args.out, 'model.json'))
    _write_json(os.path.join(args.out, 'fuse_log.json'), log.to_dict())


def _predictions_by_name(manifest: str, dataset: Dataset) -> list:
    predicted = {s.name: s.truth for s in load_dataset(manifest).samples}
    missing = [s.name for s in dataset.samples if s.name not in predicted]
    if missing:
        raise SchemaMismatch(f'{len(missing)} test samples have no prediction, e.g. {missing[0]!r}')
    return [predicted[s.name] for s in dataset.samples]


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> None:
    dataset = load_dataset(args.manifest)
    correspondence = load_correspondence(args.correspondence) if args.correspondence else None
    threshold = config.pipeline.failure_threshold
    if not args.model and not args.predictions:
        raise UsageError('eval: one of --model or --predictions is required')
    methods = args.method or []

    rows = []
    sources = [(path, 'model') for path in args.model or []] + [(path, 'predictions') for path in args.predictions or []]
    for k, (path, kind) in enumerate(sources):
        method = methods[k] if k < len(methods) else os.path.splitext(os.path.basename(path))[0]
        if kind == 'model':
            model = load_model(path)
            predictions = predict_samples(model, dataset.samples)
        else:
            predictions = _predictions_by_name(path, dataset)
        for subset in args.subset:
            report = score(predictions, dataset.samples, subset, correspondence, threshold)
            rows.append(report_row(report, predictions[0].schema.name, dataset.name, method))
            print(f'{method} on {dataset.name} ({subset}): mean {report.mean_error:.4f}%, '
                  f'failure rate {report.failure_rate:.4f}', file=sys.stderr)
    write_report(rows, args.out, charts=False)


def _match_correspondences(datasets: Sequence[DatasetSplits],
                           correspondences: Sequence[CorrespondenceMap]) -> Dict[Tuple[str, str], CorrespondenceMap]:
    matched = {}
    for source in datasets:
        for target in datasets:
            for c in correspondences:
                if source is not target and c.source_schema == source.schema and c.target_schema == target.schema:
                    matched[(source.name, target.name)] = c
    return matched


def cmd_matrix(args: argparse.Namespace, config: RunConfig) -> None:
    if args.dataset:
        datasets = []
        for pair in args.dataset:
            if ':' not in pair:
                raise UsageError(f'matrix: --dataset expects TRAIN_MANIFEST:TEST_MANIFEST, got {pair!r}')
            train, test = pair.split(':', 1)
            datasets.append(load_splits(train, test))
        correspondences = _match_correspondences(datasets, [load_correspondence(c) for c in args.correspondence or []])
    else:
        corpus = generate_corpus(config.synth, _seed(args, config))
        datasets = [corpus.a, corpus.b]
        correspondences = {(corpus.a.name, corpus.b.name): corpus.correspondence}

    matrix = cross_matrix(datasets, correspondences, config.cascade, config.pipeline)
    logs = {f'{s}->{t}': log.to_dict() for (s, t), log in matrix.logs.items()}
    write_report(matrix.rows(), args.out, charts=not args.no_charts, extra={'logs': logs, 'config': config.to_dict()})


def _add_global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    # Accepted before or after the subcommand; subcommand copies never overwrite an earlier value
    default = lambda value: argparse.SUPPRESS if suppress else value
    parser.add_argument('--seed', type=int, default=default(None), help='Random seed (overrides the configuration)')
    parser.add_argument('--config', default=default(None), help='TOML run configuration')
    parser.add_argument('--out', default=default('out'), help='Output directory')


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    _add_global_flags(common, suppress=True)

    parser = ArgumentParser(prog='tcr-align', description='Cascaded regression landmark alignment with '
                                                          'transductive annotation transfer')
    _add_global_flags(parser, suppress=False)
    subparsers = parser.add_subparsers(dest='command', metavar='command', parser_class=ArgumentParser)
    subparsers.required = True

    p = subparsers.add_parser('synth', parents=[common], help='Write a synthetic paired corpus')
    p.set_defaults(handler=cmd_synth)

    p = subparsers.add_parser('train', parents=[common], help='Train a closed-world cascade')
    p.add_argument('--manifest', required=True, help='Training manifest')
    p.add_argument('--json', action='store_true', help='Also write the JSON model export')
    p.set_defaults(handler=cmd_train)

    for name, handler, description in (('transfer', cmd_transfer, 'Transfer source annotations onto target faces'),
                                       ('fuse', cmd_fuse, 'Run the full transductive fusion pipeline')):
        p = subparsers.add_parser(name, parents=[common], help=description)
        p.add_argument('--source', required=True, help='Source training manifest')
        p.add_argument('--target', required=True, help='Target training manifest')
        p.add_argument('--correspondence', required=True, help='Source-to-target correspondence TOML')
        if name == 'fuse':
            p.add_argument('--json', action='store_true', help='Also write the JSON model export')
        p.set_defaults(handler=handler)

    p = subparsers.add_parser('eval', parents=[common], help='Evaluate models or stored predictions')
    p.add_argument('--manifest', required=True, help='Test manifest')
    p.add_argument('--model', action='append', help='Model file (repeatable)')
    p.add_argument('--predictions', action='append', help='Manifest of predicted pts files (repeatable)')
    p.add_argument('--method', action='append', help='Report label of each model, then each prediction set')
    p.add_argument('--subset', action='append', choices=['all', 'common', 'private'], help='Landmark subset')
    p.add_argument('--correspondence', default=None, help='Correspondence for the common/private subsets')
    p.set_defaults(handler=cmd_eval)

    p = subparsers.add_parser('matrix', parents=[common], help='Cross-dataset experiment matrix')
    p.add_argument('--dataset', action='append', help='TRAIN_MANIFEST:TEST_MANIFEST (repeatable); '
                                                      'the synthetic pair is used when omitted')
    p.add_argument('--correspondence', action='append', help='Correspondence TOML (repeatable)')
    p.add_argument('--no-charts', action='store_true', help='Skip the SVG charts')
    p.set_defaults(handler=cmd_matrix)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    Run the command line.

    Returns:
        0 on success, 1 on usage errors, 2 on data errors.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        get_num_threads()
        if getattr(args, 'subset', None) is None and args.command == 'eval':
            args.subset = ['all']
        args.handler(args, _run_config(args))
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except (DataError, OSError) as e:
        print(f'error: {e}', file=sys.stderr)
        return 2
    return 0
