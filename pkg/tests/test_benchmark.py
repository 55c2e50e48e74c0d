import argparse
import random
import time
import torch
from typing import Dict, List

import tcr_align
from tcr_align import bench
from tcr_align.core.pipeline import naive_labeling
from tcr_align.core.transductive import filter_pseudo, train_transductive, transfer_annotations


def run_seed(seed: int, config: tcr_align.CascadeConfig, synth: tcr_align.SynthConfig,
             pipeline: tcr_align.PipelineConfig) -> Dict[str, float]:
    start = time.perf_counter()
    corpus = tcr_align.generate_corpus(synth, seed)
    a, b, correspondence = corpus.a, corpus.b, corpus.correspondence
    config = config.replace(rng_seed=seed)
    results = {}

    # Transfer study: guided transfer against plain source-model labeling of the target training faces
    transductive = train_transductive(a.train, correspondence, config)
    pseudo = transfer_annotations(transductive, b.train, correspondence)
    retained = filter_pseudo(pseudo, pipeline.epsilon)
    assert all(p.common_residual <= pipeline.epsilon for p in retained)
    sdm = tcr_align.train_sdm(a.train, a.schema, config)
    guided = tcr_align.evaluate_transfer([p.shape for p in pseudo], b.train, correspondence)
    plain = tcr_align.evaluate_transfer(naive_labeling(sdm, b.train), b.train, correspondence)
    results['transfer_private'] = guided['private'].mean_error
    results['naive_private'] = plain['private'].mean_error
    results['retained'] = len(retained) / len(pseudo)

    # Cross-dataset matrix
    matrix = tcr_align.cross_matrix([a, b], {(a.name, b.name): correspondence}, config, pipeline)
    diagonal = [matrix.cells[(d.name, d.name)].reports[('closed_world', 'all')].mean_error for d in (a, b)]
    off = matrix.off_diagonal()
    results['diagonal'] = sum(diagonal) / len(diagonal)
    results['off_diagonal'] = sum(c.reports[('closed_world', 'all')].mean_error for c in off) / len(off)
    for cell in off:
        key = f'{cell.source}->{cell.target}'
        closed, tcr = cell.reports[('closed_world', 'all')].mean_error, cell.reports[('tcr', 'all')].mean_error
        results[f'improvement {key}'] = (closed - tcr) / closed
        results[f'beats_naive {key}'] = float(cell.reports[('tcr', 'common')].mean_error <
                                              cell.reports[('naive_fusion', 'common')].mean_error)

    errors = [sdm.training_errors, transductive.training_errors]
    errors += [log.training_errors for log in matrix.logs.values()]
    results['monotone'] = float(all(y <= x for e in errors for x, y in zip(e, e[1:])))

    images, boxes = [s.load_image() for s in b.test], [s.bbox for s in b.test]
    results['predict_s'] = bench(lambda: tcr_align.predict(sdm, images, boxes), num_warmups=0, num_tests=1)
    results['elapsed_s'] = time.perf_counter() - start
    return results


def summarize(runs: List[Dict[str, float]], strict: bool) -> None:
    mean = lambda key: sum(r[key] for r in runs) / len(runs)
    cells = sorted(k.split(' ')[1] for k in runs[0] if k.startswith('improvement '))

    print('Summary:')
    transfer, naive = mean('transfer_private'), mean('naive_private')
    print(f' > Private-landmark transfer error {transfer:.3f}% against {naive:.3f}% for naive labeling '
          f'({(naive - transfer) / naive:.1%} lower)')
    print(f' > Closed-world error {mean("diagonal"):.3f}% on the diagonal, {mean("off_diagonal"):.3f}% off it')
    for cell in cells:
        wins = sum(r[f'beats_naive {cell}'] for r in runs)
        print(f' > {cell}: TCR improvement {mean(f"improvement {cell}"):.1%}, '
              f'beats naive fusion in {wins:.0f}/{len(runs)} seeds')
    print(f' > Monotone training errors in {sum(r["monotone"] for r in runs):.0f}/{len(runs)} seeds')

    if strict:
        assert (naive - transfer) / naive >= 0.1
        assert all(r['diagonal'] < r['off_diagonal'] for r in runs)
        for cell in cells:
            assert mean(f'improvement {cell}') > 0
            assert sum(r[f'beats_naive {cell}'] for r in runs) >= min(4, len(runs))
        assert all(r['monotone'] for r in runs)


if __name__ == '__main__':
    parser = argparse.ArgumentParser(description='Synthetic benchmark')
    parser.add_argument('--seeds', type=int, nargs='+', default=[1, 2, 3, 4, 5])
    parser.add_argument('--strict', action='store_true', help='Assert the benchmark outcomes')
    args = parser.parse_args()

    torch.manual_seed(0)
    random.seed(0)

    runs = []
    print('Testing the synthetic benchmark:')
    for s in args.seeds:
        runs.append(run_seed(s, tcr_align.CascadeConfig(), tcr_align.SynthConfig(), tcr_align.PipelineConfig()))
        print(f' > Seed {s}: ' + ', '.join(f'{k}={v:.4f}' for k, v in runs[-1].items()))
    print()
    summarize(runs, args.strict)
