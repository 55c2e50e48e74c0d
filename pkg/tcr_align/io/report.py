import collections
import json
import os
import pandas as pd
from typing import Any, Dict, Optional, Sequence

from .pts import write_pts
from .template import chart_targets, render_bar_chart
from ..core.pipeline import EvalReport
from ..core.transductive import PseudoLabeledSample
from ..errors import DuplicateName
from ..utils import put

REPORT_COLUMNS = ('source', 'target', 'method', 'subset', 'mean_error', 'failure_rate', 'sample_count',
                  'relative_improvement')


def report_row(report: EvalReport, source: str, target: str, method: str,
               relative_improvement: Optional[float] = None) -> Dict[str, Any]:
    return {'source': source, 'target': target, 'method': method, 'subset': report.subset,
            'mean_error': report.mean_error, 'failure_rate': report.failure_rate,
            'sample_count': report.sample_count, 'relative_improvement': relative_improvement}


def write_report(rows: Sequence[Dict[str, Any]], out_dir: str, charts: bool = True,
                 extra: Optional[Dict[str, Any]] = None) -> None:
    """
    Write `report.csv` and `report.json` (rows plus optional `extra` metadata), and one
    `chart_<target>.svg` per target dataset.
    """
    os.makedirs(out_dir, exist_ok=True)
    frame = pd.DataFrame(list(rows), columns=list(REPORT_COLUMNS))
    put(os.path.join(out_dir, 'report.csv'), frame.to_csv(index=False, lineterminator='\n'))
    document = {'rows': [dict(r) for r in rows]}
    if extra:
        document.update(extra)
    put(os.path.join(out_dir, 'report.json'), json.dumps(document, sort_keys=True, indent=1))

    if charts:
        for target in chart_targets(rows):
            subsets = [r['subset'] for r in rows if r['target'] == target]
            subset = 'common' if 'common' in subsets else subsets[0]
            put(os.path.join(out_dir, f'chart_{target}.svg'), render_bar_chart(target, subset, rows))


def write_pseudo_labels(pseudo: Sequence[PseudoLabeledSample], retained: Sequence[PseudoLabeledSample],
                        out_dir: str, image_paths: Optional[Dict[str, str]] = None) -> None:
    """
    Export transferred shapes as `<out_dir>/pts/<name>.pts` plus `pseudo_labels.csv`
    (`image,common_residual,retained`).
    """
    duplicated = sorted(n for n, count in collections.Counter(p.name for p in pseudo).items() if count > 1)
    if duplicated:
        raise DuplicateName(f'Pseudo-labels share the output names {duplicated}')
    kept = {id(p) for p in retained}
    image_paths = image_paths or {}
    rows = []
    for p in pseudo:
        write_pts(os.path.join(out_dir, 'pts', f'{p.name}.pts'), p.shape.points().tolist())
        rows.append({'image': image_paths.get(p.name, p.name), 'common_residual': p.common_residual,
                     'retained': id(p) in kept})
    frame = pd.DataFrame(rows, columns=['image', 'common_residual', 'retained'])
    put(os.path.join(out_dir, 'pseudo_labels.csv'), frame.to_csv(index=False, lineterminator='\n'))
