import copy
import html
from typing import Any, Dict, Iterable, Sequence

# Per-method bar colors, in legend order
method_colors: Dict[str, str] = {
    'closed_world': '#7f7f7f',
    'naive_fusion': '#1f77b4',
    'tcr': '#d62728',
}

chart_template = '''<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">
<style>text { font-family: sans-serif; font-size: 11px; } .title { font-size: 13px; font-weight: bold; }</style>
<text class="title" x="{MARGIN}" y="18">{TITLE}</text>
<line x1="{MARGIN}" y1="{BASELINE}" x2="{AXIS_END}" y2="{BASELINE}" stroke="black"/>
<line x1="{MARGIN}" y1="{TOP}" x2="{MARGIN}" y2="{BASELINE}" stroke="black"/>
<text x="4" y="{TOP}">{MAX_LABEL}</text>
{BODY}
</svg>
'''

bar_template = '<rect x="{X}" y="{Y}" width="{W}" height="{H}" fill="{COLOR}"><title>{TIP}</title></rect>'
label_template = '<text x="{X}" y="{Y}" text-anchor="middle">{TEXT}</text>'
legend_template = '<rect x="{X}" y="{Y}" width="10" height="10" fill="{COLOR}"/><text x="{TX}" y="{TY}">{TEXT}</text>'


def svg_format(template: str, keys: Dict[str, Any]) -> str:
    # We don't use `str.format` because it's not safe for CSS {} braces
    new_template = copy.deepcopy(template)
    for key, value in keys.items():
        value_str = f'{value:.2f}' if isinstance(value, float) else str(value)
        new_template = new_template.replace(f'{{{key}}}', value_str)
    return new_template


def render_bar_chart(target: str, subset: str, rows: Iterable[Dict[str, Any]]) -> str:
    """
    Grouped bar chart of mean error per source dataset (one bar per method) for one target dataset.

    Arguments:
        target: the target dataset name.
        subset: the landmark subset to plot.
        rows: report rows, as produced by `ExperimentMatrix.rows()`.

    Returns:
        The SVG document.
    """
    rows = [r for r in rows if r['target'] == target and r['subset'] == subset]
    sources = list(dict.fromkeys(r['source'] for r in rows))
    methods = [m for m in method_colors if any(r['method'] == m for r in rows)]
    values = {(r['source'], r['method']): r['mean_error'] for r in rows}
    peak = max(values.values(), default=1.0) or 1.0

    margin, top, plot_height, bar_width, gap = 40, 30, 200, 18, 24
    group_width = bar_width * max(len(methods), 1) + gap
    baseline = top + plot_height
    width = margin + group_width * max(len(sources), 1) + 20
    body = []
    for g, source in enumerate(sources):
        x0 = margin + gap / 2 + g * group_width
        for b, method in enumerate(methods):
            if (source, method) not in values:
                continue
            value = values[(source, method)]
            height = plot_height * value / peak
            body.append(svg_format(bar_template, {'X': x0 + b * bar_width, 'Y': baseline - height, 'W': float(bar_width - 2),
                                                  'H': height, 'COLOR': method_colors[method],
                                                  'TIP': html.escape(f'{source} / {method}: {value:.3f}')}))
        body.append(svg_format(label_template, {'X': x0 + bar_width * len(methods) / 2, 'Y': float(baseline + 14),
                                                'TEXT': html.escape(source)}))
    for i, method in enumerate(methods):
        y = float(baseline + 28 + 14 * i)
        body.append(svg_format(legend_template, {'X': float(margin), 'Y': y, 'COLOR': method_colors[method],
                                                 'TX': float(margin + 14), 'TY': y + 9, 'TEXT': method}))

    return svg_format(chart_template, {'WIDTH': width, 'HEIGHT': baseline + 40 + 14 * len(methods),
                                       'MARGIN': margin, 'TOP': top, 'BASELINE': baseline, 'AXIS_END': width - 10,
                                       'MAX_LABEL': f'{peak:.2f}',
                                       'TITLE': html.escape(f'Mean error (% interocular), {subset} landmarks, target {target}'),
                                       'BODY': '\n'.join(body)})


def chart_targets(rows: Sequence[Dict[str, Any]]) -> Sequence[str]:
    return list(dict.fromkeys(r['target'] for r in rows))
