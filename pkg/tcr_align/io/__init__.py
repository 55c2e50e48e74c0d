from .pts import parse_pts, load_pts, format_pts, write_pts
from .image import load_image, save_png
from .config import RunConfig, load_run_config, load_toml, write_toml
from .dataset import (
    ManifestEntry, DatasetManifest, Dataset,
    load_schema, write_schema, load_correspondence, write_correspondence,
    load_manifest, write_manifest, load_dataset, load_splits
)
from .model_file import (
    MAGIC, FORMAT_VERSION,
    serialize_model, deserialize_model, save_model, load_model,
    model_to_json, model_from_json, export_json
)
from .template import svg_format, render_bar_chart
from .report import REPORT_COLUMNS, report_row, write_report, write_pseudo_labels
