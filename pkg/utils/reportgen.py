from pathlib import Path

from jinja2 import Environment, FileSystemLoader

TEMPLATES_DIR = Path(__file__).resolve().parent.parent / "templates"

COMPARISON_COLUMNS = ["U-Net", "CEU-Net", "U-Net (CPC)", "CEU-Net (CPC)"]

_environment = Environment(
    loader=FileSystemLoader(str(TEMPLATES_DIR)),
    trim_blocks=True,
    lstrip_blocks=True,
    keep_trailing_newline=True,
)


def _fmt(value, digits: int = 4) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


_environment.filters["fmt"] = _fmt


def comparison_table(reports) -> dict:
    """Dataset rows x model columns of mean accuracy"""
    columns = list(COMPARISON_COLUMNS)
    rows = {}
    for report in reports:
        if report.status != "ok" or report.mean_accuracy is None:
            continue
        if report.model_label not in columns:
            columns.append(report.model_label)
        cell = report.mean_accuracy
        if report.cluster_k is not None:
            cell = (report.mean_accuracy, report.cluster_k)
        rows.setdefault(report.dataset, {})[report.model_label] = cell
    return {"columns": columns, "rows": rows}


def reduction_table(reports) -> dict:
    """Dataset rows x reducer columns, the feature study layout"""
    rows = {}
    for report in reports:
        if report.status == "ok" and report.mean_accuracy is not None:
            rows.setdefault(report.dataset, {})[report.config["reducer"]] = report.mean_accuracy
    return {"columns": ["pca", "cae2d", "cae3d"], "rows": rows}


def render_report_text(reports, grid=None, weights=None, timing=None) -> str:
    template = _environment.get_template("report.txt")
    return template.render(
        reports=reports,
        comparison=comparison_table(reports),
        reduction=reduction_table(reports),
        grid=grid or [],
        weights=weights or [],
        timing=timing or [],
    )
