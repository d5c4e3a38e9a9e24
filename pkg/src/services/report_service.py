from collections.abc import Sequence

from src.services.ablation_service import AblationReport
from src.services.training_service import RunReport


class ReportException(Exception):
    """Base class for Exceptions of ReportService"""
    def __init__(self, message: str):
        """Base class for Exceptions of ReportService"""
        super().__init__(message)


def _cell(value) -> str:
    if isinstance(value, bool):
        return "PASS" if value else "FAIL"
    if isinstance(value, float):
        return f"{value:.3e}" if value != 0 and abs(value) < 1e-3 else f"{value:.5f}"
    return str(value)


def format_table(headers: Sequence[str], rows: Sequence[Sequence]) -> str:
    """A plain-text table with left-aligned columns."""
    cells = [[str(h) for h in headers]] + [[_cell(value) for value in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    lines = ["  ".join(value.ljust(width) for value, width in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * width for width in widths))
    return "\n".join(lines)


def _percent(value: float) -> str:
    return f"{100 * value:+.2f}%"


def render_runs(reports: Sequence[RunReport]) -> str:
    """Side-by-side comparison of training runs."""
    rows = [
        (
            r.name, r.seed, r.final_auc, r.final_logloss, r.oracle_auc, r.ceiling_auc,
            f"{r.final_auc / r.ceiling_auc:.4f}", r.parameters_total, r.parameters_activated,
            f"{r.flops_per_batch:,}", r.steps
        )
        for r in reports
    ]
    return format_table(
        ("run", "seed", "AUC", "logloss", "oracle AUC", "ceiling AUC", "AUC/ceiling",
         "params", "activated", "GEMM FLOPs/batch", "steps"),
        rows
    )


def render_ablation(report: AblationReport) -> str:
    """Setting / per-seed AUC / mean / delta AUC, the base first."""
    headers = ["setting"] + [f"seed {seed}" for seed in report.seeds] + ["mean AUC", "delta AUC"]
    rows = [
        [row.name] + list(row.aucs) + [row.mean_auc, "--" if row.name == "base" else _percent(row.delta_auc)]
        for row in report.rows
    ]
    return f"Ablation against '{report.base}'\n" + format_table(headers, rows)


def render_fidelity(report: dict) -> str:
    """Per-layer deviations and the AUC of both inference paths."""
    layers = format_table(
        ("layer", "max relative deviation"),
        [(layer, deviation) for layer, deviation in enumerate(report["layer_deviations"])]
    )
    summary = format_table(
        ("granularity", "examples", "AUC full", "AUC fp8", "delta AUC", "max score deviation"),
        [(report["granularity"], report["examples"], report["auc_full"], report["auc_fp8"],
          report["auc_delta"], report["score_max_abs_deviation"])]
    )
    return f"{summary}\n\n{layers}"


def render_sparsify(report: dict) -> str:
    return format_table(
        ("experts", "active", "alpha", "split nets", "equivalence error", "max score deviation",
         "AUC dense", "AUC sparse", "params", "activated"),
        [(report["experts"], report["active"], report["alpha"], report["split_nets"], report["equivalence_error"],
          report["score_max_abs_deviation"], report["auc_dense"], report["auc_sparse"],
          report["parameters_dense"], report["parameters_activated"])]
    )


def render_simulation(report: dict) -> str:
    return format_table(
        ("N", "L", "mode", "all2all", "expected", "bytes", "max abs diff", "verdict"),
        [(report["devices"], report["layers"], "naive" if report["naive"] else "optimized",
          report["all2all_count"], report["expected_all2all"], report["all2all_bytes"],
          report["max_abs_diff"], report["passed"])]
    )


def render_gradcheck(report: dict) -> str:
    return format_table(
        ("check", "max relative error", "tolerance", "verdict"),
        [(row["name"], row["error"], row["tolerance"], row["passed"]) for row in report["rows"]]
    )


def render_reports(contents: Sequence[dict]) -> str:
    """Render report files written by the CLI: run reports side by side, every other kind on its own.

    Raises
    ------
    ReportException: if a report is of no known kind.
    """
    runs, sections = [], []
    for content in contents:
        if "trajectory" in content:
            runs.append(RunReport.from_dict(content))
        elif "seeds" in content and "rows" in content:
            sections.append(render_ablation(AblationReport.from_dict(content)))
        elif "layer_deviations" in content:
            sections.append(render_fidelity(content))
        elif "equivalence_error" in content:
            sections.append(render_sparsify(content))
        elif "all2all_count" in content:
            sections.append(render_simulation(content))
        elif "rows" in content:
            sections.append(render_gradcheck(content))
        else:
            raise ReportException(f"Unknown report with keys {sorted(content)}.")
    if runs:
        sections.insert(0, render_runs(runs))
    return "\n\n".join(sections)
