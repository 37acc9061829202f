"""Report writers: delimited tables, structured text, and figures.

Every run first resolves its configuration to a flat mapping, dumps it as
YAML next to the outputs, and stamps the dump's digest into the first line
of each table. Two runs that print the same digest were configured
identically, so their reports must match byte for byte; the writers
therefore format numbers deterministically (repr for floats) and never
embed timestamps or paths.

Tables are plain comma-separated files with one leading ``# config``
comment; the text reports repeat the same rows aligned for reading plus
any sections that do not fit a rectangle. Figures are rendered from the
same row data as a convenience view; the tables remain the ground truth.
"""
from __future__ import annotations

import dataclasses
import hashlib
import io
from pathlib import Path
from typing import Iterable, Sequence

import yaml

from .metrics import ErrorReport
from .mmu import MmuStats
from .perf import SweepRow

EVAL_HEADER = (
    "layer",
    "kind",
    "method",
    "mse",
    "max_abs_err",
    "sqnr_db",
    "outlier_fraction",
    "effective_bits",
)
SWEEP_HEADER = tuple(f.name for f in dataclasses.fields(SweepRow))


# ---------------------------------------------------------------------------
# Resolved configs
# ---------------------------------------------------------------------------


def config_text(config: dict) -> str:
    return yaml.safe_dump(config, sort_keys=True, default_flow_style=False)


def config_digest(config: dict) -> str:
    digest = hashlib.sha256(config_text(config).encode("utf-8")).hexdigest()
    return f"sha256:{digest}"


def dump_resolved_config(config: dict, path: str | Path) -> str:
    """Write the resolved run config and return its digest."""
    text = config_text(config)
    Path(path).write_text(text, encoding="utf-8")
    return f"sha256:{hashlib.sha256(text.encode('utf-8')).hexdigest()}"


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


def _format(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render_csv(
    header: Sequence[str], rows: Iterable[Sequence], digest: str
) -> str:
    out = io.StringIO()
    out.write(f"# config {digest}\n")
    out.write(",".join(header) + "\n")
    for row in rows:
        out.write(",".join(_format(v) for v in row) + "\n")
    return out.getvalue()


def write_csv(
    path: str | Path,
    header: Sequence[str],
    rows: Iterable[Sequence],
    digest: str,
) -> Path:
    path = Path(path)
    path.write_text(render_csv(header, rows, digest), encoding="utf-8")
    return path


def render_text_table(
    title: str, header: Sequence[str], rows: Sequence[Sequence], digest: str
) -> str:
    cells = [[_format(v) for v in row] for row in rows]
    widths = [
        max(len(header[i]), *(len(r[i]) for r in cells)) if cells else len(header[i])
        for i in range(len(header))
    ]
    lines = [f"{title}", f"config {digest}", ""]
    lines.append("  ".join(h.ljust(widths[i]) for i, h in enumerate(header)))
    lines.append("  ".join("-" * w for w in widths))
    for r in cells:
        lines.append("  ".join(r[i].ljust(widths[i]) for i in range(len(header))))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Evaluation reports
# ---------------------------------------------------------------------------


def eval_rows(report: ErrorReport) -> list[tuple]:
    return [
        (
            c.layer,
            c.kind,
            c.method,
            c.mse,
            c.max_abs_err,
            c.sqnr_db,
            c.outlier_fraction,
            c.effective_bits,
        )
        for c in report.cells
    ]


def write_eval_report(
    report: ErrorReport, out_dir: str | Path, digest: str
) -> list[Path]:
    out_dir = Path(out_dir)
    rows = eval_rows(report)
    paths = [write_csv(out_dir / "eval.csv", EVAL_HEADER, rows, digest)]

    text = render_text_table("per-cell error metrics", EVAL_HEADER, rows, digest)
    sections = [text, f"\ntrace digest: {report.trace_digest}\n"]
    if report.attention:
        sections.append("\ntoy attention perturbation (8 heads x 64 dims x 128 tokens)\n")
        for method in sorted(report.attention):
            check = report.attention[method]
            sections.append(
                f"  {method}: max score delta {check.score_delta!r}, "
                f"max output delta {check.output_delta!r}\n"
            )
    txt_path = out_dir / "eval.txt"
    txt_path.write_text("".join(sections), encoding="utf-8")
    paths.append(txt_path)

    fig_path = out_dir / "eval_mse.png"
    render_eval_figure(report, fig_path)
    paths.append(fig_path)
    return paths


def render_eval_figure(report: ErrorReport, path: str | Path) -> None:
    """Bar chart of per-cell MSE by method; log scale spans the spread."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    methods = sorted({c.method for c in report.cells})
    cells = sorted({(c.layer, c.kind) for c in report.cells})
    fig, ax = plt.subplots(figsize=(max(6, 1.5 * len(cells)), 4))
    width = 0.8 / len(methods)
    for m_idx, method in enumerate(methods):
        values = [report.cell(layer, kind, method).mse for layer, kind in cells]
        offsets = [i + m_idx * width for i in range(len(cells))]
        ax.bar(offsets, values, width=width, label=method)
    ax.set_yscale("log")
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(cells))])
    ax.set_xticklabels([f"L{layer}/{kind}" for layer, kind in cells], rotation=45)
    ax.set_ylabel("MSE")
    ax.set_title("reconstruction error per cache cell")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Sweep and MMU reports
# ---------------------------------------------------------------------------


def sweep_rows(rows: Sequence[SweepRow]) -> list[tuple]:
    return [dataclasses.astuple(r) for r in rows]


def write_sweep_report(
    rows: Sequence[SweepRow], out_dir: str | Path, digest: str
) -> list[Path]:
    out_dir = Path(out_dir)
    data = sweep_rows(rows)
    paths = [write_csv(out_dir / "sweep.csv", SWEEP_HEADER, data, digest)]
    txt_path = out_dir / "sweep.txt"
    txt_path.write_text(
        render_text_table("generation sweep", SWEEP_HEADER, data, digest),
        encoding="utf-8",
    )
    paths.append(txt_path)
    fig_path = out_dir / "sweep_throughput.png"
    render_sweep_figure(rows, fig_path)
    paths.append(fig_path)
    return paths


def render_sweep_figure(rows: Sequence[SweepRow], path: str | Path) -> None:
    """Throughput against batch size, one line per mode; OOM points marked."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    modes = sorted({r.mode for r in rows})
    for mode in modes:
        points = sorted(
            (r.batch, r.throughput, r.oom_flag) for r in rows if r.mode == mode
        )
        ax.plot(
            [p[0] for p in points],
            [p[1] for p in points],
            marker="o",
            label=mode,
        )
        oom = [(p[0], p[1]) for p in points if p[2]]
        if oom:
            ax.scatter(
                [p[0] for p in oom],
                [p[1] for p in oom],
                marker="x",
                color="red",
                zorder=3,
            )
    ax.set_xlabel("batch size")
    ax.set_ylabel("generated tokens / s")
    ax.set_title("modeled generation throughput (x = out of memory)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


MMU_HEADER = (
    "core",
    "pages_total",
    "pages_allocated",
    "bytes_stored",
    "fragmentation",
    "write_transactions",
    "write_bursts",
    "write_burst_efficiency",
    "read_transactions",
    "read_bursts",
    "read_burst_efficiency",
)


def mmu_rows(stats_per_core: Sequence[MmuStats]) -> list[tuple]:
    return [
        (
            core,
            s.pages_total,
            s.pages_allocated,
            s.bytes_stored,
            s.fragmentation,
            s.write_transactions,
            s.write_bursts,
            s.write_burst_efficiency,
            s.read_transactions,
            s.read_bursts,
            s.read_burst_efficiency,
        )
        for core, s in enumerate(stats_per_core)
    ]


def write_mmu_report(
    stats_per_core: Sequence[MmuStats], out_dir: str | Path, digest: str
) -> list[Path]:
    out_dir = Path(out_dir)
    rows = mmu_rows(stats_per_core)
    paths = [write_csv(out_dir / "mmu.csv", MMU_HEADER, rows, digest)]
    txt_path = out_dir / "mmu.txt"
    txt_path.write_text(
        render_text_table("paged cache transfer stats", MMU_HEADER, rows, digest),
        encoding="utf-8",
    )
    paths.append(txt_path)
    return paths
