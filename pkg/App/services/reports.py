import csv
import io
import json
import logging
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel

from App.core.config import settings
from App.core.errors import OutputPathError
from App.models.schemas import AblationResult, AlignmentReport, DiversityReport, GradCheckReport

logger = logging.getLogger(__name__)

ABLATION_COLUMNS = (
    "variant", "use_maer", "use_ambiguity", "alignment_mean", "alignment_std", "preference_mean",
    "nll_mean", "nll_std", "distinct_clusters_mean", "coverage_mean", "plausibility_mean", "seed_count",
)


def _write(path: Path, text: str) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as e:
        raise OutputPathError(path, e.strerror or str(e))
    return path


def _table_rows(results: BaseModel) -> Tuple[Sequence[str], List[list]]:
    """Flatten a result object into a header and data rows for the CSV summary."""
    if isinstance(results, AblationResult):
        return ABLATION_COLUMNS, [[getattr(row, c) for c in ABLATION_COLUMNS] for row in results.rows]
    if isinstance(results, DiversityReport):
        header = ("prompt", "n_interpretations", "distinct_clusters", "coverage", "mean_plausibility", "labels")
        return header, [
            [" ".join(map(str, p.prompt)), p.n_interpretations, p.distinct_clusters, p.coverage,
             float(np.mean(p.plausibility)), "|".join(p.labels)]
            for p in results.prompts
        ]
    if isinstance(results, AlignmentReport):
        return ("index", "score", "preference"), [
            [i, s, q] for i, (s, q) in enumerate(zip(results.scores, results.preferences))
        ]
    if isinstance(results, GradCheckReport):
        header = ("loss", "parameter", "frozen", "max_rel_error", "checked_entries", "tolerance", "passed")
        return header, [[getattr(e, c) for c in header] for e in results.entries]
    raise TypeError(f"No tabular layout for {type(results).__name__}")


def _csv_text(header: Sequence[str], rows: Iterable[list]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(["" if v is None else v for v in row])
    return buffer.getvalue()


def write_json(payload: dict, path: Union[str, Path]) -> Path:
    return _write(Path(path), json.dumps(payload, sort_keys=True, indent=2) + "\n")


def scatter_svg(z: np.ndarray, y: np.ndarray, path: Path, title: str = "MAER embedding") -> Path:
    """Vector scatter of the 2-D points z colored by their target score y."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # fixed ids and no timestamp so re-rendering is byte-identical
    with matplotlib.rc_context({"svg.hashsalt": settings.APP_TITLE, "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 4))
        points = ax.scatter(z[:, 0], z[:, 1], c=y, cmap="viridis", vmin=0.0, vmax=1.0, s=18)
        fig.colorbar(points, ax=ax, label="target score y")
        ax.set_xlabel("z[0]")
        ax.set_ylabel("z[1]")
        ax.set_title(title)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
        except OSError as e:
            raise OutputPathError(path, e.strerror or str(e))
        finally:
            plt.close(fig)
    return path


def emit_report(results: BaseModel, path: Union[str, Path], formats: Sequence[str] = ("json", "csv"),
                scatter: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> List[Path]:
    """
    Write a result object as <path>.json (full table) and <path>.csv
    (summary), plus <path>.svg when scatter points (z, y) are given.

    Args:
        results: ablation, diversity or alignment result
        path: output path; any suffix is replaced per format
        formats: subset of ("json", "csv")
        scatter: optional (z, y) arrays for the embedding scatter

    Returns:
        List[Path]: written files
    """
    base = Path(path)
    base = base.with_suffix("") if base.suffix in (".json", ".csv", ".svg") else base
    written = []
    if "json" in formats:
        payload = {"app": settings.APP_TITLE, "version": settings.APP_VERSION,
                   "kind": type(results).__name__, "results": results.model_dump(mode="json")}
        written.append(write_json(payload, base.with_suffix(".json")))
    if "csv" in formats:
        header, rows = _table_rows(results)
        written.append(_write(base.with_suffix(".csv"), _csv_text(header, rows)))
    if scatter is not None:
        z, y = scatter
        written.append(scatter_svg(np.asarray(z), np.asarray(y), base.with_suffix(".svg")))
    logger.info("Wrote report files: %s", ", ".join(str(p) for p in written))
    return written
