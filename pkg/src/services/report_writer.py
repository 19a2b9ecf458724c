import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, Union

import numpy as np
import pandas as pd
from rich.console import Console
from rich.table import Table

from core.types import RolloutResult, SynthesisReport

logger = logging.getLogger(__name__)


class ReportWriter:
    """Plot-ready CSV files, JSON summaries and console tables for one output directory."""

    def __init__(self, directory: Union[str, Path], console: Optional[Console] = None):
        self.directory = Path(directory)
        self.console = console or Console()
        self.logger = logging.getLogger(__name__)

    def _target(self, filename: str) -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        return self.directory / filename

    def write_json(self, filename: str, data: Dict[str, Any]) -> Path:
        path = self._target(filename)
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        self.logger.info(f"💾 Report saved to {path}")
        return path

    def write_bands(self, result: RolloutResult, filename: str = "bands.csv") -> Path:
        """Columns stage, mean_x, std_x, mean_u, std_u for stages 1..n."""
        bands = result.bands
        frame = pd.DataFrame({
            "stage": np.arange(1, result.horizon + 1),
            "mean_x": bands.mean_x,
            "std_x": bands.std_x,
            "mean_u": bands.mean_u,
            "std_u": bands.std_u,
        })
        path = self._target(filename)
        frame.to_csv(path, index=False, float_format="%.10g")
        self.logger.info(f"💾 Band statistics saved to {path}")
        return path

    def write_paths(self, result: RolloutResult, filename: str = "paths.csv") -> Path:
        """Long format: rollout, stage, x, u, with stage 0 holding the initial state."""
        rollouts, n = result.x.shape
        frame = pd.DataFrame({
            "rollout": np.repeat(np.arange(rollouts), n + 1),
            "stage": np.tile(np.arange(n + 1), rollouts),
            "x": np.column_stack([result.x0, result.x]).ravel(),
            "u": np.column_stack([np.full(rollouts, np.nan), result.u]).ravel(),
        })
        path = self._target(filename)
        frame.to_csv(path, index=False, float_format="%.10g")
        self.logger.info(f"💾 Rollout paths saved to {path}")
        return path

    def synthesis_summary(self, report: SynthesisReport) -> Dict[str, Any]:
        return {
            "b_star": [float(b) for b in report.b_star],
            "closed_loop_kl": float(report.closed_loop_kl),
            "unconverged": [list(c) for c in report.unconverged],
            "flagged_rows": len(report.flagged_rows),
        }

    def print_synthesis(self, report: SynthesisReport):
        table = Table(title="Synthesis: per-stage minimum B*_k")
        table.add_column("stage", justify="right")
        table.add_column("B*_k", justify="right")
        table.add_column("unconverged", justify="right")
        misses = {}
        for k, _ in report.unconverged:
            misses[k] = misses.get(k, 0) + 1
        for k, b in enumerate(report.b_star, start=1):
            table.add_row(str(k), f"{b:.6g}", str(misses.get(k, 0)))
        self.console.print(table)
        self.console.print(f"closed-loop KL: [bold]{report.closed_loop_kl:.6g}[/bold] nats")

    def print_estimation(self, summary: Dict[str, Any]):
        table = Table(title="Estimation")
        table.add_column("model")
        table.add_column("a", justify="right")
        table.add_column("b", justify="right")
        table.add_column("sigma2", justify="right")
        for name, fit in summary.get("fits", {}).items():
            table.add_row(name, f"{fit['a']:.4f}", f"{fit['b']:.4f}", f"{fit['sigma2']:.4f}")
        self.console.print(table)
        counts = Table(title="Samples")
        counts.add_column("histogram")
        counts.add_column("in range", justify="right")
        counts.add_column("dropped", justify="right")
        for name, c in summary.get("counts", {}).items():
            counts.add_row(name, str(c["in_range"]), str(c["dropped"]))
        self.console.print(counts)

    def feasibility_summary(self, failures: Iterable[Tuple[int, int, Optional[float], str]],
                            certificates: Iterable[Tuple[int, int, float]], checked: int) -> Dict[str, Any]:
        """Failures with their reason; feasible sets with best slack (null when only equalities)."""
        return {
            "checked": checked,
            "failures": [{"stage": k, "state": i, "slack": slack, "reason": reason}
                         for k, i, slack, reason in failures],
            "certificates": [{"stage": k, "state": i, "slack": None if np.isinf(slack) else float(slack)}
                             for k, i, slack in certificates],
        }

    def print_feasibility(self, failures: Iterable[Tuple[int, int, Optional[float], str]], checked: int,
                          certificates: Iterable[Tuple[int, int, float]] = ()):
        failures = list(failures)
        finite = [slack for _, _, slack in certificates if np.isfinite(slack)]
        if finite:
            self.console.print(f"📊 {len(finite)} inequality certificates, smallest slack {min(finite):.3e}")
        if not failures:
            self.console.print(f"[green]✅ all {checked} (stage, state) constraint sets satisfy Slater's condition[/green]")
            return
        table = Table(title=f"Infeasible constraint sets ({len(failures)} of {checked})")
        table.add_column("stage", justify="right")
        table.add_column("state", justify="right")
        table.add_column("best slack", justify="right")
        table.add_column("reason")
        for stage, state, slack, reason in failures:
            table.add_row(str(stage), str(state), "n/a" if slack is None else f"{slack:.3e}", reason)
        self.console.print(table)

    def print_bands(self, result: RolloutResult):
        table = Table(title=f"Rollouts ({result.x.shape[0]}), mean +- std")
        table.add_column("stage", justify="right")
        table.add_column("x", justify="right")
        table.add_column("u", justify="right")
        b = result.bands
        for k in range(result.horizon):
            table.add_row(str(k + 1), f"{b.mean_x[k]:.3f} +- {b.std_x[k]:.3f}", f"{b.mean_u[k]:.3f} +- {b.std_u[k]:.3f}")
        self.console.print(table)
