import logging
import os
from pathlib import Path
from typing import List, Optional, Tuple

import click
from dotenv import load_dotenv

from core.constraints import slater_certificate
from core.errors import (ArtifactIOError, ChecksumMismatch, ConfigError,
                         InfeasibleConstraints, NotConverged, PolicySmithError, SchemaVersionMismatch)
from core.simulation import rollout
from core.synthesis import PolicySynthesizer
from core.types import ConditionalDensity, DatasetCollection, GaussianTransition, RolloutConfig, SynthesisProblem
from pipeline.estimation import Estimator, gaussian_to_conditional
from pipeline.problem_builder import build_problem, initial_densities
from pipeline.synthetic import generate_drives
from pipeline.trajectories import load_collection, write_trajectory_csv
from services.artifact_store import ArtifactStore
from services.report_writer import ReportWriter
from services.settings import load_config

load_dotenv()

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INFEASIBLE = 2
EXIT_NOT_CONVERGED = 3


def setup_logging(level: str, log_file: Optional[Path], verbose: bool = False):
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        handlers.insert(0, logging.FileHandler(log_file, encoding="utf-8"))
    logging.basicConfig(
        level=logging.DEBUG if verbose else getattr(logging, level),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


class PolicySmith:
    """Runs the estimate -> check -> synthesize -> simulate pipeline from one run configuration."""

    def __init__(self, config_path: str = "config/config.yaml", out: Optional[str] = None,
                 seed: Optional[int] = None, workers: Optional[int] = None, verbose: bool = False):
        self.config = load_config(config_path)
        if out is not None:
            self.config.paths.artifacts = Path(out).resolve()
        if seed is not None:
            self.config.simulation.seed = seed
            self.config.synthetic.seed = seed
        if workers is not None:
            self.config.solver.workers = workers
            self.config.simulation.workers = workers

        setup_logging(self.config.logging.level, self.config.logging.file, verbose)
        self.logger = logging.getLogger(__name__)
        self.logger.info(f"✅ Configuration loaded from {config_path}")

        self.state = self.config.grid.state.to_grid()
        self.control = self.config.grid.control.to_grid()
        self.settings = self.config.solver.to_settings(self.config.estimation.support_floor)
        self.store = ArtifactStore(self.config.paths.artifacts, stamp=self.config.artifacts.stamp)
        self.reports = ReportWriter(self.config.paths.artifacts)

    def generate(self):
        """Write synthetic complete and example drives to the configured CSV paths."""
        complete, example = generate_drives(self.config.synthetic, self.config.horizon, self.control)
        write_trajectory_csv(complete, self.config.paths.complete[0])
        write_trajectory_csv(example, self.config.paths.example[0])
        self.logger.info(f"💾 Drives written to {self.config.paths.complete[0]} and {self.config.paths.example[0]}")

    def _complete_data(self) -> Optional[DatasetCollection]:
        paths = self.config.paths.complete
        if self.config.estimation.transition_source == "reference" and not all(p.exists() for p in paths):
            self.logger.info("⚠️ No complete dataset found; using reference transitions only")
            return None
        return load_collection(paths, "complete")

    def _save_transitions(self, name: str, family: Tuple[ConditionalDensity, ...],
                          model: Optional[GaussianTransition]):
        # Gaussian families are stored as their model and rediscretized on load
        if model is not None:
            self.store.save(f"{name}_model", model)
            self.store.path(name).unlink(missing_ok=True)
        else:
            self.store.save(name, family)
            self.store.path(f"{name}_model").unlink(missing_ok=True)

    def _load_transitions(self, name: str) -> Tuple[ConditionalDensity, ...]:
        if self.store.exists(f"{name}_model"):
            model = self.store.load(f"{name}_model", "gaussian_transition")
            return (gaussian_to_conditional(model, self.state, self.control),) * self.config.horizon
        return self.store.load(name, "family")

    def estimate(self):
        cfg = self.config
        example = load_collection(cfg.paths.example, "example")
        complete = self._complete_data()
        reference = {role: t.to_model() for role, t in cfg.transitions.reference.items()}
        estimator = Estimator(
            self.state, self.control, cfg.horizon,
            per_stage=cfg.estimation.per_stage,
            transition_source=cfg.estimation.transition_source,
            example_policy_form=cfg.estimation.example_policy_form,
            reference=reference,
            settings=self.settings,
        )
        result = estimator.estimate(example, complete)
        source = cfg.estimation.transition_source
        models = {"reference": reference, "fitted": result.fits}.get(source, {})

        self.store.save("g_u", result.g_u)
        for key, joint in result.joints.items():
            self.store.save(f"joint_{key.replace('/', '_')}", joint)
        self._save_transitions("f_x", result.f_x, models.get("complete"))
        self._save_transitions("g_x", result.g_x, models.get("example"))
        x0, g0 = initial_densities(cfg.initial_state, self.state, complete or example)
        self.store.save("x0", x0)
        if g0 is not None:
            self.store.save("g0", g0)
        else:
            self.store.path("g0").unlink(missing_ok=True)
        summary = result.summary()
        summary["transition_source"] = source
        self.reports.write_json("estimation_report.json", summary)
        self.reports.print_estimation(summary)

    def load_problem(self) -> SynthesisProblem:
        g_u = self.store.load("g_u", "family")
        if len(g_u) != self.config.horizon:
            raise ConfigError(f"artifacts hold {len(g_u)} stages but the horizon is {self.config.horizon}; "
                              "rerun estimate")
        g0 = self.store.load("g0", "density") if self.store.exists("g0") else None
        return build_problem(self.config, g_u, self._load_transitions("f_x"), self._load_transitions("g_x"),
                             self.store.load("x0", "density"), g0)

    def check(self, problem: Optional[SynthesisProblem] = None) -> List[Tuple[int, int, Optional[float], str]]:
        """Slater check of every (stage, state) constraint set; returns the failures.

        Feasible sets are reported with their best inequality slack as certificate.
        """
        problem = problem or self.load_problem()
        failures = []
        certificates = []
        checked = 0
        seen = {}
        for k in range(1, problem.horizon + 1):
            # stages sharing both g_U and the constraint templates share the outcome
            key = (id(problem.g_u[k - 1]), id(self.config.constraints.for_stage(k)))
            if key not in seen:
                stage_failures, stage_certificates = [], []
                for i, cs in enumerate(problem.constraints[k - 1]):
                    if len(cs) == 0:
                        continue
                    try:
                        _, slack = slater_certificate(cs, problem.g_u[k - 1].row(i), tol=self.settings.slater_tol)
                    except InfeasibleConstraints as e:
                        stage_failures.append((i, e.slack, str(e)))
                    else:
                        stage_certificates.append((i, slack))
                seen[key] = stage_failures, stage_certificates
            stage_failures, stage_certificates = seen[key]
            failures.extend((k, i, slack, reason) for i, slack, reason in stage_failures)
            certificates.extend((k, i, slack) for i, slack in stage_certificates)
            checked += problem.state_grid.cells
        self.reports.write_json("feasibility_report.json",
                                self.reports.feasibility_summary(failures, certificates, checked))
        self.reports.print_feasibility(failures, checked, certificates)
        if failures:
            self.logger.error(f"❌ {len(failures)} constraint sets fail Slater's condition")
        else:
            self.logger.info("✅ Every constraint set is strictly feasible")
        return failures

    def synthesize(self) -> bool:
        problem = self.load_problem()
        if self.settings.check_feasibility and self.check(problem):
            return False
        self.logger.info(f"🚀 Synthesizing policy over {problem.horizon} stages")
        try:
            policy, report = PolicySynthesizer(self.settings).synthesize(problem)
        except NotConverged as e:
            if e.report is not None:
                self.store.save("report", e.report)
                self.reports.print_synthesis(e.report)
            raise
        self.store.save("policy", policy)
        self.store.save("report", report)
        self.reports.write_json("synthesis_summary.json", self.reports.synthesis_summary(report))
        self.reports.print_synthesis(report)
        return True

    def simulate(self):
        sim = self.config.simulation
        policy = self.store.load("policy", "policy")
        if sim.transition == "gaussian":
            if not self.store.exists("f_x_model"):
                raise ConfigError("gaussian rollouts need a Gaussian transition model (f_x_model artifact)")
            transitions = self.store.load("f_x_model", "gaussian_transition")
        else:
            transitions = self._load_transitions("f_x")
        config = RolloutConfig(
            horizon=policy.horizon,
            rollouts=sim.rollouts,
            control_mode=sim.control_mode,
            seed=sim.seed,
            x0=self.store.load("x0", "density"),
            workers=sim.workers,
        )
        result = rollout(policy, transitions, config)
        self.reports.write_bands(result)
        if sim.export_paths:
            self.reports.write_paths(result)
            self.store.save("rollouts", result)
        self.reports.print_bands(result)


def run_command(ctx: click.Context, command: str):
    """Run one pipeline command and map failures to the exit-code contract."""
    opts = ctx.obj
    logger = logging.getLogger(__name__)
    try:
        app = PolicySmith(opts["config"], opts["out"], opts["seed"], opts["workers"], opts["verbose"])
        outcome = getattr(app, command)()
    except (ConfigError, ArtifactIOError, SchemaVersionMismatch, ChecksumMismatch) as e:
        logger.error(f"❌ {e}")
        click.echo(f"Error: {e}", err=True)
        ctx.exit(EXIT_USAGE)
    except InfeasibleConstraints as e:
        logger.error(f"❌ {e}")
        click.echo(f"Error: {e}", err=True)
        ctx.exit(EXIT_INFEASIBLE)
    except NotConverged as e:
        logger.error(f"❌ {e}; cells {e.cells[:10]}{' ...' if len(e.cells) > 10 else ''}")
        click.echo(f"Error: {e}", err=True)
        ctx.exit(EXIT_NOT_CONVERGED)
    except (PolicySmithError, ValueError, OSError) as e:
        logger.error(f"❌ {e}")
        click.echo(f"Error: {e}", err=True)
        ctx.exit(EXIT_USAGE)
    if command == "check" and outcome:
        ctx.exit(EXIT_INFEASIBLE)
    if command == "synthesize" and outcome is False:
        ctx.exit(EXIT_INFEASIBLE)
    ctx.exit(EXIT_OK)


@click.group()
@click.option("--config", "config_path", default=lambda: os.getenv("POLICYSMITH_CONFIG", "config/config.yaml"),
              show_default="config/config.yaml", type=click.Path(dir_okay=False), help="Run configuration (YAML).")
@click.option("--out", default=None, type=click.Path(file_okay=False), help="Artifact directory override.")
@click.option("--seed", default=None, type=click.IntRange(0, 2 ** 64 - 1), help="Seed for generate/simulate.")
@click.option("--workers", default=None, type=click.IntRange(1), help="Threads for projections and rollouts.")
@click.option("--verbose", is_flag=True, help="Log at DEBUG level.")
@click.pass_context
def cli(ctx: click.Context, config_path: str, out: Optional[str], seed: Optional[int],
        workers: Optional[int], verbose: bool):
    """Synthesize randomized control policies from example trajectories under moment constraints."""
    ctx.obj = {"config": config_path, "out": out, "seed": seed, "workers": workers, "verbose": verbose}


@cli.command()
@click.pass_context
def generate(ctx):
    """Write a synthetic complete and example dataset."""
    run_command(ctx, "generate")


@cli.command()
@click.pass_context
def estimate(ctx):
    """Estimate g_U, f_X, g_X and the initial density from the trajectory CSVs."""
    run_command(ctx, "estimate")


@cli.command()
@click.pass_context
def check(ctx):
    """Check Slater's condition for every stage and state."""
    run_command(ctx, "check")


@cli.command()
@click.pass_context
def synthesize(ctx):
    """Run the backward recursion and write the policy and report."""
    run_command(ctx, "synthesize")


@cli.command()
@click.pass_context
def simulate(ctx):
    """Roll the policy out and write band statistics."""
    run_command(ctx, "simulate")


if __name__ == "__main__":
    cli()
