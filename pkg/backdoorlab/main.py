"""
backdoorlab orchestrator and command-line interface.

`run` executes one experiment config end to end:

1. Load and validate the config, digest its bytes
2. Load source (and downstream) data
3. Backdoor-train one model per seed
4. Run every defense arm of every seed, up to `workers` at a time
5. Score membership inference and re-injection when enabled
6. Mark the results directory complete

Results land in <output_dir>/<digest12>/ with manifest.json, models/,
logs/, reports/ and plots/. Arms write their own files; manifest updates
happen on the event loop thread only.
"""

import argparse
import asyncio
import csv
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Optional, Sequence, TypeVar

import orjson
import yaml
from pydantic import TypeAdapter, ValidationError

try:
    from pythonjsonlogger.json import JsonFormatter
except ImportError:  # python-json-logger < 3.1
    from pythonjsonlogger.jsonlogger import JsonFormatter

from .config_manager import ConfigManager, ConfigurationError, RuntimeSettings, YAML_SUFFIXES, load_config
from .data import Dataset
from .defense import Defense
from .manifest_manager import ArmRecord, ManifestManager
from .model_io import save_model
from .models import MiaReport, ReinjectionReport, ScheduleSpec
from .nn_core import Model, check_random_nets
from .reporting import emit_report, write_csv, write_train_log
from .scenarios import (
    AttackFixture,
    ArmResult,
    ScenarioConfigError,
    ScenarioData,
    ScenarioOutcome,
    arm_name,
    load_scenario_data,
    prepare_attack,
    run_scenario,
    train_clean_twin,
)
from .schedule import schedule_trace
from .sequela import reinjection_curve, run_mia, select_mia_pools


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_INTERRUPTED = 130

T = TypeVar("T")


class WorkflowError(Exception):
    """Base exception for workflow errors."""
    pass


def configure_logging(verbose: bool = False, level: Optional[str] = None) -> None:
    """Send JSON log lines to stderr; --verbose switches to DEBUG."""
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter(
        "%(asctime)s %(levelname)s %(name)s %(message)s",
        rename_fields={"asctime": "timestamp", "levelname": "level", "name": "module"},
        datefmt="%Y-%m-%dT%H:%M:%S",
    ))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else (level or "INFO").upper())


class ExperimentOrchestrator:
    """
    Run one experiment config and persist its results.

    Attributes:
        config_path: Experiment config file
        config: Validated configuration
        digest: sha256 of the config bytes
        workers: Arms run concurrently
        results_dir: <output_dir>/<digest12>
        manifest: Manifest of the results directory
    """

    def __init__(self, config_path: Path, workers: Optional[int] = None) -> None:
        """
        Raises:
            ConfigurationError: If the config is missing or invalid
        """
        self.config_path = config_path
        self.config = load_config(config_path)
        self.digest = ConfigManager.config_digest(config_path.read_bytes())
        self.workers = workers or RuntimeSettings().workers
        self.results_dir = Path(self.config.output_dir) / self.digest[:12]
        self.manifest = ManifestManager(self.results_dir)
        logger.info("Orchestrator initialized", extra={
            "config_path": str(config_path),
            "digest": self.digest[:12],
            "workers": self.workers,
        })

    async def run(self) -> Path:
        """
        Execute the experiment.

        Returns:
            Results directory

        Raises:
            WorkflowError: If any step fails; the manifest is marked failed first
        """
        config = self.config
        self.manifest.begin(
            self.digest, self.config_path, config.model_dump(mode="json"),
            config.scenario.value, list(config.seeds),
        )
        semaphore = asyncio.Semaphore(self.workers)
        try:
            data = await asyncio.to_thread(load_scenario_data, config)
            fixtures = await asyncio.gather(*(
                self._bounded(semaphore, self._prepare, data, seed) for seed in config.seeds
            ))
            for fixture in fixtures:
                self._record_fixture(fixture)

            outcomes = await self._run_arms(semaphore, fixtures)
            records = [arm.report.to_record() for outcome in outcomes for arm in outcome.arms]
            self._write_json("eval_report", Path("reports") / "eval_report.json", records)

            if config.sequela.mia:
                await self._run_mia(semaphore, outcomes)
            if config.sequela.reinjection_ratios:
                await self._run_reinjection(outcomes)

            self.manifest.mark_complete()
        except Exception as e:
            logger.error("Experiment failed", exc_info=True, extra={"results_dir": str(self.results_dir)})
            self.manifest.mark_failed(str(e))
            raise WorkflowError(f"Experiment failed: {e}") from e

        logger.info("Experiment complete", extra={"results_dir": str(self.results_dir)})
        return self.results_dir

    @staticmethod
    async def _bounded(semaphore: asyncio.Semaphore, fn: Callable[..., T], *args: Any) -> T:
        async with semaphore:
            return await asyncio.to_thread(fn, *args)

    # -- attack ---------------------------------------------------------

    def _prepare(self, data: ScenarioData, seed: int) -> AttackFixture:
        fixture = prepare_attack(self.config, seed, data)
        save_model(fixture.backdoored, self.results_dir / "models" / f"backdoored-seed{seed}.bfm")
        write_train_log(fixture.attack_log, self.results_dir / "logs" / f"attack-seed{seed}.csv")
        return fixture

    def _record_fixture(self, fixture: AttackFixture) -> None:
        seed = fixture.seed
        self.manifest.record_output(f"backdoored-seed{seed}", self.results_dir / "models" / f"backdoored-seed{seed}.bfm")
        self.manifest.record_output(f"attack_log-seed{seed}", self.results_dir / "logs" / f"attack-seed{seed}.csv")

    # -- defense arms ---------------------------------------------------

    def _defend(self, fixture: AttackFixture, defense: Defense) -> ScenarioOutcome:
        outcome = run_scenario(self.config, defense, fixture.seed, fixture)
        for arm in outcome.arms:
            save_model(arm.model, self.results_dir / "models" / f"{arm.arm}.bfm")
            write_train_log(arm.log, self.results_dir / "logs" / f"{arm.arm}.csv")
        return outcome

    def _arm_record(self, arm: ArmResult, seed: int, defense: Defense) -> ArmRecord:
        details: dict[str, Any] = {"task": arm.task}
        final = arm.log.final
        if arm.schedule is not None and final is not None:
            details.update(
                schedule=arm.schedule.model_dump(mode="json"),
                total_steps=final.steps,
                steps_per_epoch=final.steps // len(arm.log.epochs),
            )
        return ArmRecord(
            name=arm.arm,
            status="complete",
            seed=seed,
            defense=defense.kind,
            outputs={"model": f"models/{arm.arm}.bfm", "train_log": f"logs/{arm.arm}.csv"},
            details=details,
        )

    async def _run_arms(self, semaphore: asyncio.Semaphore,
                        fixtures: Sequence[AttackFixture]) -> list[ScenarioOutcome]:
        jobs = [(fixture, defense) for fixture in fixtures for defense in self.config.defenses]
        logger.info("Running defense arms", extra={"arms": len(jobs), "workers": self.workers})
        results = await asyncio.gather(
            *(self._bounded(semaphore, self._defend, fixture, defense) for fixture, defense in jobs),
            return_exceptions=True,
        )

        outcomes: list[ScenarioOutcome] = []
        failures: list[BaseException] = []
        for (fixture, defense), result in zip(jobs, results):
            if isinstance(result, BaseException):
                failures.append(result)
                self.manifest.record_arm(ArmRecord(
                    name=arm_name(defense, fixture.seed),
                    status="failed",
                    seed=fixture.seed,
                    defense=defense.kind,
                    error=str(result),
                    partial=True,
                ))
                continue
            outcomes.append(result)
            for arm in result.arms:
                self.manifest.record_arm(self._arm_record(arm, fixture.seed, defense))
        if failures:
            raise failures[0]
        return outcomes

    # -- sequela --------------------------------------------------------

    def _mia(self, model: Model, train_set: Dataset, test_set: Dataset, seed: int, tag: str) -> MiaReport:
        members, nonmembers = select_mia_pools(train_set, test_set, seed)
        return run_mia(model, members, nonmembers, self.config.sequela.mia_config, tag,
                       self.config.eval.batch_size)

    async def _run_mia(self, semaphore: asyncio.Semaphore, outcomes: Sequence[ScenarioOutcome]) -> None:
        kind = self.config.attack.trigger.kind
        jobs = []
        for outcome in outcomes:
            fixture = outcome.fixture
            source = fixture.data.source
            jobs.append((fixture.backdoored, source.train, source.test, fixture.seed,
                         f"backdoored:{kind}-seed{fixture.seed}"))
            for arm in outcome.arms:
                jobs.append((arm.model, arm.train_set, arm.hooks.ca_set, fixture.seed, f"defended:{arm.arm}"))
        # one backdoored entry per seed, even when a seed has several defenses
        unique = list({job[4]: job for job in jobs}.values())
        reports = await asyncio.gather(*(self._bounded(semaphore, self._mia, *job) for job in unique))
        self._write_json("mia", Path("reports") / "mia.json", [r.model_dump(mode="json") for r in reports])

    def _reinject(self, arm: ArmResult, fixture: AttackFixture, clean: Model) -> ReinjectionReport:
        sequela = self.config.sequela
        return reinjection_curve(
            {"clean": clean, "defended": arm.model},
            original=self.config.attack,
            spec=self.config.attack,
            clean_train=fixture.data.source.train,
            attack_cfg=fixture.attack_cfg,
            ratios=sequela.reinjection_ratios,
            max_epochs=sequela.reinjection_epochs,
            threshold=sequela.threshold,
            hooks=fixture.hooks,
            workers=self.workers,
        )

    async def _run_reinjection(self, outcomes: Sequence[ScenarioOutcome]) -> None:
        reports: dict[str, Any] = {}
        for outcome in outcomes:
            fixture = outcome.fixture
            arms = [arm for arm in outcome.arms if arm.task == "source"]
            skipped = [arm.arm for arm in outcome.arms if arm.task != "source"]
            if skipped:
                logger.warning("Re-injection only runs on source-task arms", extra={"skipped": skipped})
            if not arms:
                continue
            clean, clean_log = await asyncio.to_thread(train_clean_twin, fixture)
            save_model(clean, self.results_dir / "models" / f"clean-seed{fixture.seed}.bfm")
            write_train_log(clean_log, self.results_dir / "logs" / f"clean-seed{fixture.seed}.csv")
            self.manifest.record_output(f"clean-seed{fixture.seed}",
                                        self.results_dir / "models" / f"clean-seed{fixture.seed}.bfm")
            for arm in arms:
                report = await asyncio.to_thread(self._reinject, arm, fixture, clean)
                reports[arm.arm] = report.model_dump(mode="json")
        self._write_json("reinjection", Path("reports") / "reinjection.json", reports)

    def _write_json(self, kind: str, relative: Path, payload: Any) -> Path:
        path = self.results_dir / relative
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(orjson.dumps(payload, option=orjson.OPT_INDENT_2))
        self.manifest.record_output(kind, path)
        return path


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def load_schedule(source: str) -> ScheduleSpec:
    """
    Read a schedule from a JSON/YAML file, or from inline JSON.

    Raises:
        ConfigurationError: If the text does not parse or validate
    """
    path = Path(source)
    try:
        if path.exists():
            raw = path.read_bytes()
            data = yaml.safe_load(raw) if path.suffix.lower() in YAML_SUFFIXES else orjson.loads(raw)
        else:
            data = orjson.loads(source)
        return TypeAdapter(ScheduleSpec).validate_python(data)
    except (orjson.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigurationError(f"Cannot parse schedule {source!r}: {e}") from e
    except ValidationError as e:
        raise ConfigurationError(f"Invalid schedule {source!r}:\n{e}") from e


def _cmd_run(args: argparse.Namespace) -> int:
    orchestrator = ExperimentOrchestrator(args.config, workers=args.workers)
    results_dir = asyncio.run(orchestrator.run())
    print(results_dir)
    return EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    for path in emit_report(args.results_dir):
        print(path)
    return EXIT_OK


def _cmd_trace_schedule(args: argparse.Namespace) -> int:
    spec = load_schedule(args.schedule)
    trace = schedule_trace(spec, args.steps, args.steps_per_epoch)
    if args.out is not None:
        write_csv(args.out, ["step", "lr"], trace)
        print(args.out)
    else:
        writer = csv.writer(sys.stdout)
        writer.writerow(["step", "lr"])
        writer.writerows(trace)
    return EXIT_OK


def _cmd_check_gradients(args: argparse.Namespace) -> int:
    errors = check_random_nets(args.nets, seed=args.seed)
    worst = max(errors, default=0.0)
    print(f"checked {len(errors)} nets, worst relative error {worst:.3e} (tolerance {args.tolerance:g})")
    if worst > args.tolerance:
        logger.error("Gradient check failed", extra={"worst": worst, "tolerance": args.tolerance})
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_init_config(args: argparse.Namespace) -> int:
    ConfigManager.create_default_config(args.path)
    return EXIT_OK


def _positive_int(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {number}")
    return number


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="backdoorlab",
        description="backdoorlab - backdoor attacks, fine-tuning defenses and their sequela on small image classifiers",
    )
    parser.add_argument("--verbose", action="store_true", help="Enable debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run an experiment config")
    run.add_argument("config", type=Path, help="Experiment config (.json, .yaml, .yml)")
    run.add_argument("--workers", type=_positive_int, default=None,
                     help="Arms run concurrently (default: BACKDOORLAB_WORKERS or 2)")
    run.set_defaults(handler=_cmd_run)

    report = sub.add_parser("report", help="Emit CSV series and SVG plots for a completed run")
    report.add_argument("results_dir", type=Path)
    report.set_defaults(handler=_cmd_report)

    trace = sub.add_parser("trace-schedule", help="Print the learning rate at every step of a schedule")
    trace.add_argument("schedule", help="Schedule file (.json, .yaml) or inline JSON")
    trace.add_argument("--steps", type=_positive_int, required=True)
    trace.add_argument("--steps-per-epoch", type=_positive_int, required=True)
    trace.add_argument("--out", type=Path, default=None, help="Write CSV here instead of stdout")
    trace.set_defaults(handler=_cmd_trace_schedule)

    grads = sub.add_parser("check-gradients", help="Finite-difference check on random small nets")
    grads.add_argument("--nets", type=_positive_int, default=20)
    grads.add_argument("--seed", type=int, default=0)
    grads.add_argument("--tolerance", type=float, default=1e-3)
    grads.set_defaults(handler=_cmd_check_gradients)

    init = sub.add_parser("init-config", help="Write a runnable default config")
    init.add_argument("path", type=Path)
    init.set_defaults(handler=_cmd_init_config)
    return parser


def _is_config_error(error: BaseException) -> bool:
    return isinstance(error, (ConfigurationError, ScenarioConfigError, ValidationError))


def main(argv: Optional[Sequence[str]] = None) -> None:
    """Main entry point for CLI."""
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose, RuntimeSettings().log_level)

    try:
        code = args.handler(args)
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        sys.exit(EXIT_INTERRUPTED)
    except WorkflowError as e:
        code = EXIT_CONFIG if _is_config_error(e.__cause__) else EXIT_RUNTIME
        print(f"Error: {e}", file=sys.stderr)
    except Exception as e:
        code = EXIT_CONFIG if _is_config_error(e) else EXIT_RUNTIME
        print(f"Error: {e}", file=sys.stderr)
        if code == EXIT_RUNTIME:
            logger.error("Fatal error", exc_info=True)
    sys.exit(code)


if __name__ == "__main__":
    main()
