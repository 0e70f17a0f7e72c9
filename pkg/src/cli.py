"""
koopable command-line interface

    koopable collect  --config arm_rkl_sac.yaml --out results/
    koopable fit      --config ... [--data dataset.csv]
    koopable run      --config ... --set seeds=1,2,3 --set update_mode=kl
    koopable eval     --actual traj.csv [--reference ref.csv]
    koopable converge --config chain_linear.yaml
    koopable bench
    koopable inspect  --checkpoint results/model.kpt

Exit codes: 0 success, 1 numerical failure, 2 usage or config error.
"""

import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import click
from dotenv import load_dotenv

from . import __version__
from .config import Config
from .edmd import fit_dataset, precision_report
from .env import ArmEnv
from .errors import ConfigError, DimensionError, KoopmanError, NumericalError, UnreachableTargetError
from .experiments import convergence_study, timing_experiment
from .metrics import frechet_distance, rmse, time_lag
from .observables import make_basis
from .pipeline import FORMAT_VERSION, collect_initial, run_experiment, versions
from .storage import (
    encode_checkpoint,
    load_checkpoint,
    read_dataset,
    read_tip_trajectory,
    save_checkpoint,
    write_dataset,
    write_json,
    write_trajectory,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_USAGE = 2
VERBS = ("collect", "fit", "run", "eval", "converge", "bench", "inspect")


@dataclass
class Command:
    """A parsed invocation"""

    verb: str
    config_path: Optional[Path] = None
    output_dir: Path = Path("results")
    overrides: Tuple[str, ...] = ()
    options: Dict[str, Any] = field(default_factory=dict)
    verbose: bool = False


def _common(f: Callable) -> Callable:
    f = click.option(
        "--set", "overrides", multiple=True, metavar="KEY=VALUE",
        help="Override a config value (section.key or unique key)",
    )(f)
    f = click.option(
        "--out", "-o", "output_dir", default="results", show_default=True,
        type=click.Path(file_okay=False), help="Directory for artifacts",
    )(f)
    f = click.option(
        "--config", "-c", "config_path", default=None,
        type=click.Path(exists=True, dir_okay=False), help="Run config (YAML)",
    )(f)
    return f


def _command(verb: str, config_path, output_dir, overrides, **options) -> Command:
    ctx = click.get_current_context()
    for item in overrides:
        if "=" not in item or not item.partition("=")[0].strip():
            raise click.BadParameter(f"'{item}' is not KEY=VALUE", param_hint="--set")
    return Command(
        verb=verb,
        config_path=None if config_path is None else Path(config_path),
        output_dir=Path(output_dir),
        overrides=tuple(overrides),
        options=options,
        verbose=bool((ctx.obj or {}).get("verbose")),
    )


@click.group()
@click.option("--verbose", "-v", is_flag=True, help="Enable debug logging")
@click.version_option(__version__, prog_name="koopable")
@click.pass_context
def cli(ctx: click.Context, verbose: bool):
    """Recursive Koopman learning: fit, update and control lifted linear models"""
    ctx.obj = {"verbose": verbose}


@cli.command()
@_common
@click.option("--seed", type=int, default=None, help="Seed (default: first run seed)")
def collect(config_path, output_dir, overrides, seed):
    """Collect the initial arm dataset"""
    return _command("collect", config_path, output_dir, overrides, seed=seed)


@cli.command()
@_common
@click.option("--data", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Dataset CSV (default: collect one from the config)")
@click.option("--seed", type=int, default=None, help="Seed when collecting")
def fit(config_path, output_dir, overrides, data, seed):
    """Fit EDMD and write a checkpoint plus well-posedness report"""
    return _command("fit", config_path, output_dir, overrides, data=data, seed=seed)


@cli.command()
@_common
def run(config_path, output_dir, overrides):
    """Run closed-loop episodes for every seed"""
    return _command("run", config_path, output_dir, overrides)


@cli.command(name="eval")
@_common
@click.option("--actual", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Trajectory CSV (tip_x/tip_y or x/y columns)")
@click.option("--reference", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Reference CSV (default: ref_x/ref_y of --actual)")
@click.option("--dt", type=float, default=None, help="Sample time (default: env.dt)")
def eval_(config_path, output_dir, overrides, actual, reference, dt):
    """Compute RMSE, time lag and Fréchet distance of a trajectory pair"""
    return _command("eval", config_path, output_dir, overrides, actual=actual, reference=reference, dt=dt)


@cli.command()
@_common
def converge(config_path, output_dir, overrides):
    """Convergence study of EDMD on the configured Markov chain"""
    return _command("converge", config_path, output_dir, overrides)


@cli.command()
@_common
def bench(config_path, output_dir, overrides):
    """Time RLS updates and EDMD retrains across dimensions and dataset sizes"""
    return _command("bench", config_path, output_dir, overrides)


@cli.command()
@_common
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
def inspect(config_path, output_dir, overrides, checkpoint):
    """Report on a checkpoint and verify it re-serializes bit-exactly"""
    return _command("inspect", config_path, output_dir, overrides, checkpoint=checkpoint)


def parse_args(argv: Sequence[str]) -> Command:
    """
    Parse argv into a Command

    Raises:
        click.ClickException: unknown verb, missing config, malformed override
        click.exceptions.Exit: help or version was printed
    """
    result = cli.main(args=list(argv), prog_name="koopable", standalone_mode=False)
    if not isinstance(result, Command):
        raise click.exceptions.Exit(result or 0)
    return result


def _artifact(cfg: Config, **payload) -> Dict[str, Any]:
    return {"format_version": FORMAT_VERSION, "versions": versions(), "config": cfg.as_dict(), **payload}


def _collect(cmd: Command, cfg: Config) -> None:
    rc = cfg.run_config()
    seed = cmd.options.get("seed")
    ds = collect_initial(ArmEnv(rc.arm), rc, rc.seeds[0] if seed is None else seed)
    path = write_dataset(ds, cmd.output_dir / "dataset.csv", config=cfg.as_dict())
    click.echo(f"✅ {len(ds)} snapshots → {path}")


def _fit(cmd: Command, cfg: Config) -> None:
    rc = cfg.run_config()
    if cmd.options.get("data"):
        ds = read_dataset(Path(cmd.options["data"]), dt=rc.arm.dt)
    else:
        seed = cmd.options.get("seed")
        ds = collect_initial(ArmEnv(rc.arm), rc, rc.seeds[0] if seed is None else seed)
    model = fit_dataset(ds, make_basis(rc.basis_state), make_basis(rc.basis_control), ridge=rc.ridge)
    path = save_checkpoint(model, cmd.output_dir / "model.kpt", 0, cfg.as_dict())
    report = _artifact(
        cfg,
        sample_count=model.sample_count,
        ridge=rc.ridge,
        wellposedness=model.meta["wellposedness"],
        precision=precision_report(model.P).to_dict(),
    )
    write_json(report, cmd.output_dir / "wellposedness.json")
    click.echo(f"✅ Model (dim {model.dim}) → {path}")


def _run(cmd: Command, cfg: Config) -> None:
    rc = cfg.run_config()
    experiment = run_experiment(rc, cfg.threads)
    write_json(experiment.to_dict(), cmd.output_dir / "report.json")
    for report in experiment.reports:
        write_trajectory(report.trajectory, cmd.output_dir / "trajectories" / f"seed_{report.seed}.csv")
    click.echo(json.dumps(experiment.aggregate(), indent=2, sort_keys=True))


def _eval(cmd: Command, cfg: Config) -> None:
    actual_path = Path(cmd.options["actual"])
    actual = read_tip_trajectory(actual_path)
    if cmd.options.get("reference"):
        reference = read_tip_trajectory(Path(cmd.options["reference"]))
    else:
        reference = read_tip_trajectory(actual_path, columns=("ref_x", "ref_y"))
    dt = cmd.options.get("dt")
    dt = cfg.arm_params().dt if dt is None else dt
    metrics = {
        "rmse": rmse(actual, reference),
        "time_lag": time_lag(actual, reference, dt),
        "frechet": frechet_distance(actual, reference),
    }
    write_json(_artifact(cfg, dt=dt, metrics=metrics), cmd.output_dir / "metrics.json")
    click.echo(json.dumps(metrics, indent=2, sort_keys=True))


def _converge(cmd: Command, cfg: Config) -> None:
    spec = cfg.chain_spec()
    settings = cfg.convergence_settings()
    study = convergence_study(
        spec,
        cfg.convergence_basis(spec.n),
        settings["checkpoints"],
        settings["seeds"],
        oracle_samples=settings["oracle_samples"],
    )
    write_json(_artifact(cfg, **study.to_dict()), cmd.output_dir / "convergence.json")
    study.to_frame().to_csv(cmd.output_dir / "convergence.csv", index=False)
    click.echo(study.to_frame().to_string(index=False))


def _bench(cmd: Command, cfg: Config) -> None:
    table = timing_experiment(**cfg.bench_settings())
    write_json(_artifact(cfg, **table.to_dict()), cmd.output_dir / "timing.json")
    table.frame.to_csv(cmd.output_dir / "timing.csv", index=False)
    click.echo(table.frame.to_string(index=False))


def _inspect(cmd: Command, cfg: Config) -> None:
    path = Path(cmd.options["checkpoint"])
    model, header = load_checkpoint(path)
    exact = encode_checkpoint(model, header.get("update_count", 0), header.get("config")) == path.read_bytes()
    summary = {
        "checkpoint": str(path),
        "n_z": model.n_z,
        "n_g": model.n_g,
        "dt": model.dt,
        "sample_count": model.sample_count,
        "update_count": header.get("update_count", 0),
        "basis_state": header.get("basis_state"),
        "basis_control": header.get("basis_control"),
        "symmetry_residual": model.symmetry_residual(),
        "precision": precision_report(model.P).to_dict(),
        "roundtrip_exact": exact,
    }
    write_json(_artifact(cfg, checkpoint_config=header.get("config"), **summary), cmd.output_dir / "inspect.json")
    click.echo(json.dumps(summary, indent=2, sort_keys=True))
    if not exact:
        raise NumericalError(f"checkpoint {path} does not re-serialize bit-exactly")


_HANDLERS: Dict[str, Callable[[Command, Config], None]] = {
    "collect": _collect,
    "fit": _fit,
    "run": _run,
    "eval": _eval,
    "converge": _converge,
    "bench": _bench,
    "inspect": _inspect,
}


def execute(cmd: Command) -> int:
    """Run a parsed command; returns its exit code"""
    if cmd.verb not in _HANDLERS:
        logger.error(f"❌ Unknown verb '{cmd.verb}'")
        return EXIT_USAGE
    try:
        cfg = Config(cmd.config_path, cmd.overrides)
        cmd.output_dir.mkdir(parents=True, exist_ok=True)
        logger.info(f"🚀 koopable {cmd.verb} → {cmd.output_dir}")
        _HANDLERS[cmd.verb](cmd, cfg)
    except (ConfigError, DimensionError, UnreachableTargetError) as e:
        logger.error(f"❌ {cmd.verb}: {e}")
        return EXIT_USAGE
    except NumericalError as e:
        logger.error(f"❌ {cmd.verb} failed: {e}")
        return EXIT_NUMERICAL
    except KoopmanError as e:
        logger.error(f"❌ {cmd.verb} failed: {e}")
        return EXIT_NUMERICAL
    except OSError as e:
        logger.error(f"❌ {cmd.verb}: cannot write artifacts: {e}")
        return EXIT_USAGE
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Console entry point"""
    load_dotenv()
    try:
        cmd = parse_args(sys.argv[1:] if argv is None else argv)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except click.Abort:
        return EXIT_USAGE

    logging.basicConfig(
        level=logging.DEBUG if cmd.verbose else logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    return execute(cmd)


if __name__ == "__main__":
    sys.exit(main())
