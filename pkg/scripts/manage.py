#!/usr/bin/env python3
"""
Experiment CLI for the FVIN toolkit
Simulate data, train models, score predictions, run MPC grids and audit energy from one config file
"""
import json
import os
import sys
from typing import Any, Callable, Dict, Optional

# Add project root to path for imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import typer

from core.config.experiment import load_experiment_config
from core.exceptions import ExceptionHandler, FvinException
from core.logging import bind_run_context, clear_run_context, get_logger, setup_logging
from services.experiment_service import ExperimentService

app = typer.Typer(help="Forced variational integrator networks: experiment commands", no_args_is_help=True)

ConfigOption = typer.Option(None, "--config", help="Experiment YAML file")
SeedOption = typer.Option(None, "--seed", help="Override the experiment seed")
OutOption = typer.Option(None, "--out", help="Override the output directory")
CheckpointOption = typer.Option(None, "--checkpoint", help="Model checkpoint (JSON)")


def _run(command: str, config: Optional[str], seed: Optional[int], out: Optional[str],
         action: Callable[[ExperimentService], Dict[str, Any]]):
    """Load the config, run one service command and map failures to exit codes"""
    setup_logging()
    logger = get_logger("fvin.cli")
    try:
        experiment = load_experiment_config(config, seed=seed, out=out)
        bind_run_context(command=command, system=experiment.system, variant=experiment.variant,
                         seed=experiment.seed)
        result = action(ExperimentService(experiment))
    except FvinException as e:
        info = ExceptionHandler.describe(e, command)
        logger.error("Command failed", **info)
        typer.echo(f"❌ {command} failed: {e.message}", err=True)
        raise typer.Exit(code=ExceptionHandler.exit_code_for(e))
    except Exception as e:
        ExceptionHandler.describe(e, command)
        typer.echo(f"❌ {command} failed unexpectedly: {e}", err=True)
        raise typer.Exit(code=ExceptionHandler.exit_code_for(e))
    finally:
        clear_run_context()

    summary = {k: v for k, v in result.items() if k != "artifacts"}
    typer.echo(f"✅ {command} wrote {len(result['artifacts'])} artifacts to {result['out_dir']}")
    typer.echo(json.dumps(summary, indent=2, sort_keys=True, default=str))


@app.command("simulate")
def simulate(config: Optional[str] = ConfigOption, seed: Optional[int] = SeedOption,
             out: Optional[str] = OutOption):
    """Write a random-control trajectory dataset as JSON-Lines files"""
    _run("simulate", config, seed, out, lambda service: service.simulate())


@app.command("train")
def train(config: Optional[str] = ConfigOption, seed: Optional[int] = SeedOption,
          out: Optional[str] = OutOption):
    """Train the configured model variant; writes checkpoints and loss.csv"""
    _run("train", config, seed, out, lambda service: service.train())


@app.command("predict")
def predict(config: Optional[str] = ConfigOption, seed: Optional[int] = SeedOption,
            out: Optional[str] = OutOption, checkpoint: Optional[str] = CheckpointOption):
    """Open-loop prediction error curves (forced, zero-control and damping sweeps)"""
    _run("predict", config, seed, out, lambda service: service.predict(checkpoint))


@app.command("mpc")
def mpc(config: Optional[str] = ConfigOption, seed: Optional[int] = SeedOption,
        out: Optional[str] = OutOption, checkpoint: Optional[str] = CheckpointOption):
    """CEM model-predictive control over a grid of initial conditions"""
    _run("mpc", config, seed, out, lambda service: service.mpc(checkpoint))


@app.command("energy-audit")
def energy_audit(config: Optional[str] = ConfigOption, seed: Optional[int] = SeedOption,
                 out: Optional[str] = OutOption, checkpoint: Optional[str] = CheckpointOption):
    """Energy-versus-time series for long unforced rollouts"""
    _run("energy-audit", config, seed, out, lambda service: service.energy_audit(checkpoint))


@app.command("train-with-mpc")
def train_with_mpc(config: Optional[str] = ConfigOption, seed: Optional[int] = SeedOption,
                   out: Optional[str] = OutOption):
    """Grow the dataset with noisy MPC episodes, refitting after each one"""
    _run("train-with-mpc", config, seed, out, lambda service: service.train_with_mpc())


if __name__ == "__main__":
    app()
