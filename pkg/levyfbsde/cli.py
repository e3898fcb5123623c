"""
Command-line entry point: `levyfbsde <command> [options]`.
Exit codes: 0 pass, 1 failed criterion, 2 config or domain error, 3 underpowered.
"""
import json
import logging
import sys
import time
from pathlib import Path
from typing import Callable, Dict, Optional

import click

from levyfbsde import runner
from levyfbsde.config import Config
from levyfbsde.errors import ConfigError, DomainError, LevyFbsdeError
from levyfbsde.persistence import write_json
from levyfbsde.schemas import default_config, load_config

logger = logging.getLogger(__name__)


def _load(config_path: Optional[str], seed: Optional[int], paths: Optional[int]) -> Dict:
    cfg = load_config(config_path) if config_path else default_config(seed or 0)
    if seed is not None or paths is not None:
        cfg = dict(cfg)
        if seed is not None:
            cfg['seed'] = seed
        if paths is not None:
            cfg['estimator'] = dict(cfg['estimator'], n_paths=paths)
        cfg = load_config(cfg)
    return cfg


def _out_dir(out: Optional[str], cfg: Dict, command: str) -> Path:
    path = Path(out or cfg.get('output_dir') or Path(Config.OUTPUT_DIR) / command)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _execute(ctx: click.Context, command: str, fn: Callable, **kwargs):
    """Load config, run fn(cfg, out_dir, **kwargs), write config + manifest, exit with its code"""
    opts = ctx.obj
    started = time.time()
    try:
        cfg = _load(opts['config'], opts['seed'], opts['paths'])
        out_dir = _out_dir(opts['out'], cfg, command)
        write_json(out_dir / 'config.json', cfg)
        code, result = fn(cfg, out_dir, **kwargs)
    except ConfigError as err:
        click.echo(f"config error: {json.dumps(err.messages, indent=2, default=str)}", err=True)
        sys.exit(runner.EXIT_CONFIG)
    except DomainError as err:
        click.echo(f"domain error: {err}", err=True)
        sys.exit(runner.EXIT_CONFIG)
    except LevyFbsdeError as err:
        logger.exception("%s failed", command)
        click.echo(f"{type(err).__name__}: {err}", err=True)
        sys.exit(runner.EXIT_FAILED)

    criteria = result.get('criteria') or [{'criterion': command,
                                           'status': 'pass' if code == runner.EXIT_OK else 'fail'}]
    manifest = runner.finish_run(out_dir, cfg, started, criteria, result.get('artifacts', []))
    for entry in criteria:
        mark = '✓' if entry['status'] in ('pass', 'skipped') else '✗'
        click.echo(f"{mark} {entry['criterion']}: {entry['status']}"
                   + (f"  {entry['detail']}" if entry.get('detail') else ''))
    click.echo(f"manifest: {manifest}")
    sys.exit(code)


@click.group()
@click.option('--config', 'config', type=click.Path(dir_okay=False), default=None,
              help='Experiment config (JSON). Defaults to the built-in config.')
@click.option('--seed', type=int, default=None, help='Override the config seed.')
@click.option('--out', type=click.Path(file_okay=False), default=None, help='Output directory.')
@click.option('--paths', type=int, default=None, help='Override the Monte Carlo path count.')
@click.option('--threads', type=int, default=None, help='Worker threads (default LEVYFBSDE_THREADS).')
@click.option('--log-level', default=None, help='Logging level (default LEVYFBSDE_LOG_LEVEL).')
@click.pass_context
def main(ctx, config, seed, out, paths, threads, log_level):
    """FBSDEs driven by stable-like Poisson random measures"""
    Config.configure_logging(log_level.upper() if log_level else None)
    ctx.obj = {'config': config, 'seed': seed, 'out': out, 'paths': paths, 'threads': threads}


@main.command('check-measure')
@click.pass_context
def check_measure(ctx):
    """Run the assumption checkers on the configured measure and model."""
    _execute(ctx, 'check-measure', runner.run_check_measure)


@main.command('simulate-forward')
@click.option('--no-dump', is_flag=True, help='Skip the per-path CSV dump.')
@click.pass_context
def simulate_forward(ctx, no_dump):
    """Simulate forward paths and report moment diagnostics."""
    _execute(ctx, 'simulate-forward', runner.run_simulate_forward, dump=not no_dump)


@main.command('solve-pde')
@click.pass_context
def solve_pde(ctx):
    """Solve for the value function (Picard), with the 1D deterministic oracle when available."""
    _execute(ctx, 'solve-pde', runner.run_solve_pde)


@main.command('estimate-gradient')
@click.pass_context
def estimate_gradient(ctx):
    """Estimate grad v(t, x) h by BEL, finite differences and the variational equation."""
    _execute(ctx, 'estimate-gradient', runner.run_estimate_gradient)


@main.command('scaling')
@click.pass_context
def scaling(ctx):
    """Weight moment and gradient scaling against T - t."""
    _execute(ctx, 'scaling', runner.run_scaling)


@main.command('verify')
@click.option('--only', multiple=True, help='Run only these criterion ids (e.g. --only C01 --only C03).')
@click.pass_context
def verify(ctx, only):
    """Run every acceptance criterion."""
    _execute(ctx, 'verify', runner.run_verify, n_paths=ctx.obj['paths'], threads=ctx.obj['threads'],
             only=list(only) or None)


@main.command('report')
@click.argument('run_dir', type=click.Path(exists=True, file_okay=False))
def report(run_dir):
    """Summarize a finished run directory from its manifest."""
    try:
        summary = runner.summarize_run(Path(run_dir))
    except (OSError, KeyError, json.JSONDecodeError) as err:
        click.echo(f"cannot read manifest in {run_dir}: {err}", err=True)
        sys.exit(runner.EXIT_CONFIG)
    click.echo(f"config {summary['config_hash'][:12]}  code {summary['code_version']}  "
               f"{summary['wall_time_s']}s")
    for name, status in summary['criteria']:
        mark = '✓' if status in ('pass', 'skipped') else '✗'
        click.echo(f"  {mark} {name}: {status}")
    click.echo(f"{len(summary['artifacts'])} artifacts; passed={summary['passed']}")
    sys.exit(runner.EXIT_OK if summary['passed'] else runner.EXIT_FAILED)


if __name__ == '__main__':
    main()
