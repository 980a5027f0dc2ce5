import json
import logging
import sys
from functools import wraps
from pathlib import Path

import click
import numpy as np

from .channel.csi_file import save_csi
from .config import ExperimentConfig, Settings, load_config
from .errors import InvalidConfigError, SemkbError
from .experiments import VARIANTS, generate_links, prepare_seed, run_experiment, train_variant, variant_of
from .lmkb.cdg import save_checkpoint
from .utils.serializers import FORMATS, emit_results

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def _exit_on_error(f):
    @wraps(f)
    def decorated(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except InvalidConfigError as e:
            click.echo(f"❌ Configuration error: {e}", err=True)
            sys.exit(2)
        except (SemkbError, OSError) as e:
            click.echo(f"❌ {type(e).__name__}: {e}", err=True)
            sys.exit(3)
    return decorated


def _load(config_path) -> ExperimentConfig:
    return load_config(config_path) if config_path else ExperimentConfig()


def _dump_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, sort_keys=True, indent=2), encoding="utf-8")
    return path


config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                             help="Experiment config (TOML); built-in defaults when omitted.")
seed_option = click.option("--seed", type=click.IntRange(min=0), default=None, help="Run a single seed.")
out_option = click.option("--out", "out_dir", type=click.Path(file_okay=False), default="results", show_default=True)
format_option = click.option("--format", "formats", type=click.Choice(FORMATS), multiple=True,
                             help="Metric file format(s); both when omitted.")


@click.group()
@click.option("--verbose", is_flag=True, help="Debug logging.")
def cli(verbose):
    """Knowledge-base-assisted MIMO semantic transmission simulator"""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT)


@cli.command("gen-csi")
@config_option
@seed_option
@out_option
@click.option("--user", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--length", type=click.IntRange(min=1), default=None, help="Samples; t_his + t_pre when omitted.")
@_exit_on_error
def gen_csi(config_path, seed, out_dir, user, length):
    """Generate one user's channel trace and save it as a CSIF file"""
    cfg = _load(config_path)
    seed = seed or 0
    trace = generate_links(cfg, seed, cfg.channel.model_tag, user, 1, length)[0].trace
    path = save_csi(trace, Path(out_dir) / f"csi_seed{seed}_user{user}.csif")
    click.echo(f"✅ Wrote {len(trace)} x {trace.n_r}x{trace.n_t} samples to {path}")


@cli.command("train-cdg")
@config_option
@seed_option
@out_option
@_exit_on_error
def train_cdg_cmd(config_path, seed, out_dir):
    """Train the CSI predictor for one seed and save a checkpoint"""
    cfg = _load(config_path)
    seed = seed or 0
    art = prepare_seed(cfg, seed, progress=True)
    out = Path(out_dir)
    ckpt = save_checkpoint(art.cdg_model, out / f"cdg_seed{seed}.ckpt")
    _dump_json(out / f"cdg_losses_seed{seed}.json", {"lm": art.lm_losses, "cdg": art.cdg_losses})
    predicted = float(np.mean([u.nmse for u in art.user_rows]))
    stale = float(np.mean([u.stale_nmse for u in art.user_rows]))
    click.echo(f"✅ CDG checkpoint saved to {ckpt}")
    click.echo(f"   evaluation users: predicted NMSE {predicted:.4f}, stale NMSE {stale:.4f}")


@cli.command("train-cdfc")
@config_option
@seed_option
@out_option
@_exit_on_error
def train_cdfc_cmd(config_path, seed, out_dir):
    """Train the codec for the configured variant and report the loss history"""
    cfg = _load(config_path)
    seed = seed or 0
    variant = variant_of(cfg)
    art = prepare_seed(cfg, seed, progress=True)
    _, history = train_variant(cfg, art, variant, Settings.from_env(), progress=True)
    _dump_json(Path(out_dir) / f"cdfc_history_{variant}_seed{seed}.json", history)
    if history:
        last = history[-1]
        click.echo(f"✅ {variant}: final loss {last['loss']:.4f}, filter accept rate {last['accept_rate']:.2f}")
    else:
        click.echo(f"✅ {variant}: no training epochs configured")


def _run_and_emit(cfg, out_dir, formats, **kwargs):
    record = run_experiment(cfg, settings=Settings.from_env(), progress=True, **kwargs)
    paths = emit_results(record, out_dir, formats or FORMATS)
    click.echo(f"✅ {len(record.rows)} metric rows written to {Path(out_dir)} ({len(paths)} files)")
    return record


@cli.command("eval")
@config_option
@seed_option
@out_option
@format_option
@_exit_on_error
def eval_cmd(config_path, seed, out_dir, formats):
    """Train and evaluate the configured variant over the SNR grid for one seed"""
    cfg = _load(config_path)
    _run_and_emit(cfg, out_dir, formats, seeds=[seed or 0])


@cli.command("sweep")
@config_option
@seed_option
@out_option
@format_option
@click.option("--axis", type=click.Choice(["snr", "feedback"]), default="snr", show_default=True)
@_exit_on_error
def sweep_cmd(config_path, seed, out_dir, formats, axis):
    """Sweep SNR or feedback bits over the configured seeds"""
    cfg = _load(config_path)
    _run_and_emit(cfg, out_dir, formats, seeds=None if seed is None else [seed], axis=axis)


@cli.command("ablate")
@config_option
@seed_option
@out_option
@format_option
@_exit_on_error
def ablate_cmd(config_path, seed, out_dir, formats):
    """Run full, no_sdg, no_cdg and no_both over the SNR grid"""
    cfg = _load(config_path)
    _run_and_emit(cfg, out_dir, formats, seeds=None if seed is None else [seed], variants=list(VARIANTS))


if __name__ == "__main__":
    cli()
