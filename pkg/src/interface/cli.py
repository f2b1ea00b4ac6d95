# src/interface/cli.py

import functools
import logging
from typing import Optional

import click
import numpy as np

from ..core.gradients import SingularImplicitJacobian, baseline_bsm, bsm, fd_check, fd_tolerance
from ..core.hamiltonian import StructureTag
from ..core.integrator import NoConvergence, flow, inject, restricted_flow
from ..core.uap import (
    RepairFailed,
    UapError,
    head_apply,
    max_deviation,
    rank_repair,
    to_shallow_sum,
)
from ..data.datasets import BoxDomain, DatasetError, make_annuli, one_hot, sample_dataset
from ..learning.training import (
    DepthSweep,
    NonFiniteLoss,
    Trainer,
    accuracy,
    initialize_head,
    initialize_model,
    sup_error,
)
from ..storage.csv_output import (
    CsvFormatError,
    bsm_frame,
    depth_sweep_frame,
    eval_frame,
    grad_check_frame,
    loss_history_frame,
    rank_repair_frame,
    read_points,
    write_csv,
)
from ..storage.model_file import (
    ModelFile,
    ModelFileError,
    load_model,
    load_shallow_sum,
    save_model,
    save_shallow_sum,
)
from .run_config import ConfigError, RunConfig, load_run_config

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_NON_FINITE = 2
EXIT_BAD_INPUT = 3

DET_TOLERANCE = 1e-9
EQUIVALENCE_TOLERANCE = 1e-11


def setup_logging(level: str = "INFO", quiet: bool = False) -> None:
    logging.basicConfig(
        level=logging.WARNING if quiet else getattr(logging, level.upper(), logging.INFO),
        format=LOG_FORMAT,
        force=True,
    )


def _fail(code: int, error: Exception) -> int:
    message = str(error).splitlines()[0] if str(error) else type(error).__name__
    click.echo(f"error: {message}", err=True)
    return code


def exit_codes(func):
    """Run a command body and turn its outcome into the process exit code."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            code = func(*args, **kwargs) or EXIT_OK
        except (NonFiniteLoss, NoConvergence) as e:
            code = _fail(EXIT_NON_FINITE, e)
        except (RepairFailed, SingularImplicitJacobian) as e:
            code = _fail(EXIT_CHECK_FAILED, e)
        except (ConfigError, ModelFileError, CsvFormatError, DatasetError, UapError, OSError, ValueError) as e:
            code = _fail(EXIT_BAD_INPUT, e)
        click.get_current_context().exit(code)

    return wrapper


def _floats(text: str, name: str, length: Optional[int] = None) -> np.ndarray:
    """Parse a comma-separated list such as '0.5,0.3'."""
    try:
        values = np.array([float(v) for v in text.split(",")], dtype=np.float64)
    except ValueError:
        raise ConfigError(f"--{name} must be comma-separated numbers, got '{text}'")
    if length is not None and values.size != length:
        raise ConfigError(f"--{name} needs {length} values, got {values.size}")
    return values


def _load_config(ctx: click.Context, path: Optional[str], **overrides) -> RunConfig:
    cfg = load_run_config(path, overrides)
    if not ctx.obj.get("quiet"):
        logging.getLogger().setLevel(cfg.log_level.upper())
    return cfg


@click.group()
@click.option("--quiet", is_flag=True, help="Only log warnings and errors.")
@click.pass_context
def cli(ctx: click.Context, quiet: bool):
    """Hamiltonian deep neural networks: training, gradient checks and shallow-sum equivalence."""
    ctx.ensure_object(dict)
    ctx.obj["quiet"] = quiet
    setup_logging(quiet=quiet)


@cli.command()
@click.option("--config", "config_path", type=click.Path(), default=None, help="Run configuration (YAML).")
@click.option("--out", required=True, type=click.Path(), help="Model file to write.")
@click.option("--seed", type=int, default=None)
@click.pass_context
@exit_codes
def init(ctx, config_path, out, seed):
    """Write a freshly initialized model."""
    cfg = _load_config(ctx, config_path, seed=seed)
    model = initialize_model(cfg.n, cfg.depth, cfg.step, cfg.activation_fn(), cfg.structure_tag(),
                             cfg.init_scale, cfg.seed)
    head = initialize_head(cfg.n, cfg.head_outputs, cfg.init_scale, cfg.seed) if cfg.head_outputs else None
    save_model(out, ModelFile(model, head, {"command": "init", "seed": cfg.seed, "init_scale": cfg.init_scale}))
    logger.info(f"Initialized {model.structure.value} model (n={model.n}, N={model.depth}) at {out}")


def _training_data(cfg: RunConfig):
    if cfg.target == "annuli":
        xi, labels = make_annuli(max(cfg.samples // 2, 1), cfg.seed)
        return xi, one_hot(labels, 2), labels
    xi, y = sample_dataset(cfg.domain(), cfg.target_fn(), cfg.samples, cfg.seed)
    return xi, y, None


@cli.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", required=True, type=click.Path(), help="Trained model file.")
@click.option("--history", type=click.Path(), default=None, help="Loss-history CSV (default: <out>.loss.csv).")
@click.option("--seed", type=int, default=None)
@click.option("--samples", type=int, default=None)
@click.pass_context
@exit_codes
def train(ctx, config_path, out, history, seed, samples):
    """Train a model on the configured target."""
    cfg = _load_config(ctx, config_path, seed=seed, samples=samples)
    target = cfg.target_fn()
    if cfg.target == "annuli" and cfg.head_outputs != 2:
        raise ConfigError("The annuli task needs head_outputs: 2")
    if cfg.head_outputs and cfg.head_outputs != target.out_dim:
        raise ConfigError(f"head_outputs={cfg.head_outputs} does not match target dimension {target.out_dim}")

    xi, y, labels = _training_data(cfg)
    model = initialize_model(cfg.n, cfg.depth, cfg.step, cfg.activation_fn(), cfg.structure_tag(),
                             cfg.init_scale, cfg.seed)
    head = initialize_head(cfg.n, cfg.head_outputs, cfg.init_scale, cfg.seed) if cfg.head_outputs else None
    result = Trainer(cfg.train_config()).train(model, xi, y, head)

    if labels is not None:
        logger.info(f"Training accuracy {accuracy(result.model, result.head, xi, labels, cfg.fixed_point()):.4f}")
    elif head is None:
        logger.info(f"Sampled sup error {sup_error(result.model, target, cfg.domain(), cfg=cfg.fixed_point()):.4e}")

    save_model(out, ModelFile(result.model, result.head, {
        "command": "train",
        "seed": cfg.seed,
        "target": cfg.target,
        "iterations": cfg.iterations,
        "best_iteration": result.best_iteration,
        "best_loss": float(result.best_loss),
    }))
    write_csv(history or f"{out}.loss.csv", loss_history_frame(result.loss_history))


@cli.command("eval")
@click.argument("model_path", type=click.Path())
@click.argument("points_path", type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--head", "use_head", is_flag=True, help="Apply the stored output head after the flow.")
@click.pass_context
@exit_codes
def eval_cmd(ctx, model_path, points_path, out, use_head):
    """Evaluate phi on the points of a CSV file."""
    mf = load_model(model_path)
    xi = read_points(points_path, mf.model.n)
    out_values = restricted_flow(mf.model, xi)
    if use_head:
        if mf.head is None:
            raise ModelFileError(f"{model_path} has no output head")
        out_values = head_apply(mf.head, out_values)
    write_csv(out, eval_frame(xi, out_values))


@cli.command("grad-check")
@click.argument("model_path", type=click.Path())
@click.option("--seed", type=int, default=0)
@click.option("--samples", type=int, default=4, help="Number of inputs in the checked batch.")
@click.option("--xi", default=None, help="Single input as comma-separated values (replaces --samples).")
@click.option("--out", required=True, type=click.Path())
@click.pass_context
@exit_codes
def grad_check(ctx, model_path, seed, samples, xi, out):
    """Compare backprop with finite differences."""
    model = load_model(model_path).model
    if xi is not None:
        xi = _floats(xi, "xi", model.n)[None, :]
    else:
        xi = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(samples, model.n))
    report = fd_check(model, xi, seed=seed)
    write_csv(out, grad_check_frame(report))
    tolerance = fd_tolerance(model.activation)
    click.echo(f"max_rel_err={report.max_rel_err:.3e} tolerance={tolerance:.0e} checked={len(report.rows)}")
    if not report.rows:
        logger.error(f"Every sampled coordinate sits next to a kink "
                     f"({len(report.excluded)} excluded), nothing was checked")
        return EXIT_CHECK_FAILED
    if report.max_rel_err > tolerance:
        worst = report.worst
        logger.error(f"Gradient mismatch at parameter {worst.index} {worst.label}: "
                     f"analytic {worst.analytic:.6e}, fd {worst.fd:.6e}")
        return EXIT_CHECK_FAILED


@cli.command("bsm")
@click.argument("model_path", type=click.Path())
@click.option("--xi", default=None, help="Input as comma-separated values (default: drawn from --seed).")
@click.option("--seed", type=int, default=0)
@click.option("--baseline", is_flag=True, help="Report the dissipative forward-Euler network instead.")
@click.option("--out", required=True, type=click.Path())
@click.pass_context
@exit_codes
def bsm_cmd(ctx, model_path, xi, seed, baseline, out):
    """Backward sensitivity matrices along one trajectory."""
    model = load_model(model_path).model
    point = (_floats(xi, "xi", model.n) if xi is not None
             else np.random.default_rng(seed).uniform(-1.0, 1.0, model.n))
    report = baseline_bsm(model, inject(point)) if baseline else bsm(model, flow(model, inject(point)))
    write_csv(out, bsm_frame(report))
    deviation = report.max_det_deviation()
    click.echo(f"max|det-1|={deviation:.3e} sigma_max(N)={report.sigma_extremes[-1][1]:.6e}")
    if not baseline and model.structure is not StructureTag.GENERAL and deviation > DET_TOLERANCE:
        return EXIT_CHECK_FAILED


@cli.command("uap-equiv")
@click.argument("model_path", type=click.Path())
@click.option("--samples", type=int, default=1000)
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(), default=None, help="Also write the shallow sum.")
@click.pass_context
@exit_codes
def uap_equiv(ctx, model_path, samples, seed, out):
    """Max deviation between phi and its shallow-sum rewrite."""
    model = load_model(model_path).model
    g = to_shallow_sum(model)
    points = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(samples, model.n))
    deviation = max_deviation(model, g, points)
    if out:
        save_shallow_sum(out, g, {"command": "uap-equiv", "source": str(model_path)})
    click.echo(f"max_deviation={deviation:.3e}")
    if deviation > EQUIVALENCE_TOLERANCE:
        return EXIT_CHECK_FAILED


@cli.command("rank-repair")
@click.argument("sum_path", type=click.Path())
@click.option("--eps", "eps_tilde", type=float, default=1e-3, show_default=True)
@click.option("--domain", default="-1,1", show_default=True, help="Box bounds 'lo,hi' applied to every axis.")
@click.option("--seed", type=int, default=0)
@click.option("--out", required=True, type=click.Path(), help="Repaired shallow-sum file.")
@click.option("--report", "report_path", type=click.Path(), default=None,
              help="Report CSV (default: <out>.report.csv).")
@click.pass_context
@exit_codes
def rank_repair_cmd(ctx, sum_path, eps_tilde, domain, seed, out, report_path):
    """Make every inner weight matrix of a shallow sum invertible."""
    g = load_shallow_sum(sum_path)
    lo, hi = _floats(domain, "domain", 2)
    report = rank_repair(g, eps_tilde, BoxDomain.cube(g.n, lo, hi), seed)
    save_shallow_sum(out, report.repaired, {"command": "rank-repair", "eps_tilde": eps_tilde, "seed": seed})
    write_csv(report_path or f"{out}.report.csv", rank_repair_frame(report))
    click.echo(f"deficient_terms={len(report.deficient_terms)} "
               f"sampled_sup_deviation={report.sampled_sup_deviation:.3e}")


@cli.command("depth-sweep")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--samples", type=int, default=None)
@click.pass_context
@exit_codes
def depth_sweep_cmd(ctx, config_path, out, seed, samples):
    """Sup error against depth, with the 2^{n/2} C_f / sqrt(N) bound."""
    cfg = _load_config(ctx, config_path, seed=seed, samples=samples)
    sweep = DepthSweep(cfg.target_fn(), cfg.domain(), cfg.activation_fn(), cfg.sweep_depths,
                       cfg.train_config(), seeds=cfg.sweep_seeds, samples=cfg.samples,
                       horizon=cfg.horizon, use_quadrature=cfg.estimate_cf)
    result = sweep.run()
    write_csv(out, depth_sweep_frame(result))
    click.echo(f"slope={result.slope:.4f} cf={result.cf:.6g} cf_source={result.cf_source} "
               f"grid_points={result.grid_points} gaps={len(result.gaps)}")
