"""
Command-line interface.

Commands write plain files (clouds, graph dumps, checkpoints and CSVs) into
the output directory. Every failure exits with status 1 and a single
``Error: <reason>`` line.
"""

import functools
import logging
import os
from typing import List, Optional, Sequence

import click

from config import get_config

from .errors import SpsegError
from .logging import setup_logging
from .manifest import PipelineConfig, RunManifest, load_pipeline_config
from .partition import write_graph
from .pcio import SceneSpec, gen_synthetic, load_cloud, sample_supervision, save_cloud
from .propagate import write_events_csv
from .trainkit import (Scene, build_scene, evaluate_scenes, load_model, run_ablation, save_model, train,
                       write_ablation_csv, write_metrics_csv, write_run_log, write_set_sizes_csv)

logger = logging.getLogger(__name__)


def handle_errors(f):
    """Turn domain and I/O failures into a one-line click error."""
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except SpsegError as e:
            logger.error(f"{f.__name__} failed: {e.reason}")
            raise click.ClickException(e.reason)
        except OSError as e:
            reason = f"{e.strerror or e}: {e.filename}" if e.filename else str(e)
            logger.error(f"{f.__name__} failed: {reason}")
            raise click.ClickException(reason)
    return wrapper


def _pipeline(config_path: Optional[str], seed: Optional[int],
              rate: Optional[float]) -> PipelineConfig:
    overrides = {}
    if seed is not None:
        overrides['seed'] = seed
    if rate is not None:
        overrides['rate'] = rate
    return load_pipeline_config(config_path, overrides)


def _manifest(ctx: click.Context, config_path, clouds, out, seed) -> RunManifest:
    manifest = RunManifest(config_path=config_path, cloud_paths=list(clouds),
                           output_dir=out or ctx.obj['config'].OUTPUT_DIR, seed=seed)
    manifest.prepare_output()
    return manifest


def _load_scenes(paths: Sequence[str], pipeline: PipelineConfig, seed_offset: int = 0) -> List[Scene]:
    scenes = []
    for k, path in enumerate(paths):
        cloud = load_cloud(path)
        mask = sample_supervision(cloud, pipeline.rate, pipeline.seed + seed_offset + k)
        scenes.append(build_scene(cloud, mask, pipeline.partition_params(), pipeline.k_neighbors,
                                  name=os.path.basename(path)))
    return scenes


def _echo_header(pipeline: PipelineConfig) -> None:
    for key, value in pipeline.header().items():
        logger.info(f"config {key}={value}")


config_option = click.option('--config', 'config_path', type=click.Path(dir_okay=False),
                             default=None, help='Flat key=value pipeline config file.')
seed_option = click.option('--seed', type=click.IntRange(min=0), default=None,
                           help='Overrides the config seed.')
rate_option = click.option('--rate', type=click.FloatRange(min=0.0, max=1.0, min_open=True),
                           default=None, help='Share of points annotated per cloud.')
out_option = click.option('--out', type=click.Path(file_okay=False), default=None,
                          help='Output directory.')


@click.group()
@click.option('--log-level', default=None, help='Overrides the environment log level.')
@click.pass_context
def cli(ctx: click.Context, log_level: Optional[str]):
    """Superpoint segmentation from sparse point annotations."""
    env_config = get_config()
    setup_logging(log_level or env_config.LOG_LEVEL, env_config.LOG_DIR)
    ctx.ensure_object(dict)
    ctx.obj['config'] = env_config


@cli.command()
@click.option('--count', type=click.IntRange(min=1), default=1, help='Number of scenes.')
@click.option('--classes', type=click.IntRange(min=2), default=4, help='Number of classes.')
@click.option('--objects', type=click.IntRange(min=0), default=6, help='Objects per scene.')
@click.option('--points-per-object', type=click.IntRange(min=10), default=200)
@seed_option
@out_option
@click.pass_context
@handle_errors
def gen(ctx, count, classes, objects, points_per_object, seed, out):
    """Write synthetic scenes as scene_<k>.txt."""
    seed = ctx.obj['config'].DEFAULT_SEED if seed is None else seed
    manifest = _manifest(ctx, None, [], out, seed)
    spec = SceneSpec(num_objects=objects, num_classes=classes, points_per_object=points_per_object)
    for k in range(count):
        path = manifest.output_path(f"scene_{k}.txt")
        save_cloud(gen_synthetic(spec, seed + k), path)
        click.echo(path)


@cli.command()
@click.argument('clouds', nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@config_option
@seed_option
@rate_option
@out_option
@click.pass_context
@handle_errors
def partition(ctx, clouds, config_path, seed, rate, out):
    """Write a superpoint graph dump per cloud."""
    pipeline = _pipeline(config_path, seed, rate)
    manifest = _manifest(ctx, config_path, clouds, out, pipeline.seed)
    for scene, path in zip(_load_scenes(clouds, pipeline), clouds):
        stem = os.path.splitext(os.path.basename(path))[0]
        target = manifest.output_path(f"{stem}.graph")
        write_graph(scene.graph, target, scene.labels)
        click.echo(f"{target} superpoints={scene.num_superpoints} edges={len(scene.graph.edges)} "
                   f"supervised={scene.labels.num_supervised}")


@cli.command(name='train')
@click.argument('clouds', nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@config_option
@seed_option
@rate_option
@out_option
@click.pass_context
@handle_errors
def train_cmd(ctx, clouds, config_path, seed, rate, out):
    """Train and write model.ckpt, run_log.csv, events.csv, set_sizes.csv and metrics.csv."""
    pipeline = _pipeline(config_path, seed, rate)
    manifest = _manifest(ctx, config_path, clouds, out, pipeline.seed)
    _echo_header(pipeline)
    scenes = _load_scenes(clouds, pipeline)
    model, log = train(scenes, pipeline.train_config(ctx.obj['config'].LOG_EVERY))

    save_model(model, manifest.output_path('model.ckpt'), {'seed': pipeline.seed})
    write_run_log(log, manifest.output_path('run_log.csv'), pipeline.header())
    write_events_csv(log.events, manifest.output_path('events.csv'))
    write_set_sizes_csv(log, manifest.output_path('set_sizes.csv'))
    if log.last is not None:
        last = log.last
        click.echo(f"epochs={len(log.records)} OA={last.oa:.4f} mIoU={last.miou:.4f} mAcc={last.macc:.4f}")
    metrics = evaluate_scenes([s for s in scenes if s.labels.num_supervised], model, log.states)
    write_metrics_csv(metrics, manifest.output_path('metrics.csv'))


@cli.command(name='eval')
@click.argument('checkpoint', type=click.Path(exists=True, dir_okay=False))
@click.argument('clouds', nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@config_option
@out_option
@click.pass_context
@handle_errors
def eval_cmd(ctx, checkpoint, clouds, config_path, out):
    """Print point-level metrics of a checkpoint and write metrics.csv."""
    pipeline = _pipeline(config_path, None, None)
    manifest = _manifest(ctx, config_path, clouds, out, pipeline.seed)
    model = load_model(checkpoint)
    scenes = _load_scenes(clouds, pipeline)
    metrics = evaluate_scenes(scenes, model)
    for name, value in metrics.as_rows():
        click.echo(f"{name}={value:.6f}")
    write_metrics_csv(metrics, manifest.output_path('metrics.csv'))


@cli.command()
@click.argument('clouds', nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@config_option
@seed_option
@rate_option
@out_option
@click.pass_context
@handle_errors
def trace(ctx, clouds, config_path, seed, rate, out):
    """Train and write only the propagation events and set-size growth curves."""
    pipeline = _pipeline(config_path, seed, rate)
    manifest = _manifest(ctx, config_path, clouds, out, pipeline.seed)
    _, log = train(_load_scenes(clouds, pipeline), pipeline.train_config(ctx.obj['config'].LOG_EVERY))
    count = write_events_csv(log.events, manifest.output_path('events.csv'))
    write_set_sizes_csv(log, manifest.output_path('set_sizes.csv'))
    click.echo(f"events={count} epochs={len(log.records)}")


@cli.command()
@click.argument('clouds', nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--test', 'test_clouds', multiple=True, required=True,
              type=click.Path(exists=True, dir_okay=False), help='Held-out cloud; repeatable.')
@click.option('--seeds', default='0,1,2,3,4', help='Comma-separated training seeds.')
@config_option
@rate_option
@out_option
@click.pass_context
@handle_errors
def ablate(ctx, clouds, test_clouds, seeds, config_path, rate, out):
    """Train each component variant per seed and write ablation.csv."""
    try:
        seed_list = [int(s) for s in seeds.split(',') if s.strip()]
    except ValueError:
        raise click.BadParameter(f"not a comma-separated list of integers: {seeds}", param_hint='--seeds')
    pipeline = _pipeline(config_path, None, rate)
    manifest = _manifest(ctx, config_path, clouds, out, pipeline.seed)
    train_scenes = _load_scenes(clouds, pipeline)
    test_scenes = _load_scenes(test_clouds, pipeline, seed_offset=len(clouds))
    rows = run_ablation(train_scenes, test_scenes, pipeline.train_config(ctx.obj['config'].LOG_EVERY), seed_list)
    write_ablation_csv(rows, manifest.output_path('ablation.csv'))
    for row in rows:
        click.echo(f"seed={row.seed} variant={row.variant} mIoU={row.miou:.4f}")


def main():
    cli(obj={})
