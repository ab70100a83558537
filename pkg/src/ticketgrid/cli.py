"""Command line entry points."""

from __future__ import annotations

import logging
import sys

import click


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def _parse_bind(bind: str) -> tuple[str, int]:
    host, _, port = bind.rpartition(":")
    if not host or not port.isdigit():
        raise click.BadParameter(f"expected host:port, got {bind!r}")
    return host, int(port)


@click.command("coordinator")
@click.option("--bind", default="127.0.0.1:8765", show_default=True, help="host:port to listen on")
@click.option("--resource-root", type=click.Path(exists=True, file_okay=False), default=None,
              help="directory served under /resource/<name>)")
@click.option("--journal", "journal_path", type=click.Path(), default=None,
              help="append-only scheduler journal (enables crash recovery)")
@click.option("--redist-timeout", default=300.0, show_default=True,
              help="seconds before a distributed ticket becomes eligible again")
@click.option("--redist-interval", default=10.0, show_default=True,
              help="minimum seconds between redistributions of one ticket")
@click.option("--max-errors", type=int, default=None,
              help="error reports before a ticket fails permanently (default: retry forever)")
@click.option("--admin-token", default=None, envvar="TICKETGRID_ADMIN_TOKEN",
              help="required in X-Admin-Token for POST /console")
@click.option("--static-dir", type=click.Path(exists=True, file_okay=False), default=None,
              help="serve this directory at / (browser worker bundle)")
@click.option("-v", "--verbose", is_flag=True)
def coordinator_cli(bind, resource_root, journal_path, redist_timeout, redist_interval,
                    max_errors, admin_token, static_dir, verbose):
    """Run the ticket coordinator until interrupted."""
    from .coordinator import CoordinatorConfig, serve
    from .scheduler import SchedulerConfig

    _setup_logging(verbose)
    host, port = _parse_bind(bind)
    cfg = CoordinatorConfig(
        host=host,
        port=port,
        resource_root=resource_root,
        scheduler=SchedulerConfig(
            redistribution_timeout=redist_timeout,
            min_redistribution_interval=redist_interval,
            persistence_path=journal_path,
            max_errors=max_errors,
        ),
        admin_token=admin_token,
        static_dir=static_dir,
    )
    serve(cfg)


@click.command("worker")
@click.option("--endpoint", required=True, help="coordinator WebSocket URL, e.g. ws://host:port/distributor")
@click.option("--cache-mb", default=256, show_default=True, help="resource cache capacity in MiB")
@click.option("--restart-on-error", is_flag=True, help="drop caches and reconnect after a task failure")
@click.option("--worker-id", default=None, help="proposed worker id (coordinator may reassign)")
@click.option("-v", "--verbose", is_flag=True)
def worker_cli(endpoint, cache_mb, restart_on_error, worker_id, verbose):
    """Run one worker client until stopped."""
    from .worker import run_worker

    _setup_logging(verbose)
    stats = run_worker(
        endpoint,
        cache_capacity=cache_mb * 2**20,
        restart_on_error=restart_on_error,
        worker_id=worker_id,
    )
    click.echo(f"worker done: {stats}")


@click.group("framework")
def framework_cli():
    """Project-level calculation drivers."""


@framework_cli.command("primes")
@click.option("--max", "max_candidate", default=10_000, show_default=True)
@click.option("--workers", default=2, show_default=True)
@click.option("--chunking", default=1, show_default=True)
@click.option("--mode", type=click.Choice(["thread", "process"]), default="thread", show_default=True)
def framework_primes(max_candidate, workers, chunking, mode):
    """Distribute a primality sweep over local workers and print the count."""
    from .framework import run_prime

    primes = run_prime(max_candidate, workers=workers, chunking=chunking, mode=mode)
    click.echo(f"{len(primes)} primes reported in [1, {max_candidate}]")
    click.echo(f"head: {primes[:10]}")


@click.command("disttrain")
@click.option("--clients", default=1, show_default=True, help="worker processes to launch")
@click.option("--batches", default=20, show_default=True, help="conv rounds to consume")
@click.option("--agg-period", default=1, show_default=True, help="gradient sets per aggregation")
@click.option("--staleness", default=2, show_default=True, help="max snapshot age accepted, in aggregations")
@click.option("--batch-size", default=50, show_default=True)
@click.option("--samples", default=500, show_default=True, help="synthetic training images")
@click.option("--seed", default=0, show_default=True)
@click.option("--metrics-out", type=click.Path(), default=None, help="write per-round metrics CSV here")
@click.option("-v", "--verbose", is_flag=True)
def disttrain_cli(clients, batches, agg_period, staleness, batch_size, samples, seed, metrics_out, verbose):
    """Self-hosted distributed training demo on synthetic data."""
    from .bench import bench_distributed_training

    _setup_logging(verbose)
    report = bench_distributed_training(
        clients=[clients],
        batches=batches,
        agg_period=agg_period,
        staleness=staleness,
        batch_size=batch_size,
        samples=samples,
        seed=seed,
        metrics_out=metrics_out,
    )
    click.echo(report.table())


@click.group("bench")
def bench_cli():
    """Measurement harnesses. Absolute rates are hardware-dependent."""


@bench_cli.command("1nn")
@click.option("--clients", default="1,2", show_default=True, help="comma-separated worker counts")
@click.option("--dataset", type=click.Choice(["synthetic", "mnist"]), default="synthetic", show_default=True)
@click.option("--data-root", type=click.Path(exists=True, file_okay=False), default=None,
              help="directory with the IDX files (mnist only)")
@click.option("--train", "train_count", default=10_000, show_default=True)
@click.option("--test", "test_count", default=1_000, show_default=True)
@click.option("--chunk", default=50, show_default=True, help="test images per ticket")
@click.option("--out", type=click.Path(), default=None, help="write the report CSV here")
def bench_1nn_cmd(clients, dataset, data_root, train_count, test_count, chunk, out):
    """Distributed 1-nearest-neighbor classification throughput."""
    from .bench import bench_1nn

    ks = [int(x) for x in clients.split(",") if x]
    report = bench_1nn(
        clients=ks,
        dataset=dataset,
        data_root=data_root,
        train_count=train_count,
        test_count=test_count,
        chunk=chunk,
    )
    click.echo(report.table())
    if out:
        report.write_csv(out)
        click.echo(f"wrote {out}")


@bench_cli.command("train")
@click.option("--batches", default=100, show_default=True)
@click.option("--batch-size", default=50, show_default=True)
@click.option("--samples", default=1_000, show_default=True, help="synthetic training images")
@click.option("--seed", default=0, show_default=True)
@click.option("--curve-out", type=click.Path(), default=None, help="error-rate curve CSV")
def bench_train_cmd(batches, batch_size, samples, seed, curve_out):
    """Monolithic CNN training throughput (batches per minute)."""
    from .bench import bench_batches_per_min

    report = bench_batches_per_min(
        batches=batches,
        batch_size=batch_size,
        samples=samples,
        seed=seed,
        curve_out=curve_out,
    )
    click.echo(report.table())


@bench_cli.command("dist")
@click.option("--clients", default="1,2", show_default=True, help="comma-separated worker counts")
@click.option("--batches", default=20, show_default=True)
@click.option("--agg-period", default=1, show_default=True)
@click.option("--staleness", default=2, show_default=True)
@click.option("--batch-size", default=50, show_default=True)
@click.option("--samples", default=500, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=click.Path(), default=None)
def bench_dist_cmd(clients, batches, agg_period, staleness, batch_size, samples, seed, out):
    """Distributed training scaling across worker counts."""
    from .bench import bench_distributed_training

    ks = [int(x) for x in clients.split(",") if x]
    report = bench_distributed_training(
        clients=ks,
        batches=batches,
        agg_period=agg_period,
        staleness=staleness,
        batch_size=batch_size,
        samples=samples,
        seed=seed,
    )
    click.echo(report.table())
    if out:
        report.write_csv(out)
        click.echo(f"wrote {out}")


@click.group()
def main():
    """Volunteer-compute ticket distribution and split CNN training."""


main.add_command(coordinator_cli)
main.add_command(worker_cli)
main.add_command(framework_cli)
main.add_command(disttrain_cli)
main.add_command(bench_cli)


if __name__ == "__main__":
    main(prog_name=f"{sys.executable} -m ticketgrid.cli")
