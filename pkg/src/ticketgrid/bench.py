"""Measurement harnesses: distributed 1-NN classification, monolithic CNN
training throughput, and distributed-training scaling.

Every harness reports rates and ratios, never asserts wall-clock targets;
absolute numbers are hardware-dependent. Distributed runs always verify
result equivalence against the sequential computation first.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .coordinator import Coordinator, CoordinatorConfig, CoordinatorServer
from .datasets import (
    DatasetHandle,
    labels_to_bytes,
    load_dataset,
    nearest_neighbor_labels,
    synthetic_dataset,
    to_f32le,
)
from .disttrain import DistTrainConfig, run_http, write_metrics_csv
from .framework import Project
from .nn.network import cifar_cnn
from .tasks import builtin_descriptor
from .worker import WorkerPool


@dataclass
class BenchReport:
    name: str
    columns: list[str]
    rows: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def table(self) -> str:
        widths = {
            c: max(len(c), *(len(_cell(r.get(c))) for r in self.rows)) if self.rows else len(c)
            for c in self.columns
        }
        lines = [self.name]
        lines += [f"  {note}" for note in self.notes]
        lines.append("  ".join(c.ljust(widths[c]) for c in self.columns))
        for r in self.rows:
            lines.append("  ".join(_cell(r.get(c)).ljust(widths[c]) for c in self.columns))
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.columns, extrasaction="ignore")
            writer.writeheader()
            writer.writerows(self.rows)


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.3f}"
    return str(value)


def _wait_for_clients(coordinator: Coordinator, n: int, timeout: float = 60.0) -> None:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if len(coordinator.sessions) >= n:
            return
        time.sleep(0.05)
    raise TimeoutError(f"only {len(coordinator.sessions)} of {n} workers connected")


# -- distributed 1-NN ---------------------------------------------------------------


def register_knn_resources(
    coordinator: Coordinator, train: DatasetHandle, test: DatasetHandle
) -> None:
    dim = int(np.prod(train.sample_shape))
    meta = {"train_count": train.count, "test_count": test.count, "dim": dim}
    coordinator.register_resource_bytes("knn-meta", json.dumps(meta).encode("utf-8"))
    coordinator.register_resource_bytes("knn-train-images", to_f32le(train.flat()))
    coordinator.register_resource_bytes("knn-train-labels", labels_to_bytes(train.labels))
    coordinator.register_resource_bytes("knn-test-images", to_f32le(test.flat()))


def distribute_1nn(
    train: DatasetHandle,
    test: DatasetHandle,
    workers: int,
    chunk: int = 50,
    timeout: float = 600.0,
) -> tuple[np.ndarray, float]:
    """Classify the test set over ``workers`` worker processes. Returns the
    predicted labels (test order) and the elapsed seconds, timed from the
    moment all workers are connected."""
    server = CoordinatorServer(Coordinator(CoordinatorConfig())).start()
    try:
        register_knn_resources(server.coordinator, train, test)
        with WorkerPool(server.ws_url, workers):
            _wait_for_clients(server.coordinator, workers)
            project = Project("bench-1nn", server.coordinator.svc)
            handle = project.create_task(builtin_descriptor("knn_chunk", chunking=chunk))
            t0 = time.perf_counter()
            handle.calculate(list(range(test.count)))
            results = handle.block(timeout=timeout)
            elapsed = time.perf_counter() - t0
        labels = np.array([r["label"] for r in results], dtype=np.int64)
        return labels, elapsed
    finally:
        server.stop()


def bench_1nn(
    clients: list[int],
    dataset: str = "synthetic",
    data_root=None,
    train_count: int = 10_000,
    test_count: int = 1_000,
    chunk: int = 50,
    seed: int = 0,
) -> BenchReport:
    """Sequential baseline, then one distributed run per worker count; every
    run must reproduce the sequential labels exactly."""
    if dataset == "synthetic":
        train = synthetic_dataset(train_count, (1, 28, 28), seed=seed, split="train")
        test = synthetic_dataset(test_count, (1, 28, 28), seed=seed, split="test")
    else:
        train = load_dataset(dataset, root=data_root, split="train").subset(train_count)
        test = load_dataset(dataset, root=data_root, split="test").subset(test_count)

    t0 = time.perf_counter()
    expected = nearest_neighbor_labels(test.flat(), train.flat(), train.labels)
    t_seq = time.perf_counter() - t0

    report = BenchReport(
        name=f"1-NN over {dataset}: {train.count} train / {test.count} test, chunk {chunk}",
        columns=["workers", "elapsed_s", "ratio_vs_k1", "images_per_s", "match"],
        notes=[f"sequential kernel: {t_seq:.3f}s"],
    )
    base: float | None = None
    for k in clients:
        labels, elapsed = distribute_1nn(train, test, k, chunk=chunk)
        match = bool(np.array_equal(labels, expected))
        if base is None and k == 1:
            base = elapsed
        row = {
            "workers": k,
            "elapsed_s": elapsed,
            "ratio_vs_k1": (elapsed / base) if base else None,
            "images_per_s": test.count / elapsed,
            "match": match,
        }
        report.rows.append(row)
        if not match:
            raise AssertionError(f"distributed 1-NN labels diverged at k={k}")
    return report


# -- monolithic training throughput ----------------------------------------------------


def bench_batches_per_min(
    batches: int = 100,
    batch_size: int = 50,
    samples: int = 1_000,
    seed: int = 0,
    curve_out=None,
    eval_count: int = 200,
    eval_every: int | None = None,
) -> BenchReport:
    """Train the CNN monolithically on synthetic data; report batches per
    minute and an error-rate curve on a held-out split."""
    from .disttrain import batch_indices

    train = synthetic_dataset(samples, (3, 32, 32), seed=seed, split="train")
    test = synthetic_dataset(eval_count, (3, 32, 32), seed=seed, split="test")
    net = cifar_cnn(seed=seed)
    eval_every = eval_every or max(1, batches // 20)

    report = BenchReport(
        name=f"monolithic training: {batches} batches of {batch_size}",
        columns=["batch", "loss", "error_rate", "batches_per_min"],
        notes=["shape trace: " + " -> ".join(f"{n}{list(s)}" for n, s in net.shape_trace)],
    )
    stream = batch_indices(train.count, batch_size, seed)
    t0 = time.perf_counter()
    for n in range(1, batches + 1):
        idx = next(stream)
        loss = net.train_step(train.images[idx], train.labels[idx])
        if n % eval_every == 0 or n == batches:
            errors = int(np.sum(net.predict(test.images) != test.labels))
            report.rows.append(
                {
                    "batch": n,
                    "loss": loss,
                    "error_rate": errors / test.count,
                    "batches_per_min": n / ((time.perf_counter() - t0) / 60.0),
                }
            )
    if curve_out:
        report.write_csv(curve_out)
    return report


# -- distributed training scaling ---------------------------------------------------------


def bench_distributed_training(
    clients: list[int],
    batches: int = 20,
    agg_period: int = 1,
    staleness: int = 2,
    batch_size: int = 50,
    samples: int = 500,
    seed: int = 0,
    metrics_out=None,
    baseline: bool = True,
) -> BenchReport:
    """One ticket-scheduled run per worker count, plus an optional monolithic
    baseline row for the k=1 overhead comparison."""
    from .disttrain import batch_indices

    dataset = synthetic_dataset(samples, (3, 32, 32), seed=seed, split="train")
    report = BenchReport(
        name=f"distributed training: {batches} conv rounds of {batch_size}, "
        f"period {agg_period}, staleness {staleness}",
        columns=[
            "workers", "conv_batches_per_min", "fc_updates_per_min",
            "speedup_vs_k1", "discarded", "elapsed_s",
        ],
    )

    if baseline:
        net = cifar_cnn(seed=seed)
        stream = batch_indices(dataset.count, batch_size, seed)
        t0 = time.perf_counter()
        for _ in range(batches):
            idx = next(stream)
            net.train_step(dataset.images[idx], dataset.labels[idx])
        mono = batches / ((time.perf_counter() - t0) / 60.0)
        report.rows.append(
            {"workers": "mono", "conv_batches_per_min": mono, "fc_updates_per_min": mono}
        )

    base_rate: float | None = None
    for k in clients:
        server = CoordinatorServer(Coordinator(CoordinatorConfig())).start()
        try:
            with WorkerPool(server.ws_url, k):
                _wait_for_clients(server.coordinator, k)
                cfg = DistTrainConfig(
                    clients=k,
                    batches=batches,
                    agg_period=agg_period,
                    staleness=staleness,
                    batch_size=batch_size,
                    seed=seed,
                    data_seed=seed,
                )
                result = run_http(cifar_cnn(seed=seed), dataset, cfg, server.coordinator)
        finally:
            server.stop()
        if k == 1:
            base_rate = result.conv_batches_per_min
        report.rows.append(
            {
                "workers": k,
                "conv_batches_per_min": result.conv_batches_per_min,
                "fc_updates_per_min": result.fc_updates_per_min,
                "speedup_vs_k1": (result.conv_batches_per_min / base_rate) if base_rate else None,
                "discarded": result.discarded,
                "elapsed_s": result.elapsed_s,
            }
        )
        if metrics_out:
            write_metrics_csv(metrics_out, result.metrics)
    return report
