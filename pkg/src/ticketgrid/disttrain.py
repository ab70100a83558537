"""Hybrid distributed training: workers data-parallel-train the conv stack
while the server trains the dense head concurrently.

The exchange at the conv/head cut is the whole protocol: workers send
feature activations (batch x feature-dim) up, the server answers with
feature gradients, and conv gradient sets flow to an aggregator that
averages them, applies one AdaGrad update to the master conv parameters and
publishes a new versioned snapshot. Feature traffic is proportional to the
batch size, never to the conv parameter count.

Two drivers share the same primitives:

* ``run_local`` - an in-process lockstep simulation (all payloads still pass
  through the wire codec, so byte accounting and float behavior match the
  networked path bit for bit). With one worker, period 1 and staleness 0 it
  reproduces ``Network.train_step`` exactly.
* ``run_http`` - the real stack: conv rounds ride the ticket scheduler as
  ordinary tasks, snapshots are immutable named resources discovered through
  ``POST /snapshot``, and features move over ``POST /feature``.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
from fastapi import Request

from .datasets import DatasetHandle, from_f32le, labels_from_bytes, to_f32le
from .nn.model_io import decode_f32, encode_f32
from .nn.network import LayerSpec, Network
from .protocol import TaskDescriptor
from .tasks import TaskContext, TaskRegistry, canonical_json, definition_hash

log = logging.getLogger(__name__)

SNAPSHOT_PREFIX = "convsnap-v"
FEATURE_PATH = "/feature"
SNAPSHOT_PATH = "/snapshot"
META_RESOURCE = "dist-meta"
IMAGES_RESOURCE = "dist-train-images"
LABELS_RESOURCE = "dist-train-labels"


class StaleSnapshotError(Exception):
    pass


# -- wire records -----------------------------------------------------------------


@dataclass
class ConvSnapshot:
    """Immutable versioned copy of the conv-part parameters."""

    version: int
    params: dict[str, dict]  # key -> {"shape": [...], "data": base64 f32le}

    @property
    def resource_name(self) -> str:
        return f"{SNAPSHOT_PREFIX}{self.version}"

    @classmethod
    def from_network(cls, net: Network, version: int) -> "ConvSnapshot":
        params = {
            key: {"shape": list(arr.shape), "data": encode_f32(arr)}
            for key, arr in net.conv_param_arrays().items()
        }
        return cls(version, params)

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            key: decode_f32(entry["data"], tuple(entry["shape"]))
            for key, entry in self.params.items()
        }

    def to_bytes(self) -> bytes:
        return canonical_json({"version": self.version, "params": self.params}).encode("utf-8")

    @classmethod
    def from_bytes(cls, data: bytes) -> "ConvSnapshot":
        doc = json.loads(data)
        return cls(int(doc["version"]), doc["params"])


@dataclass
class FeatureBatch:
    version: int  # snapshot the features were computed with
    seq: int  # batch sequence number
    worker_id: str
    features: np.ndarray  # (B, D) float32
    labels: np.ndarray  # (B,) int

    def to_wire(self) -> dict:
        return {
            "version": self.version,
            "seq": self.seq,
            "worker_id": self.worker_id,
            "shape": list(self.features.shape),
            "features": encode_f32(self.features),
            "labels": [int(y) for y in self.labels],
        }

    @classmethod
    def from_wire(cls, doc: dict) -> "FeatureBatch":
        shape = tuple(doc["shape"])
        return cls(
            int(doc["version"]),
            int(doc["seq"]),
            doc["worker_id"],
            decode_f32(doc["features"], shape),
            np.asarray(doc["labels"], dtype=np.int64),
        )


@dataclass
class FeatureGradBatch:
    seq: int
    dfeatures: np.ndarray  # (B, D) float32, aligned 1:1 with the FeatureBatch
    loss: float

    def to_wire(self) -> dict:
        return {
            "seq": self.seq,
            "shape": list(self.dfeatures.shape),
            "dfeatures": encode_f32(self.dfeatures),
            "loss": self.loss,
        }

    @classmethod
    def from_wire(cls, doc: dict) -> "FeatureGradBatch":
        return cls(
            int(doc["seq"]),
            decode_f32(doc["dfeatures"], tuple(doc["shape"])),
            float(doc["loss"]),
        )


def encode_grads(grads: dict[str, np.ndarray]) -> dict[str, dict]:
    return {k: {"shape": list(g.shape), "data": encode_f32(g)} for k, g in grads.items()}


def decode_grads(doc: dict[str, dict]) -> dict[str, np.ndarray]:
    return {k: decode_f32(e["data"], tuple(e["shape"])) for k, e in doc.items()}


@dataclass
class WireStats:
    """Instrumented byte counters, one bucket per traffic category."""

    feature_up: int = 0  # FeatureBatch payloads, worker -> server
    feature_down: int = 0  # FeatureGradBatch payloads, server -> worker
    snapshot_bytes: int = 0  # published snapshots
    grad_bytes: int = 0  # conv gradient sets, worker -> aggregator
    rounds: int = 0  # accepted rounds

    def feature_bytes_per_round(self) -> float:
        return (self.feature_up + self.feature_down) / max(1, self.rounds)


# -- server primitives ---------------------------------------------------------------


def server_fc_step(fb: FeatureBatch, model: Network) -> FeatureGradBatch:
    """Head forward/backward on a feature batch; updates the head parameters
    in place and returns the per-sample feature gradients."""
    loss, dfeats = model.head_train_step(fb.features, fb.labels)
    return FeatureGradBatch(fb.seq, dfeats.reshape(len(fb.labels), -1), loss)


class FcTrainer:
    """Single-writer owner of the head parameters. ``current_version`` is
    supplied by the aggregator; feature batches older than ``staleness``
    aggregation rounds are rejected."""

    def __init__(self, model: Network, staleness: int, current_version: Callable[[], int]):
        self.model = model
        self.staleness = staleness
        self.current_version = current_version
        self.fc_updates = 0
        self.losses: list[float] = []
        self._lock = threading.Lock()

    def process(self, fb: FeatureBatch) -> FeatureGradBatch | None:
        """FeatureGradBatch, or None when the batch is too stale."""
        if fb.version < self.current_version() - self.staleness:
            return None
        with self._lock:
            out = server_fc_step(fb, self.model)
            self.fc_updates += 1
            self.losses.append(out.loss)
        return out


def aggregate_conv(
    grad_sets: list[dict[str, np.ndarray]], master: Network, version: int
) -> ConvSnapshot:
    """Unweighted average of the gradient sets, one AdaGrad update on the
    master conv parameters, and a version+1 snapshot."""
    if not grad_sets:
        raise ValueError("aggregate_conv needs at least one gradient set")
    keys = set(grad_sets[0])
    for gs in grad_sets[1:]:
        if set(gs) != keys:
            raise ValueError("gradient sets disagree on parameter keys")
    avg = {key: np.mean([gs[key] for gs in grad_sets], axis=0) for key in grad_sets[0]}
    master.apply_conv_update(avg)
    return ConvSnapshot.from_network(master, version + 1)


# -- worker primitive ----------------------------------------------------------------


def worker_conv_round(
    conv_net: Network,
    snapshot: ConvSnapshot,
    images: np.ndarray,
    labels: np.ndarray,
    exchange: Callable[[FeatureBatch], FeatureGradBatch | None],
    worker_id: str = "w0",
    seq: int = 0,
) -> tuple[dict[str, np.ndarray], float]:
    """One conv round: load snapshot, forward, trade features for feature
    gradients, backward. Returns (conv gradient set, batch loss)."""
    conv_net.load_conv_params(snapshot.arrays())
    feats = conv_net.forward_features(images)
    fb = FeatureBatch(
        snapshot.version, seq, worker_id, feats.reshape(len(labels), -1), labels
    )
    reply = exchange(fb)
    if reply is None:
        raise StaleSnapshotError(f"snapshot v{snapshot.version} rejected (seq {seq})")
    grads = conv_net.conv_grads(reply.dfeatures.reshape(feats.shape))
    return grads, reply.loss


# -- batch stream ----------------------------------------------------------------------


def batch_indices(count: int, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Deterministic infinite stream of index minibatches: seeded epoch
    permutations, partial tail dropped."""
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(count)
        for start in range(0, count - batch_size + 1, batch_size):
            yield order[start : start + batch_size]


# -- configuration and results -----------------------------------------------------------


@dataclass
class DistTrainConfig:
    clients: int = 1  # k
    batches: int = 10  # N, accepted conv rounds to consume
    agg_period: int = 1  # m, gradient sets per aggregation
    staleness: int = 0  # s, max snapshot age (in aggregations) accepted
    batch_size: int = 50
    seed: int = 0  # model init seed
    data_seed: int = 0  # batch stream seed
    alpha: float = 0.01
    beta: float = 1.0
    refresh_every: int = 1  # local mode: worker re-pulls the snapshot every r own rounds
    starvation_timeout: float = 120.0  # http mode: max seconds with no round completing


@dataclass
class MetricsRow:
    round: int
    wallclock_s: float
    conv_batches_per_min: float
    fc_updates_per_min: float
    loss: float

    @staticmethod
    def csv_header() -> str:
        return "round,wallclock_s,conv_batches_per_min,fc_updates_per_min,loss"

    def csv(self) -> str:
        return (
            f"{self.round},{self.wallclock_s:.3f},{self.conv_batches_per_min:.2f},"
            f"{self.fc_updates_per_min:.2f},{self.loss:.6f}"
        )


@dataclass
class DistTrainResult:
    model: Network
    metrics: list[MetricsRow]
    wire: WireStats
    accepted: int
    discarded: int
    fc_updates: int
    elapsed_s: float
    snapshot_versions: list[int] = field(default_factory=list)

    @property
    def conv_batches_per_min(self) -> float:
        return self.accepted / (self.elapsed_s / 60.0) if self.elapsed_s > 0 else 0.0

    @property
    def fc_updates_per_min(self) -> float:
        return self.fc_updates / (self.elapsed_s / 60.0) if self.elapsed_s > 0 else 0.0

    @property
    def final_loss(self) -> float:
        return self.metrics[-1].loss if self.metrics else float("nan")


def write_metrics_csv(path, rows: list[MetricsRow]) -> None:
    with open(path, "w") as fh:
        fh.write(MetricsRow.csv_header() + "\n")
        for row in rows:
            fh.write(row.csv() + "\n")


def conv_specs_of(net: Network) -> list[LayerSpec]:
    return [s for s in net.specs if s.kind not in ("fc", "softmax")]


# -- in-process driver --------------------------------------------------------------------


class _CountingExchange:
    """Runs the server side of the feature exchange through the wire codec so
    payload bytes are counted exactly as the HTTP path would see them."""

    def __init__(self, trainer: FcTrainer, wire: WireStats):
        self.trainer = trainer
        self.wire = wire

    def __call__(self, fb: FeatureBatch) -> FeatureGradBatch | None:
        up = canonical_json(fb.to_wire()).encode("utf-8")
        self.wire.feature_up += len(up)
        reply = self.trainer.process(FeatureBatch.from_wire(json.loads(up)))
        if reply is None:
            return None
        down = canonical_json(reply.to_wire()).encode("utf-8")
        self.wire.feature_down += len(down)
        return FeatureGradBatch.from_wire(json.loads(down))


def run_local(
    master: Network, dataset: DatasetHandle, cfg: DistTrainConfig
) -> DistTrainResult:
    """Lockstep simulation of k workers against an in-process server. Rounds
    are dealt round-robin; each worker re-pulls the published snapshot every
    ``cfg.refresh_every`` of its own rounds, so staleness discarding can be
    exercised deterministically."""
    conv_specs = conv_specs_of(master)
    workers = [
        Network.from_specs(
            [LayerSpec(s.kind, dict(s.params)) for s in conv_specs],
            master.input_shape,
            seed=cfg.seed,
            alpha=cfg.alpha,
            beta=cfg.beta,
        )
        for _ in range(cfg.clients)
    ]

    wire = WireStats()
    published = ConvSnapshot.from_network(master, 0)
    wire.snapshot_bytes += len(published.to_bytes())
    versions = [0]
    trainer = FcTrainer(master, cfg.staleness, lambda: published.version)
    exchange = _CountingExchange(trainer, wire)

    held: list[ConvSnapshot | None] = [None] * cfg.clients
    rounds_by_worker = [0] * cfg.clients
    stream = batch_indices(dataset.count, cfg.batch_size, cfg.data_seed)
    pending: list[dict[str, np.ndarray]] = []
    metrics: list[MetricsRow] = []
    accepted = discarded = 0
    seq = 0
    t0 = time.perf_counter()

    while accepted < cfg.batches:
        wid = seq % cfg.clients
        if held[wid] is None or rounds_by_worker[wid] % cfg.refresh_every == 0:
            held[wid] = published
        rounds_by_worker[wid] += 1
        idx = next(stream)
        images, labels = dataset.images[idx], dataset.labels[idx]
        try:
            grads, loss = worker_conv_round(
                workers[wid], held[wid], images, labels, exchange, f"local-w{wid}", seq
            )
        except StaleSnapshotError:
            discarded += 1
            held[wid] = published  # forced refresh; the batch is dropped
            seq += 1
            continue
        seq += 1
        accepted += 1
        wire.rounds += 1
        wire.grad_bytes += len(canonical_json(encode_grads(grads)).encode("utf-8"))
        pending.append(grads)
        if len(pending) >= cfg.agg_period:
            published = aggregate_conv(pending, master, published.version)
            pending = []
            wire.snapshot_bytes += len(published.to_bytes())
            versions.append(published.version)
            elapsed = time.perf_counter() - t0
            metrics.append(
                MetricsRow(
                    round=published.version,
                    wallclock_s=elapsed,
                    conv_batches_per_min=accepted / max(elapsed / 60.0, 1e-9),
                    fc_updates_per_min=trainer.fc_updates / max(elapsed / 60.0, 1e-9),
                    loss=loss,
                )
            )

    return DistTrainResult(
        model=master,
        metrics=metrics,
        wire=wire,
        accepted=accepted,
        discarded=discarded,
        fc_updates=trainer.fc_updates,
        elapsed_s=time.perf_counter() - t0,
        snapshot_versions=versions,
    )


# -- ticket-scheduled driver -----------------------------------------------------------------

CONV_ROUND_DEF = {
    "task": "conv_round",
    "input": "{indices: [int], seq: int, snapshot?: resource name}",
    "output": "{seq, version, loss, grads: {param: {shape, data}}} or {stale: true}",
    "rule": (
        "resolve the conv snapshot (POST /snapshot when not named in the input), forward "
        "the indexed minibatch, POST features to /feature, backward with the returned "
        "feature gradients; base64 float32 little-endian blobs"
    ),
    "resources": [META_RESOURCE, IMAGES_RESOURCE, LABELS_RESOURCE],
}

_worker_nets: dict[str, Network] = {}


def conv_round_descriptor(chunking: int = 1) -> TaskDescriptor:
    return TaskDescriptor(
        task_id="conv_round",
        version=definition_hash(CONV_ROUND_DEF),
        resource_deps=list(CONV_ROUND_DEF["resources"]),
        chunking=chunking,
    )


def _conv_net_for(meta: dict) -> Network:
    key = canonical_json({"specs": meta["conv_specs"], "input_shape": meta["input_shape"]})
    net = _worker_nets.get(key)
    if net is None:
        specs = [LayerSpec.from_doc(d) for d in meta["conv_specs"]]
        net = Network.from_specs(specs, tuple(meta["input_shape"]), seed=0)
        _worker_nets[key] = net
    return net


def _run_conv_round(args: list, ctx: TaskContext) -> list:
    meta = json.loads(ctx.resource(META_RESOURCE))
    images = from_f32le(ctx.resource(IMAGES_RESOURCE), tuple(meta["images_shape"]))
    labels = labels_from_bytes(ctx.resource(LABELS_RESOURCE))
    net = _conv_net_for(meta)
    out = []
    for spec in args:
        name = spec.get("snapshot") or ctx.post_json(SNAPSHOT_PATH, {})["name"]
        snapshot = ConvSnapshot.from_bytes(ctx.resource(name))
        idx = np.asarray(spec["indices"], dtype=np.int64)
        seq = int(spec["seq"])
        try:
            grads, loss = worker_conv_round(
                net,
                snapshot,
                images[idx],
                labels[idx],
                lambda fb: _post_feature(ctx, fb),
                worker_id=spec.get("worker_hint", "ticket"),
                seq=seq,
            )
        except StaleSnapshotError:
            out.append({"stale": True, "seq": seq, "version": snapshot.version})
            continue
        out.append(
            {
                "stale": False,
                "seq": seq,
                "version": snapshot.version,
                "loss": loss,
                "grads": encode_grads(grads),
            }
        )
    return out


def _post_feature(ctx: TaskContext, fb: FeatureBatch) -> FeatureGradBatch | None:
    reply = ctx.post_json(FEATURE_PATH, fb.to_wire())
    if reply.get("rejected") == "stale":
        return None
    return FeatureGradBatch.from_wire(reply)


def register_conv_round(registry: TaskRegistry) -> None:
    registry.register(conv_round_descriptor(), _run_conv_round)


class DistTrainServer:
    """Server half of the ticket-scheduled mode: publishes snapshots and the
    dataset as resources, answers /snapshot and /feature, aggregates rounds."""

    def __init__(self, coordinator, master: Network, dataset: DatasetHandle, cfg: DistTrainConfig):
        self.coordinator = coordinator
        self.master = master
        self.cfg = cfg
        self.wire = WireStats()
        self.published = ConvSnapshot.from_network(master, 0)
        self.versions = [0]
        self.trainer = FcTrainer(master, cfg.staleness, lambda: self.published.version)
        meta = {
            "conv_specs": [s.to_doc() for s in conv_specs_of(master)],
            "input_shape": list(master.input_shape),
            "images_shape": list(dataset.images.shape),
        }
        co = coordinator
        co.register_resource_bytes(META_RESOURCE, canonical_json(meta).encode("utf-8"))
        co.register_resource_bytes(IMAGES_RESOURCE, to_f32le(dataset.images))
        co.register_resource_bytes(LABELS_RESOURCE, dataset.labels.astype(np.uint8).tobytes())
        self._publish(self.published)
        co.app.add_api_route(FEATURE_PATH, self._feature_endpoint, methods=["POST"])
        co.app.add_api_route(SNAPSHOT_PATH, self._snapshot_endpoint, methods=["POST"])

    def _publish(self, snapshot: ConvSnapshot) -> None:
        data = snapshot.to_bytes()
        self.coordinator.register_resource_bytes(snapshot.resource_name, data)
        self.wire.snapshot_bytes += len(data)

    async def _snapshot_endpoint(self) -> dict:
        current = self.published
        return {"name": current.resource_name, "version": current.version}

    async def _feature_endpoint(self, request: Request) -> dict:
        body = await request.body()
        self.wire.feature_up += len(body)
        fb = FeatureBatch.from_wire(json.loads(body))
        reply = self.trainer.process(fb)
        if reply is None:
            return {"rejected": "stale", "version": self.published.version}
        doc = reply.to_wire()
        self.wire.feature_down += len(canonical_json(doc).encode("utf-8"))
        return doc

    def aggregate(self, grad_sets: list[dict[str, np.ndarray]]) -> None:
        self.published = aggregate_conv(grad_sets, self.master, self.published.version)
        self.versions.append(self.published.version)
        self._publish(self.published)


def run_http(
    master: Network,
    dataset: DatasetHandle,
    cfg: DistTrainConfig,
    coordinator,
    project_id: str = "disttrain",
) -> DistTrainResult:
    """Drive N accepted conv rounds through a live coordinator. Workers must
    be connected externally (threads or separate processes). Outstanding
    tickets are topped up to 2k so workers stay busy; stale rounds are
    discarded, counted and replaced with fresh ones."""
    server = DistTrainServer(coordinator, master, dataset, cfg)
    svc = coordinator.svc
    descriptor = conv_round_descriptor()
    stream = batch_indices(dataset.count, cfg.batch_size, cfg.data_seed)
    depth = max(2 * cfg.clients, cfg.agg_period)
    outstanding: dict[str, int] = {}  # ticket_id -> seq
    pending_grads: list[dict[str, np.ndarray]] = []
    metrics: list[MetricsRow] = []
    accepted = discarded = 0
    seq = 0
    t0 = time.perf_counter()
    last_progress = t0

    def enqueue_round() -> None:
        nonlocal seq
        idx = next(stream)
        args = {"indices": [int(i) for i in idx], "seq": seq}
        tid = svc.enqueue(project_id, descriptor, [args])[0]
        outstanding[tid] = seq
        seq += 1

    while accepted < cfg.batches:
        target = min(depth, (cfg.batches - accepted) + cfg.clients)
        while len(outstanding) < target:
            enqueue_round()
        incomplete, failed = svc.wait_for_tickets(list(outstanding), timeout=0.05)
        if failed:
            raise RuntimeError(f"conv rounds failed permanently: {failed[:5]}")
        still = set(incomplete)
        finished = [tid for tid in outstanding if tid not in still]
        if not finished:
            if time.perf_counter() - last_progress > cfg.starvation_timeout:
                raise TimeoutError("no conv round completed within the starvation timeout")
            continue
        last_progress = time.perf_counter()
        for tid in finished:
            outstanding.pop(tid)
            result = svc.ticket(tid).result[0]
            if result.get("stale"):
                discarded += 1
                log.debug("discarded stale round seq=%s v=%s", result["seq"], result["version"])
                continue
            accepted += 1
            server.wire.rounds += 1
            server.wire.grad_bytes += len(canonical_json(result["grads"]).encode("utf-8"))
            pending_grads.append(decode_grads(result["grads"]))
            if len(pending_grads) >= cfg.agg_period:
                server.aggregate(pending_grads)
                pending_grads = []
                elapsed = time.perf_counter() - t0
                metrics.append(
                    MetricsRow(
                        round=server.published.version,
                        wallclock_s=elapsed,
                        conv_batches_per_min=accepted / max(elapsed / 60.0, 1e-9),
                        fc_updates_per_min=server.trainer.fc_updates / max(elapsed / 60.0, 1e-9),
                        loss=float(result["loss"]),
                    )
                )
            if accepted >= cfg.batches:
                break

    return DistTrainResult(
        model=master,
        metrics=metrics,
        wire=server.wire,
        accepted=accepted,
        discarded=discarded,
        fc_updates=server.trainer.fc_updates,
        elapsed_s=time.perf_counter() - t0,
        snapshot_versions=server.versions,
    )


def run_distributed_training(
    master: Network,
    dataset: DatasetHandle,
    cfg: DistTrainConfig,
    coordinator=None,
) -> DistTrainResult:
    """Dispatch to the in-process driver, or the ticket-scheduled one when a
    live coordinator is supplied."""
    if coordinator is None:
        return run_local(master, dataset, cfg)
    return run_http(master, dataset, cfg, coordinator)
