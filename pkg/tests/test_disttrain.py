"""Split training: wire codecs, aggregation, staleness, and the cut-point
equivalence between the split pipeline and monolithic training."""

import json
import threading

import numpy as np
import pytest

from ticketgrid.coordinator import Coordinator, CoordinatorConfig, CoordinatorServer
from ticketgrid.datasets import synthetic_dataset
from ticketgrid.disttrain import (
    ConvSnapshot,
    DistTrainConfig,
    DistTrainServer,
    FcTrainer,
    FeatureBatch,
    FeatureGradBatch,
    StaleSnapshotError,
    aggregate_conv,
    batch_indices,
    conv_round_descriptor,
    decode_grads,
    encode_grads,
    run_http,
    run_local,
    server_fc_step,
    worker_conv_round,
)
from ticketgrid.nn.network import (
    Network,
    conv_spec,
    fc_spec,
    maxpool_spec,
    relu_spec,
    softmax_spec,
)
from ticketgrid.tasks import canonical_json
from ticketgrid.worker import Worker, WorkerConfig, default_registry


def make_net(seed=0, kernel=3):
    """Small net: (1,8,8) -> conv3 -> pool -> conv4 -> pool -> fc(16,10)."""
    pad = kernel // 2
    specs = [
        conv_spec(1, 3, kernel=kernel, pad=pad),
        relu_spec(),
        maxpool_spec(),
        conv_spec(3, 4, kernel=kernel, pad=pad),
        relu_spec(),
        maxpool_spec(),
        fc_spec(4 * 2 * 2, 10),
        softmax_spec(),
    ]
    return Network.from_specs(specs, (1, 8, 8), seed=seed)


def make_dataset(count=40, seed=0):
    return synthetic_dataset(count, (1, 8, 8), seed=seed)


def assert_params_bitwise_equal(a: Network, b: Network):
    pa, pb = a.parameters(), b.parameters()
    assert set(pa) == set(pb)
    for key in pa:
        assert np.array_equal(pa[key], pb[key]), key
    for key in a.opt_states:
        assert np.array_equal(a.opt_states[key].accum, b.opt_states[key].accum), key


# -- codecs -----------------------------------------------------------------------


def test_snapshot_round_trip_bitwise():
    net = make_net(seed=3)
    snap = ConvSnapshot.from_network(net, 7)
    assert snap.resource_name == "convsnap-v7"
    revived = ConvSnapshot.from_bytes(snap.to_bytes())
    assert revived.version == 7
    conv_params = net.conv_param_arrays()
    arrays = revived.arrays()
    assert set(arrays) == set(conv_params)
    for key in arrays:
        assert np.array_equal(arrays[key], conv_params[key]), key


def test_feature_batch_wire_round_trip():
    rng = np.random.default_rng(0)
    fb = FeatureBatch(
        version=2,
        seq=11,
        worker_id="w-3",
        features=rng.standard_normal((5, 16)).astype(np.float32),
        labels=np.array([0, 9, 3, 3, 1]),
    )
    wire = json.loads(canonical_json(fb.to_wire()))
    out = FeatureBatch.from_wire(wire)
    assert (out.version, out.seq, out.worker_id) == (2, 11, "w-3")
    assert np.array_equal(out.features, fb.features)
    assert out.features.dtype == np.float32
    assert np.array_equal(out.labels, fb.labels)


def test_feature_grad_batch_wire_round_trip():
    rng = np.random.default_rng(1)
    gb = FeatureGradBatch(
        seq=4, dfeatures=rng.standard_normal((5, 16)).astype(np.float32), loss=2.30258509
    )
    out = FeatureGradBatch.from_wire(json.loads(canonical_json(gb.to_wire())))
    assert out.seq == 4
    assert np.array_equal(out.dfeatures, gb.dfeatures)
    assert out.loss == gb.loss  # double survives the JSON repr round trip exactly


def test_grad_codec_round_trip():
    rng = np.random.default_rng(2)
    grads = {
        "0:w": rng.standard_normal((3, 1, 3, 3)).astype(np.float32),
        "0:b": rng.standard_normal(3).astype(np.float32),
    }
    out = decode_grads(json.loads(canonical_json(encode_grads(grads))))
    assert set(out) == set(grads)
    for key in grads:
        assert np.array_equal(out[key], grads[key]), key


# -- server primitives --------------------------------------------------------------


def test_server_fc_step_matches_head_train_step():
    a, b = make_net(seed=5), make_net(seed=5)
    ds = make_dataset(seed=5)
    feats = a.forward_features(ds.images[:10])
    flat = feats.reshape(10, -1)

    loss_direct, dfeats_direct = a.head_train_step(flat.copy(), ds.labels[:10])
    reply = server_fc_step(FeatureBatch(0, 0, "w", flat.copy(), ds.labels[:10]), b)
    assert reply.loss == loss_direct
    assert np.array_equal(reply.dfeatures, dfeats_direct.reshape(10, -1))
    assert_params_bitwise_equal(a, b)  # both heads moved identically


def test_fc_trainer_staleness_window():
    current = 5
    trainer = FcTrainer(make_net(seed=1), staleness=0, current_version=lambda: current)
    feats = np.zeros((2, 16), dtype=np.float32)
    labels = np.array([1, 2])
    assert trainer.process(FeatureBatch(5, 0, "w", feats, labels)) is not None
    assert trainer.process(FeatureBatch(4, 1, "w", feats, labels)) is None
    assert trainer.fc_updates == 1
    assert len(trainer.losses) == 1

    lagged = FcTrainer(make_net(seed=1), staleness=2, current_version=lambda: current)
    assert lagged.process(FeatureBatch(3, 0, "w", feats, labels)) is not None  # boundary
    assert lagged.process(FeatureBatch(2, 1, "w", feats, labels)) is None


def test_aggregate_constant_gradients_exact_average():
    """Averages of 0.5/1.0/1.5 are exactly 1.0; the update must match a clone
    stepped with an all-ones gradient set."""
    a, b = make_net(seed=7), make_net(seed=7)
    shapes = {k: v.shape for k, v in a.conv_param_arrays().items()}
    sets = [
        {k: np.full(s, 0.5, dtype=np.float32) for k, s in shapes.items()},
        {k: np.full(s, 1.0, dtype=np.float32) for k, s in shapes.items()},
        {k: np.full(s, 1.5, dtype=np.float32) for k, s in shapes.items()},
    ]
    snap = aggregate_conv(sets, a, version=0)
    assert snap.version == 1
    b.apply_conv_update({k: np.ones(s, dtype=np.float32) for k, s in shapes.items()})
    assert_params_bitwise_equal(a, b)


def test_aggregate_two_sets_bitwise_manual_average():
    rng = np.random.default_rng(8)
    a, b = make_net(seed=8), make_net(seed=8)
    shapes = {k: v.shape for k, v in a.conv_param_arrays().items()}
    g1 = {k: rng.standard_normal(s).astype(np.float32) for k, s in shapes.items()}
    g2 = {k: rng.standard_normal(s).astype(np.float32) for k, s in shapes.items()}
    aggregate_conv([g1, g2], a, version=3)
    # (x + y) / 2 is exact in binary floating point given the same addition.
    b.apply_conv_update({k: (g1[k] + g2[k]) / 2.0 for k in g1})
    assert_params_bitwise_equal(a, b)


def test_aggregate_validation():
    net = make_net()
    with pytest.raises(ValueError, match="at least one"):
        aggregate_conv([], net, 0)
    shapes = {k: v.shape for k, v in net.conv_param_arrays().items()}
    good = {k: np.zeros(s, dtype=np.float32) for k, s in shapes.items()}
    bad = dict(good)
    bad.pop(next(iter(bad)))
    with pytest.raises(ValueError, match="disagree"):
        aggregate_conv([good, bad], net, 0)


def test_worker_conv_round_stale_snapshot_raises():
    net = make_net()
    conv_only = Network.from_specs(
        [s for s in net.specs if s.kind not in ("fc", "softmax")], net.input_shape, seed=0
    )
    ds = make_dataset()
    snap = ConvSnapshot.from_network(net, 0)
    with pytest.raises(StaleSnapshotError, match="v0"):
        worker_conv_round(
            conv_only, snap, ds.images[:4], ds.labels[:4], exchange=lambda fb: None
        )


def test_worker_conv_round_deterministic():
    master = make_net(seed=9)
    conv_only = Network.from_specs(
        [s for s in master.specs if s.kind not in ("fc", "softmax")], master.input_shape, seed=1
    )
    ds = make_dataset(seed=9)
    snap = ConvSnapshot.from_network(master, 0)

    def exchange(fb):
        # Fixed, deterministic feature gradients.
        return FeatureGradBatch(fb.seq, np.ones_like(fb.features) * 0.25, 1.0)

    g1, _ = worker_conv_round(conv_only, snap, ds.images[:6], ds.labels[:6], exchange)
    g2, _ = worker_conv_round(conv_only, snap, ds.images[:6], ds.labels[:6], exchange)
    for key in g1:
        assert np.array_equal(g1[key], g2[key]), key


# -- batch stream ---------------------------------------------------------------------


def test_batch_indices_deterministic():
    a = batch_indices(100, 7, seed=3)
    b = batch_indices(100, 7, seed=3)
    for _ in range(30):
        assert np.array_equal(next(a), next(b))
    c = batch_indices(100, 7, seed=4)
    assert not all(np.array_equal(next(batch_indices(100, 7, 3)), next(c)) for _ in range(1))


def test_batch_indices_drops_partial_tail():
    stream = batch_indices(10, 3, seed=0)
    epoch = [next(stream) for _ in range(3)]
    seen = np.concatenate(epoch)
    assert all(len(b) == 3 for b in epoch)
    assert len(np.unique(seen)) == 9  # one index left out per epoch
    fourth = next(stream)  # start of the next epoch, again size 3
    assert len(fourth) == 3


# -- cut-point equivalence ---------------------------------------------------------------


def monolithic_run(seed, ds, steps, batch_size=10, data_seed=0):
    net = make_net(seed=seed)
    stream = batch_indices(ds.count, batch_size, data_seed)
    losses = []
    for _ in range(steps):
        idx = next(stream)
        losses.append(net.train_step(ds.images[idx], ds.labels[idx]))
    return net, losses


def test_run_local_cut_point_bitwise_equals_monolithic():
    ds = make_dataset(seed=11)
    mono, losses = monolithic_run(11, ds, steps=3)

    master = make_net(seed=11)
    cfg = DistTrainConfig(
        clients=1, batches=3, agg_period=1, staleness=0, batch_size=10, seed=11, data_seed=0
    )
    result = run_local(master, ds, cfg)
    assert result.accepted == 3 and result.discarded == 0
    assert result.snapshot_versions == [0, 1, 2, 3]
    assert result.fc_updates == 3
    assert [m.loss for m in result.metrics] == losses
    assert_params_bitwise_equal(master, mono)


def test_run_local_staleness_discards_are_deterministic():
    ds = make_dataset(seed=12)
    cfg = DistTrainConfig(
        clients=1,
        batches=4,
        agg_period=1,
        staleness=0,
        batch_size=10,
        seed=12,
        refresh_every=3,
    )
    result = run_local(make_net(seed=12), ds, cfg)
    assert result.accepted == 4
    assert result.discarded == 2  # every held-over snapshot is one version behind
    assert result.snapshot_versions == [0, 1, 2, 3, 4]

    # A held snapshot ages up to two versions before the refresh; staleness 1
    # still discards the third held round, staleness 2 accepts everything.
    for staleness, expected_discards in ((1, 1), (2, 0)):
        cfg2 = DistTrainConfig(
            clients=1,
            batches=4,
            agg_period=1,
            staleness=staleness,
            batch_size=10,
            seed=12,
            refresh_every=3,
        )
        result2 = run_local(make_net(seed=12), ds, cfg2)
        assert result2.discarded == expected_discards, staleness


def test_run_local_multi_worker_progresses():
    ds = make_dataset(seed=13)
    cfg = DistTrainConfig(clients=3, batches=6, agg_period=2, staleness=2, batch_size=10, seed=13)
    result = run_local(make_net(seed=13), ds, cfg)
    assert result.accepted == 6
    assert result.snapshot_versions == [0, 1, 2, 3]  # 6 rounds / period 2
    assert result.fc_updates == 6
    assert result.wire.rounds == 6


def test_feature_traffic_independent_of_conv_param_count():
    """Kernel 3 vs kernel 7 conv stacks: ~5x the conv parameters, same
    feature dimensionality. Snapshot traffic must scale; the per-round
    feature exchange must not."""
    ds = make_dataset(seed=14)
    cfg = DistTrainConfig(clients=1, batches=3, agg_period=1, staleness=0, batch_size=10, seed=14)

    narrow = run_local(make_net(seed=14, kernel=3), ds, cfg)
    wide = run_local(make_net(seed=14, kernel=7), ds, cfg)

    assert wide.wire.snapshot_bytes > 3 * narrow.wire.snapshot_bytes
    delta = abs(wide.wire.feature_bytes_per_round() - narrow.wire.feature_bytes_per_round())
    assert delta < 64  # only float-repr jitter, not architecture scaling


# -- full stack over tickets ---------------------------------------------------------------


@pytest.fixture
def live():
    server = CoordinatorServer(Coordinator(CoordinatorConfig())).start()
    stop = threading.Event()
    worker = Worker(
        WorkerConfig(endpoint=server.ws_url, worker_id="dist-w0"),
        registry=default_registry(),
        stop_event=stop,
    )
    thread = threading.Thread(target=worker.run, daemon=True)
    thread.start()
    yield server
    stop.set()
    thread.join(timeout=10)
    server.stop()


def test_ticket_path_bitwise_equals_monolithic(live):
    """Three steps through the real stack (WS tickets, HTTP feature exchange,
    base64 blobs), each round pinned to the snapshot it must use: the result
    is bit-identical to monolithic training."""
    ds = make_dataset(seed=21)
    mono, losses = monolithic_run(21, ds, steps=3)

    co = live.coordinator
    master = make_net(seed=21)
    cfg = DistTrainConfig(clients=1, batches=3, agg_period=1, staleness=0, batch_size=10)
    dts = DistTrainServer(co, master, ds, cfg)
    stream = batch_indices(ds.count, 10, 0)
    seen_losses = []
    for step in range(3):
        idx = next(stream)
        args = {
            "indices": [int(i) for i in idx],
            "seq": step,
            "snapshot": dts.published.resource_name,
        }
        tid = co.svc.enqueue("bitwise", conv_round_descriptor(), [args])[0]
        incomplete, failed = co.svc.wait_for_tickets([tid], timeout=60)
        assert incomplete == [] and failed == []
        outcome = co.svc.ticket(tid).result[0]
        assert outcome["stale"] is False
        assert outcome["version"] == step
        seen_losses.append(float(outcome["loss"]))
        dts.aggregate([decode_grads(outcome["grads"])])

    assert seen_losses == losses
    assert_params_bitwise_equal(master, mono)
    assert dts.wire.feature_up > 0 and dts.wire.feature_down > 0


def test_run_http_drives_training_through_tickets(live):
    ds = make_dataset(seed=22)
    master = make_net(seed=22)
    before = {k: v.copy() for k, v in master.parameters().items()}
    cfg = DistTrainConfig(
        clients=1,
        batches=5,
        agg_period=1,
        staleness=2,
        batch_size=10,
        seed=22,
        starvation_timeout=60.0,
    )
    result = run_http(master, ds, cfg, live.coordinator, project_id="http-smoke")
    assert result.accepted == 5
    assert result.fc_updates >= result.accepted
    assert result.snapshot_versions == sorted(result.snapshot_versions)
    assert result.snapshot_versions[-1] >= 5 - result.discarded
    assert any(not np.array_equal(before[k], v) for k, v in master.parameters().items())
    assert result.wire.rounds == 5
    assert len(result.metrics) == 5
