"""Coordinator HTTP endpoints, WebSocket session handling, and restart recovery."""

import hashlib
import json
import socket
import time

import pytest
import requests
from websockets.sync.client import connect as ws_connect

from ticketgrid.coordinator import (
    ADMIN_HEADER,
    HASH_HEADER,
    Coordinator,
    CoordinatorConfig,
    CoordinatorServer,
    ResourceStore,
)
from ticketgrid.protocol import (
    ACCEPTED,
    Control,
    Hello,
    NoTicket,
    ResultAck,
    ResultSubmit,
    TaskPayload,
    TaskRequest,
    TicketGrant,
    TicketRequest,
    decode_message,
    encode_message,
)
from ticketgrid.scheduler import SchedulerConfig
from ticketgrid.tasks import builtin_descriptor


@pytest.fixture
def server():
    srv = CoordinatorServer(Coordinator(CoordinatorConfig())).start()
    yield srv
    srv.stop()


def send(ws, msg):
    ws.send(encode_message(msg).decode("utf-8"))


def recv(ws, timeout=10.0):
    return decode_message(ws.recv(timeout=timeout).encode("utf-8"))


def handshake(ws, worker_id=None):
    send(ws, Hello(worker_id=worker_id))
    reply = recv(ws)
    assert isinstance(reply, Hello)
    return reply.worker_id


# -- resource store ---------------------------------------------------------------


def test_resource_store_rejects_pathlike_names():
    store = ResourceStore()
    for bad in ("", "a/b", "a\\b", "..", "a..b"):
        assert not store.valid_name(bad), bad
        with pytest.raises((ValueError, PermissionError)):
            store.register_bytes(bad, b"x")
    assert store.valid_name("model.v3.json")


def test_resource_store_bytes_and_hash():
    store = ResourceStore()
    digest = store.register_bytes("blob", b"hello")
    assert digest == hashlib.sha256(b"hello").hexdigest()
    assert store.resolve("blob") == (b"hello", digest)
    assert store.resolve("missing") is None
    store.unregister("blob")
    assert store.resolve("blob") is None


def test_resource_store_traversal_raises():
    store = ResourceStore()
    with pytest.raises(PermissionError):
        store.resolve("../etc/passwd")


def test_resource_store_serves_files_with_mtime_cache(tmp_path):
    (tmp_path / "data.bin").write_bytes(b"one")
    store = ResourceStore(str(tmp_path))
    data, digest = store.resolve("data.bin")
    assert data == b"one" and digest == hashlib.sha256(b"one").hexdigest()

    # Rewrite with a different size: new content must be picked up.
    (tmp_path / "data.bin").write_bytes(b"rewritten")
    data2, digest2 = store.resolve("data.bin")
    assert data2 == b"rewritten" and digest2 != digest

    # In-memory registration shadows the file.
    store.register_bytes("data.bin", b"mem")
    assert store.resolve("data.bin")[0] == b"mem"


# -- HTTP endpoints ------------------------------------------------------------------


def test_status_lists_projects_and_clients(server):
    co = server.coordinator
    co.svc.enqueue("proj", builtin_descriptor("is_prime"), [2, 3, 4])
    with ws_connect(server.ws_url) as ws:
        wid = handshake(ws, "status-probe")
        doc = requests.get(f"{server.http_base}/status", timeout=5).json()
        assert doc["projects"]["proj"]["tasks"] == 1
        assert doc["projects"]["proj"]["pending"] == 3
        assert doc["projects"]["proj"]["executed"] == 0
        client = next(c for c in doc["clients"] if c["worker_id"] == wid)
        assert client["tickets_in_flight"] == []
    deadline = time.time() + 5
    while time.time() < deadline:
        doc = requests.get(f"{server.http_base}/status", timeout=5).json()
        if not doc["clients"]:
            break
        time.sleep(0.05)
    assert doc["clients"] == []


def test_resource_endpoint_hash_and_errors(server):
    payload = b"\x00\x01binary"
    server.coordinator.register_resource_bytes("blob", payload)
    r = requests.get(f"{server.http_base}/resource/blob", timeout=5)
    assert r.status_code == 200
    assert r.content == payload
    assert r.headers[HASH_HEADER] == hashlib.sha256(payload).hexdigest()
    assert r.headers["ETag"] == f'"{r.headers[HASH_HEADER]}"'

    assert requests.get(f"{server.http_base}/resource/absent", timeout=5).status_code == 404
    assert requests.get(f"{server.http_base}/resource/..%2fsecret", timeout=5).status_code == 403


def test_resource_reregistration_changes_hash_iff_content_changes(server):
    co = server.coordinator
    first = co.register_resource_bytes("snap", b"v1")
    same = co.register_resource_bytes("snap", b"v1")
    changed = co.register_resource_bytes("snap", b"v2")
    assert first == same
    assert changed != first
    r = requests.get(f"{server.http_base}/resource/snap", timeout=5)
    assert r.content == b"v2" and r.headers[HASH_HEADER] == changed


def test_console_broadcast_and_validation(server):
    base = server.http_base
    with ws_connect(server.ws_url) as ws:
        handshake(ws)
        r = requests.post(f"{base}/console", json={"command": "reload"}, timeout=5)
        assert r.status_code == 200
        assert r.json() == {"command": "reload", "delivered": 1}
        msg = recv(ws)
        assert isinstance(msg, Control) and msg.command == "reload"

    assert requests.post(f"{base}/console", json={"command": "explode"}, timeout=5).status_code == 400
    assert requests.post(f"{base}/console", json={"command": "redirect"}, timeout=5).status_code == 400


def test_console_admin_token():
    cfg = CoordinatorConfig(admin_token="sekrit")
    srv = CoordinatorServer(Coordinator(cfg)).start()
    try:
        base = srv.http_base
        r = requests.post(f"{base}/console", json={"command": "reload"}, timeout=5)
        assert r.status_code == 401
        r = requests.post(
            f"{base}/console",
            json={"command": "reload"},
            headers={ADMIN_HEADER: "wrong"},
            timeout=5,
        )
        assert r.status_code == 401
        r = requests.post(
            f"{base}/console",
            json={"command": "reload"},
            headers={ADMIN_HEADER: "sekrit"},
            timeout=5,
        )
        assert r.status_code == 200 and r.json()["delivered"] == 0
    finally:
        srv.stop()


# -- WebSocket sessions ----------------------------------------------------------------


def test_ws_happy_path_grant_result_ack(server):
    co = server.coordinator
    ids = co.svc.enqueue("p", builtin_descriptor("is_prime"), [13])
    with ws_connect(server.ws_url) as ws:
        handshake(ws)
        send(ws, TicketRequest())
        grant = recv(ws)
        assert isinstance(grant, TicketGrant)
        assert grant.ticket_id == ids[0]
        assert grant.task_id == "is_prime"
        assert grant.args == [13]
        assert grant.attempt == 1

        send(ws, TaskRequest(task_id="is_prime"))
        payload = recv(ws)
        assert isinstance(payload, TaskPayload) and payload.found
        assert payload.version == builtin_descriptor("is_prime").version

        send(ws, ResultSubmit(ticket_id=grant.ticket_id, result=[{"is_prime": True}]))
        ack = recv(ws)
        assert isinstance(ack, ResultAck)
        assert ack.ticket_id == ids[0] and ack.status == ACCEPTED
    ticket = co.svc.ticket(ids[0])
    assert ticket.result == [{"is_prime": True}]


def test_ws_no_ticket_when_idle(server):
    with ws_connect(server.ws_url) as ws:
        handshake(ws)
        send(ws, TicketRequest())
        assert isinstance(recv(ws), NoTicket)


def test_ws_unknown_task_payload_not_found(server):
    with ws_connect(server.ws_url) as ws:
        handshake(ws)
        send(ws, TaskRequest(task_id="never-registered"))
        payload = recv(ws)
        assert isinstance(payload, TaskPayload) and not payload.found


def test_ws_worker_id_collision_gets_fresh_id(server):
    with ws_connect(server.ws_url) as first:
        wid = handshake(first, "wanted-name")
        assert wid == "wanted-name"
        with ws_connect(server.ws_url) as second:
            other = handshake(second, "wanted-name")
            assert other != "wanted-name"


def test_ws_malformed_first_frame_closes_1002_without_hurting_others(server):
    co = server.coordinator
    co.svc.enqueue("p", builtin_descriptor("is_prime"), [5])
    with ws_connect(server.ws_url) as healthy:
        handshake(healthy)
        bad = ws_connect(server.ws_url)
        bad.send("{not json")
        with pytest.raises(Exception) as info:
            bad.recv(timeout=5)
        assert getattr(info.value, "code", None) == 1002 or "1002" in str(info.value)

        # The healthy session still works end to end.
        send(healthy, TicketRequest())
        grant = recv(healthy)
        assert isinstance(grant, TicketGrant)
        send(healthy, ResultSubmit(ticket_id=grant.ticket_id, result=[{"is_prime": True}]))
        assert recv(healthy).status == ACCEPTED


def test_ws_non_hello_first_message_rejected(server):
    ws = ws_connect(server.ws_url)
    send(ws, TicketRequest())
    with pytest.raises(Exception) as info:
        ws.recv(timeout=5)
    assert getattr(info.value, "code", None) == 1002 or "1002" in str(info.value)


# -- persistence across restart ---------------------------------------------------------


def test_journal_replay_across_restart(tmp_path):
    journal = tmp_path / "tickets.journal"
    sched_cfg = SchedulerConfig(persistence_path=str(journal))
    first = Coordinator(CoordinatorConfig(scheduler=sched_cfg))
    ids = first.svc.enqueue("persisted", builtin_descriptor("is_prime"), [2, 3, 4])
    assert first.svc.submit_result(ids[0], "w", [{"is_prime": True}]) == ACCEPTED
    first.svc.flush()

    second = Coordinator(CoordinatorConfig(scheduler=SchedulerConfig(persistence_path=str(journal))))
    stats = second.svc.stats_snapshot()["persisted"]
    assert stats.executed == 1
    assert stats.pending == 2
    assert second.svc.ticket(ids[0]).result == [{"is_prime": True}]

    # And the revived scheduler keeps journaling: finish another ticket, restart again.
    assert second.svc.submit_result(ids[1], "w", [{"is_prime": True}]) == ACCEPTED
    second.svc.flush()
    third = Coordinator(CoordinatorConfig(scheduler=SchedulerConfig(persistence_path=str(journal))))
    assert third.svc.stats_snapshot()["persisted"].executed == 2


def test_start_on_busy_port_raises():
    placeholder = socket.socket()
    placeholder.bind(("127.0.0.1", 0))
    placeholder.listen(1)
    port = placeholder.getsockname()[1]
    try:
        cfg = CoordinatorConfig(port=port)
        with pytest.raises(RuntimeError, match="failed to start"):
            CoordinatorServer(Coordinator(cfg)).start(timeout=10.0)
    finally:
        placeholder.close()
