"""Worker loop: caching, resource integrity, controls, retries, reconnects."""

import hashlib
import socket
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
import requests

from ticketgrid.cache import LruCache
from ticketgrid.coordinator import (
    Coordinator,
    CoordinatorConfig,
    CoordinatorServer,
    HASH_HEADER,
)
from ticketgrid.protocol import COMPLETED, FAILED, TaskDescriptor
from ticketgrid.scheduler import SchedulerConfig
from ticketgrid.tasks import builtin_descriptor, builtin_registry, definition_hash
from ticketgrid.worker import (
    ResourceIntegrityError,
    Worker,
    WorkerConfig,
)

FAST = SchedulerConfig(redistribution_timeout=300.0, min_redistribution_interval=0.05)


def start_server(sched_cfg=FAST):
    return CoordinatorServer(Coordinator(CoordinatorConfig(scheduler=sched_cfg))).start()


def start_worker(endpoint, registry=None, **cfg_kwargs):
    cfg_kwargs.setdefault("backoff_base", 0.05)
    worker = Worker(WorkerConfig(endpoint=endpoint, **cfg_kwargs), registry=registry)
    thread = threading.Thread(target=worker.run, daemon=True)
    thread.start()
    return worker, thread


def wait_until(predicate, timeout=15.0, message="condition"):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return
        time.sleep(0.02)
    raise AssertionError(f"timed out waiting for {message}")


def stop_and_join(worker, thread):
    worker.stop()
    thread.join(timeout=10)
    assert not thread.is_alive()


# -- LRU cache ----------------------------------------------------------------------


def test_cache_round_trip_and_total():
    cache = LruCache(100)
    assert cache.put("a", b"xxxx", "h1")
    assert cache.get("a") == (b"xxxx", "h1")
    assert cache.total_bytes == 4
    assert len(cache) == 1
    assert "a" in cache and "b" not in cache
    assert cache.get("b") is None


def test_cache_eviction_is_lru_with_get_freshening():
    cache = LruCache(10)
    cache.put("a", b"1234", "ha")
    cache.put("b", b"1234", "hb")
    cache.get("a")  # freshen: b is now least recently used
    cache.put("c", b"1234", "hc")  # 12 > 10: evict b
    assert cache.names_lru_order() == ["a", "c"]
    assert "b" not in cache
    assert cache.total_bytes == 8


def test_cache_evicts_multiple_until_bound_holds():
    cache = LruCache(10)
    cache.put("a", b"1234", "ha")
    cache.put("b", b"1234", "hb")
    cache.put("big", b"123456789", "hc")  # needs both evicted
    assert cache.names_lru_order() == ["big"]
    assert cache.total_bytes == 9


def test_cache_rejects_item_larger_than_capacity():
    cache = LruCache(5)
    cache.put("small", b"123", "h")
    assert not cache.put("huge", b"123456", "h2")
    assert "huge" not in cache
    assert cache.names_lru_order() == ["small"]  # existing entries untouched


def test_cache_oversize_replacement_drops_stale_value():
    cache = LruCache(5)
    cache.put("x", b"123", "h1")
    assert not cache.put("x", b"123456", "h2")
    # The old bytes must not survive a failed replacement: they are stale.
    assert "x" not in cache
    assert cache.total_bytes == 0


def test_cache_replacement_updates_total():
    cache = LruCache(10)
    cache.put("x", b"12345678", "h1")
    cache.put("x", b"12", "h2")
    assert cache.total_bytes == 2
    assert cache.get("x") == (b"12", "h2")


def test_cache_clear_and_bad_capacity():
    cache = LruCache(10)
    cache.put("x", b"12", "h")
    cache.clear()
    assert len(cache) == 0 and cache.total_bytes == 0
    with pytest.raises(ValueError):
        LruCache(-1)


# -- resource fetching --------------------------------------------------------------


class _ResourceHandler(BaseHTTPRequestHandler):
    """Serves canned (body, advertised-hash) responses and counts requests."""

    responses: list[tuple[bytes, str]] = []
    requests_seen: list[str] = []

    def do_GET(self):
        type(self).requests_seen.append(self.path)
        body, advertised = self.responses[min(len(self.requests_seen) - 1, len(self.responses) - 1)]
        self.send_response(200)
        self.send_header(HASH_HEADER, advertised)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture
def fake_resource_server():
    class Handler(_ResourceHandler):
        responses = []
        requests_seen = []

    httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    yield Handler, f"ws://127.0.0.1:{httpd.server_address[1]}/distributor"
    httpd.shutdown()


def test_fetch_verifies_hash_and_gives_up_after_one_refetch(fake_resource_server):
    handler, endpoint = fake_resource_server
    handler.responses = [(b"payload", "0" * 64)]  # always wrong
    worker = Worker(WorkerConfig(endpoint=endpoint))
    with pytest.raises(ResourceIntegrityError, match="refetch"):
        worker._fetch_resource("blob")
    assert handler.requests_seen == ["/resource/blob", "/resource/blob"]


def test_fetch_recovers_from_transient_corruption(fake_resource_server):
    handler, endpoint = fake_resource_server
    good = hashlib.sha256(b"payload").hexdigest()
    handler.responses = [(b"payload", "f" * 64), (b"payload", good)]
    worker = Worker(WorkerConfig(endpoint=endpoint))
    assert worker._fetch_resource("blob") == (b"payload", good)
    assert len(handler.requests_seen) == 2


def test_cache_get_or_fetch_hits_cache_on_second_call(fake_resource_server):
    handler, endpoint = fake_resource_server
    good = hashlib.sha256(b"data").hexdigest()
    handler.responses = [(b"data", good)]
    worker = Worker(WorkerConfig(endpoint=endpoint))
    assert worker.cache_get_or_fetch("r") == b"data"
    assert worker.cache_get_or_fetch("r") == b"data"
    assert len(handler.requests_seen) == 1
    assert worker.stats.fetched_resources == 1


def test_http_base_derivation():
    assert Worker(WorkerConfig("ws://host:81/distributor")).http_base == "http://host:81"
    assert Worker(WorkerConfig("wss://host:444/distributor")).http_base == "https://host:444"


# -- end-to-end worker sessions ---------------------------------------------------------


def test_worker_processes_tickets_end_to_end():
    server = start_server()
    try:
        co = server.coordinator
        ids = co.svc.enqueue("p", builtin_descriptor("is_prime"), [2, 4, 97, 1])
        worker, thread = start_worker(server.ws_url)
        incomplete, failed = co.svc.wait_for_tickets(ids, timeout=15)
        assert incomplete == [] and failed == []
        results = [co.svc.ticket(t).result for t in ids]
        assert results == [
            [{"is_prime": True}],
            [{"is_prime": False}],
            [{"is_prime": True}],
            [{"is_prime": True}],
        ]
        wait_until(lambda: worker.stats.processed == 4, message="acks drained")
        stop_and_join(worker, thread)
    finally:
        server.stop()


def test_crash_gate_error_report_then_retry_succeeds():
    server = start_server()
    try:
        co = server.coordinator
        ids = co.svc.enqueue(
            "p", builtin_descriptor("crash_gate"), [{"fail_attempts": 1, "value": "v"}]
        )
        worker, thread = start_worker(server.ws_url)
        incomplete, failed = co.svc.wait_for_tickets(ids, timeout=20)
        assert incomplete == [] and failed == []
        ticket = co.svc.ticket(ids[0])
        assert ticket.result == [{"value": "v", "attempt": 2}]
        assert len(ticket.error_reports) == 1
        assert "injected failure" in ticket.error_reports[0].message
        assert worker.stats.errors == 1
        wait_until(lambda: worker.stats.processed == 1, message="ack drained")
        stop_and_join(worker, thread)
    finally:
        server.stop()


def test_task_version_mismatch_refused_and_reported():
    server = start_server(SchedulerConfig(min_redistribution_interval=0.05, max_errors=1))
    try:
        co = server.coordinator
        bogus = TaskDescriptor(task_id="is_prime", version="f" * 64, resource_deps=[], chunking=1)
        ids = co.svc.enqueue("p", bogus, [5])
        worker, thread = start_worker(server.ws_url)
        incomplete, failed = co.svc.wait_for_tickets(ids, timeout=15)
        assert incomplete == [] and failed == ids
        ticket = co.svc.ticket(ids[0])
        assert ticket.status == FAILED
        assert "version mismatch" in ticket.error_reports[0].message
        stop_and_join(worker, thread)
    finally:
        server.stop()


def test_unknown_local_task_refused_and_reported():
    server = start_server(SchedulerConfig(min_redistribution_interval=0.05, max_errors=1))
    try:
        co = server.coordinator
        mystery = TaskDescriptor(task_id="mystery", version="a" * 64, resource_deps=[], chunking=1)
        ids = co.svc.enqueue("p", mystery, [1])
        worker, thread = start_worker(server.ws_url)
        incomplete, failed = co.svc.wait_for_tickets(ids, timeout=15)
        assert failed == ids
        assert "not registered" in co.svc.ticket(ids[0]).error_reports[0].message
        stop_and_join(worker, thread)
    finally:
        server.stop()


def test_worker_reconnects_when_coordinator_comes_up_late():
    placeholder = socket.socket()
    placeholder.bind(("127.0.0.1", 0))
    port = placeholder.getsockname()[1]
    placeholder.close()

    worker, thread = start_worker(f"ws://127.0.0.1:{port}/distributor")
    wait_until(lambda: worker.stats.reconnects >= 1, message="first failed connect")

    cfg = CoordinatorConfig(port=port, scheduler=FAST)
    server = CoordinatorServer(Coordinator(cfg)).start()
    try:
        ids = server.coordinator.svc.enqueue("p", builtin_descriptor("is_prime"), [11])
        incomplete, failed = server.coordinator.svc.wait_for_tickets(ids, timeout=20)
        assert incomplete == [] and failed == []
        assert worker.stats.reconnects >= 1
        stop_and_join(worker, thread)
    finally:
        server.stop()


def test_stop_control_finishes_in_flight_ticket():
    sleeper_def = {"task": "sleeper", "rule": "sleep each arg seconds, echo it"}
    descriptor = TaskDescriptor(
        task_id="sleeper", version=definition_hash(sleeper_def), resource_deps=[], chunking=1
    )

    def run_sleeper(args, ctx):
        out = []
        for seconds in args:
            time.sleep(float(seconds))
            out.append({"slept": seconds})
        return out

    registry = builtin_registry()
    registry.register(descriptor, run_sleeper)

    server = start_server()
    try:
        co = server.coordinator
        ids = co.svc.enqueue("p", descriptor, [0.8])
        worker, thread = start_worker(server.ws_url, registry=registry)
        wait_until(
            lambda: any(s.tickets_in_flight for s in co.sessions.values()),
            message="grant in flight",
        )
        delivered = requests.post(
            f"{server.http_base}/console", json={"command": "stop"}, timeout=5
        ).json()["delivered"]
        assert delivered == 1
        thread.join(timeout=15)
        assert not thread.is_alive()
        # The in-flight ticket was finished before the worker obeyed the stop.
        assert co.svc.ticket(ids[0]).status == COMPLETED
        assert co.svc.ticket(ids[0]).result == [{"slept": 0.8}]
        assert worker.stats.processed == 1
    finally:
        server.stop()


def test_reload_control_clears_cache_and_reconnects():
    server = start_server()
    try:
        worker, thread = start_worker(server.ws_url)
        wait_until(lambda: server.coordinator.sessions, message="worker connected")
        worker.cache.put("warm", b"bytes", "h")
        requests.post(f"{server.http_base}/console", json={"command": "reload"}, timeout=5)
        wait_until(lambda: worker.stats.reloads >= 1, message="reload observed")
        assert len(worker.cache) == 0
        # Still functional after the reload: process a ticket.
        ids = server.coordinator.svc.enqueue("p", builtin_descriptor("is_prime"), [3])
        incomplete, failed = server.coordinator.svc.wait_for_tickets(ids, timeout=15)
        assert incomplete == [] and failed == []
        stop_and_join(worker, thread)
    finally:
        server.stop()


def test_redirect_control_moves_worker_to_new_coordinator():
    server_a = start_server()
    server_b = start_server()
    try:
        ids = server_b.coordinator.svc.enqueue("p", builtin_descriptor("is_prime"), [13])
        worker, thread = start_worker(server_a.ws_url)
        wait_until(lambda: server_a.coordinator.sessions, message="worker on A")
        requests.post(
            f"{server_a.http_base}/console",
            json={"command": "redirect", "url": server_b.ws_url},
            timeout=5,
        )
        incomplete, failed = server_b.coordinator.svc.wait_for_tickets(ids, timeout=20)
        assert incomplete == [] and failed == []
        assert server_b.coordinator.svc.ticket(ids[0]).result == [{"is_prime": True}]
        stop_and_join(worker, thread)
    finally:
        server_a.stop()
        server_b.stop()


def test_worker_id_proposal_respected():
    server = start_server()
    try:
        worker, thread = start_worker(server.ws_url, worker_id="alice")
        wait_until(lambda: "alice" in server.coordinator.sessions, message="alice connected")
        assert worker.worker_id == "alice"
        stop_and_join(worker, thread)
    finally:
        server.stop()
