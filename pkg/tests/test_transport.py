import pytest

from specpipe.sim import DeadlockError, Sleep, VirtualExecutor, WallExecutor
from specpipe.transport import (
    Blob,
    LinkProfile,
    Network,
    ProtocolError,
    Tag,
    TransportError,
)

from conftest import rng


def make_net(latency=0.0, per_byte=0.0, executor=None):
    ex = executor or VirtualExecutor()
    net = Network(ex, LinkProfile(per_byte_delay=per_byte, msg_latency=latency))
    return ex, net


def run_procs(ex, *procs):
    for i, p in enumerate(procs):
        ex.spawn(f"proc-{i}", p)
    return ex.run()


class TestPointToPoint:
    def test_same_triple_preserves_send_order(self):
        ex, net = make_net(latency=1e-3, per_byte=1e-6)
        got = []

        def sender():
            # big first message, small second: raw delay would invert them
            net.send(0, 1, Tag.ACTIVATIONS, Blob(10_000, "big"))
            net.send(0, 1, Tag.ACTIVATIONS, Blob(10, "small"))
            return
            yield

        def receiver():
            for _ in range(2):
                msg = yield from net.recv(1, 0, Tag.ACTIVATIONS)
                got.append(msg.payload.label)

        run_procs(ex, sender(), receiver())
        assert got == ["big", "small"]

    def test_different_tags_may_interleave(self):
        ex, net = make_net(per_byte=1e-6)
        arrivals = {}

        def sender():
            arrivals["slow"] = net.send(0, 1, Tag.ACTIVATIONS, Blob(10_000)).arrival_time
            arrivals["fast"] = net.send(0, 1, Tag.CANCEL, Blob(1)).arrival_time
            return
            yield

        run_procs(ex, sender())
        assert arrivals["fast"] < arrivals["slow"]

    def test_byte_delay_arithmetic(self):
        ex, net = make_net(per_byte=1e-9)
        msg = net.send(0, 1, Tag.ACTIVATIONS, Blob(1_000_000))
        assert msg.arrival_time - msg.send_time >= 1e-3

    def test_probe_empty_then_present(self):
        ex, net = make_net()
        seen = []

        def proc():
            seen.append(net.probe(1, Tag.LOGITS))
            net.send(0, 1, Tag.LOGITS, Blob(4))
            yield Sleep(0.0)  # let delivery fire
            seen.append(net.probe(1, Tag.LOGITS))
            msg = yield from net.recv(1, 0, Tag.LOGITS)
            seen.append(msg.payload.n)

        run_procs(ex, proc())
        assert seen == [False, True, 4]

    def test_recv_matches_source_and_tag_only(self):
        ex, net = make_net()
        order = []

        def sender():
            net.send(2, 1, Tag.LOGITS, Blob(1, "other-source"))
            net.send(0, 1, Tag.CANCEL, Blob(1, "other-tag"))
            net.send(0, 1, Tag.LOGITS, Blob(1, "wanted"))
            return
            yield

        def receiver():
            msg = yield from net.recv(1, 0, Tag.LOGITS)
            order.append(msg.payload.label)

        run_procs(ex, sender(), receiver())
        assert order == ["wanted"]
        assert net.probe(1, Tag.CANCEL)  # untouched traffic stays queued

    def test_send_to_shutdown_node_rejected(self):
        ex, net = make_net()
        net.mark_shutdown(3)
        with pytest.raises(TransportError):
            net.send(0, 3, Tag.LOGITS, Blob(1))

    def test_blocked_receiver_without_sender_deadlocks_loudly(self):
        ex, net = make_net()

        def receiver():
            yield from net.recv(1, 0, Tag.LOGITS)

        ex.spawn("r", receiver())
        with pytest.raises(DeadlockError):
            ex.run()


class TestTransactions:
    def test_config_completes_before_activations_consumed(self):
        ex, net = make_net(latency=1e-4)
        log = []

        def head():
            net.send_txn(0, 1, Tag.RUN_CONFIG, Blob(8, "cfg-r1"))
            net.send_txn(0, 1, Tag.ACTIVATIONS, Blob(8, "hdr-r1"),
                         body=Blob(512, "acts-r1"))
            return
            yield

        def config_handler(params):
            log.append(("config", params.label))
            return
            yield

        def acts_handler(params):
            msg = yield from net.recv(1, 0, Tag.ACTIVATIONS)
            log.append(("acts", msg.payload.label))

        def shutdown_handler(params):
            return
            yield

        def worker():
            yield from net.dispatch_loop(1, 0, {
                Tag.RUN_CONFIG: config_handler,
                Tag.ACTIVATIONS: acts_handler,
                Tag.SHUTDOWN: shutdown_handler,
            })

        def closer():
            yield Sleep(1.0)
            net.send_txn(0, 1, Tag.SHUTDOWN, None)

        run_procs(ex, head(), worker(), closer())
        assert log == [("config", "cfg-r1"), ("acts", "acts-r1")]

    def test_unknown_transaction_tag_is_fatal(self):
        ex, net = make_net()

        def head():
            net.send_txn(0, 1, Tag.LOGITS, Blob(1))
            return
            yield

        def worker():
            yield from net.dispatch_loop(1, 0, {})

        ex.spawn("h", head())
        ex.spawn("w", worker())
        with pytest.raises(ProtocolError):
            ex.run()

    def test_randomized_transactions_keep_per_tag_order(self):
        # order-log oracle: per (src, dst, tag) receive order == send order
        ex, net = make_net(latency=1e-4, per_byte=1e-7)
        r = rng(42)
        n_nodes, n_msgs = 4, 1000
        sent = {}
        received = {}

        def sender(src):
            def proc():
                for i in range(n_msgs):
                    dst = int(r.integers(0, n_nodes))
                    if dst == src:
                        dst = (dst + 1) % n_nodes
                    tag = Tag.ACTIVATIONS if r.integers(2) else Tag.RUN_CONFIG
                    size = int(r.integers(1, 5000))
                    label = (src, i)
                    sent.setdefault((src, dst, tag), []).append(label)
                    net.send(src, dst, tag, Blob(size, label))
                    if r.integers(3) == 0:
                        yield Sleep(float(r.random()) * 1e-3)
            return proc()

        def drainer(node):
            def proc():
                yield Sleep(10.0)
                for tag in (Tag.ACTIVATIONS, Tag.RUN_CONFIG):
                    for msg in net.drain(node, tag):
                        received.setdefault((msg.src, node, tag), []).append(
                            msg.payload.label
                        )
            return proc()

        run_procs(ex, *[sender(i) for i in range(n_nodes)],
                  *[drainer(i) for i in range(n_nodes)])
        assert sum(len(v) for v in received.values()) == n_nodes * n_msgs
        for key, sent_order in sent.items():
            assert received.get(key, []) == sent_order, f"order violated on {key}"


class TestCancelChannel:
    def test_cancel_overtakes_bulk_data(self):
        ex, net = make_net(latency=1e-4, per_byte=1e-6)
        order = []

        def head():
            net.send(0, 1, Tag.ACTIVATIONS, Blob(100_000, "bulk"))
            net.send_cancel(0, [1], Blob(1, "cancel"))
            return
            yield

        def worker():
            while len(order) < 2:
                for payload in net.poll_cancel(1):
                    order.append(payload.label)
                if net.probe(1, Tag.ACTIVATIONS):
                    msg = yield from net.recv(1, 0, Tag.ACTIVATIONS)
                    order.append(msg.payload.label)
                yield Sleep(1e-5)

        run_procs(ex, head(), worker())
        assert order == ["cancel", "bulk"]

    def test_cancel_of_unknown_run_is_harmless(self):
        ex, net = make_net()
        net.send_cancel(0, [1, 2], Blob(1, "run-99"))

        def worker(node):
            def proc():
                yield Sleep(1e-3)
                assert [p.label for p in net.poll_cancel(node)] == ["run-99"]
            return proc()

        run_procs(ex, worker(1), worker(2))


class TestWallClock:
    def test_ordering_holds_under_threads(self):
        ex = WallExecutor()
        net = Network(ex, LinkProfile(msg_latency=1e-4, per_byte_delay=1e-7))
        got = []

        def sender():
            for i in range(50):
                net.send(0, 1, Tag.ACTIVATIONS, Blob(int(rng(i).integers(1, 2000)), i))
                if i % 7 == 0:
                    yield Sleep(1e-4)

        def receiver():
            for _ in range(50):
                msg = yield from net.recv(1, 0, Tag.ACTIVATIONS)
                got.append(msg.payload.label)

        ex.spawn("s", sender())
        ex.spawn("r", receiver())
        ex.run(timeout=30.0)
        assert got == list(range(50))


class TestDeterminism:
    def test_same_schedule_same_trace(self):
        def run_once():
            ex, net = make_net(latency=1e-4, per_byte=1e-8)
            r = rng(7)
            trace = []

            def sender():
                for i in range(100):
                    net.send(0, 1, Tag.LOGITS, Blob(int(r.integers(1, 9999)), i))
                    yield Sleep(float(r.random()) * 1e-4)

            def receiver():
                for _ in range(100):
                    msg = yield from net.recv(1, 0, Tag.LOGITS)
                    trace.append((round(ex.now(), 12), msg.payload.label))

            run_procs(ex, sender(), receiver())
            return trace

        assert run_once() == run_once()
