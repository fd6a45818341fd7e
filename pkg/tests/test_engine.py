import pytest

from specpipe.engine import (
    EngineError,
    ExperimentConfig,
    plan_layer_split,
    simulate,
)
from specpipe.model import reference_decode, sample_prompt


def base_cfg(**kw):
    defaults = dict(
        mode="async-speculative", nodes=4, vocab_size=64, embed_dim=32,
        target_layers=6, draft_layers=2, max_context=512, prompt_len=16,
        gen_len=20, prompt_seed=5, target_seed=7, draft_seed=11,
        cutoff=0.0, cutoff_decay=0.0,
        per_layer_delay=1e-4, link_latency=1e-6, draft_token_delay=5e-5,
    )
    defaults.update(kw)
    return ExperimentConfig(**defaults)


def oracle_tokens(cfg: ExperimentConfig):
    prompt = sample_prompt(cfg.prompt_seed, cfg.prompt_len, cfg.vocab_size)
    return reference_decode(cfg.target_config(), prompt, cfg.gen_len)


class TestPlanLayerSplit:
    def test_equal_split(self):
        assert plan_layer_split(12, 4) == [(0, 3), (3, 6), (6, 9), (9, 12)]

    def test_weighted_split(self):
        assert plan_layer_split(12, 4, [2, 1, 1, 2]) == [
            (0, 4), (4, 6), (6, 8), (8, 12)
        ]

    def test_too_few_layers(self):
        with pytest.raises(EngineError):
            plan_layer_split(3, 4)

    def test_remainder_to_earliest(self):
        assert plan_layer_split(13, 4) == [(0, 4), (4, 7), (7, 10), (10, 13)]

    def test_bad_weights(self):
        with pytest.raises(EngineError):
            plan_layer_split(12, 4, [1, 1])
        with pytest.raises(EngineError):
            plan_layer_split(12, 2, [1, 0])


class TestOutputEquivalence:
    @pytest.mark.parametrize("seed", [5, 21])
    def test_all_modes_byte_identical(self, seed):
        want = oracle_tokens(base_cfg(prompt_seed=seed))
        for mode, nodes in [
            ("iterative", 1),
            ("pipeline-iterative", 3),
            ("sync-speculative", 4),
            ("async-speculative", 4),
        ]:
            res = simulate(base_cfg(mode=mode, nodes=nodes, prompt_seed=seed))
            assert res.tokens == want, f"{mode} diverged"

    @pytest.mark.parametrize("alpha", [0.0, 0.35, 0.8, 1.0])
    def test_synthetic_alpha_equivalence(self, alpha):
        cfg = base_cfg(draft_backend="synthetic", alpha=alpha)
        assert simulate(cfg).tokens == oracle_tokens(cfg)

    def test_weighted_pipeline_equivalence(self):
        cfg = base_cfg(mode="pipeline-iterative", nodes=3,
                       node_weights=(2, 1, 3))
        assert simulate(cfg).tokens == oracle_tokens(cfg)


class TestPerfectAlignment:
    def test_alpha_one_no_rejections_no_cancellations(self):
        cfg = base_cfg(draft_backend="synthetic", alpha=1.0, gen_len=24)
        res = simulate(cfg)
        m = res.metrics
        assert m.examined > 0
        assert m.matched == m.examined          # zero rejected tokens
        assert m.acceptance_rate == 1.0
        assert m.cancelled_runs == 0

    def test_alpha_zero_equals_iterative_output(self):
        cfg = base_cfg(draft_backend="synthetic", alpha=0.0, gen_len=16)
        res = simulate(cfg)
        it = simulate(base_cfg(mode="iterative", nodes=1, gen_len=16))
        assert res.tokens == it.tokens
        assert res.metrics.matched == 0


class TestCancellationBehavior:
    def test_cancelled_runs_provably_stale(self):
        # every cancellation is justified against the final serial output
        cfg = base_cfg(draft_backend="synthetic", alpha=0.4, gen_len=24)
        res = simulate(cfg)
        assert res.cancel_log, "expected some cancellations at alpha=0.4"
        truth = res.accepted_full
        for entry in res.cancel_log:
            if entry.reason == "superfluous":
                assert entry.max_pos < entry.accepted_len_at_cancel - 1
            else:
                diverging = [
                    pos for pos, tok in entry.chain
                    if pos < entry.accepted_len_at_cancel and tok != truth[pos]
                ]
                assert diverging, f"invalid cancel without divergence: {entry}"

    def test_workers_skip_cancelled_speculative_runs(self):
        # zero recovery lets a doomed chain pile deep into the pipeline, so
        # one round's cancellations catch runs at several stages: abandoned
        # mid-evaluation, skipped outright, or passed through as placeholders
        cfg = base_cfg(draft_backend="synthetic", alpha=0.0, gen_len=16,
                       cutoff_recovery=0.0,
                       per_layer_delay=2e-3, link_latency=1e-6,
                       draft_token_delay=1e-5)
        res = simulate(cfg)
        events = [e for log in res.node_logs.values() for e in log]
        kinds = {e[0] for e in events}
        assert "skip-cancelled" in kinds
        assert "abandon" in kinds or "placeholder-through" in kinds
        assert "placeholder-through" in kinds

    @pytest.mark.parametrize("kind,expect", [
        ("non-speculative", "evaluated"),
        ("speculative", "skip-cancelled"),
    ])
    def test_cancelled_run_evaluation_policy_at_worker(self, small_model,
                                                       kind, expect):
        # a cancelled non-speculative run is still evaluated in full (its
        # cells are canonical truth); a cancelled speculative run is skipped
        from specpipe.engine import (ActivationPayload, CancelPayload,
                                     RunConfigPayload, _Worker)
        from specpipe.sim import VirtualExecutor
        from specpipe.transport import LinkProfile, Network, Tag

        ex = VirtualExecutor()
        net = Network(ex, LinkProfile(msg_latency=1e-5))
        cfg = base_cfg(nodes=2)
        worker = _Worker(1, 0, None, net, small_model, (0, 6), cfg)
        meta = RunConfigPayload(
            run_id=7, kind=kind, tokens=(5,), positions=(0,),
            seq_sets=((1,),) if kind == "speculative" else ((0,),),
            logit_flags=(True,),
        )

        def head():
            net.send_txn(0, 1, Tag.RUN_CONFIG, meta)
            net.send_cancel(0, [1], CancelPayload(7))
            yield Sleep(1e-3)  # cancel lands before the activations
            net.send_txn(0, 1, Tag.ACTIVATIONS, 7,
                         ActivationPayload(7, None, False))
            yield Sleep(1e-2)
            net.send_txn(0, 1, Tag.SHUTDOWN, None)
            msg = yield from net.recv(0, 1, Tag.LOGITS)
            assert msg.payload.placeholder == (kind == "speculative")

        from specpipe.sim import Sleep
        ex.spawn("worker", worker.proc())
        ex.spawn("head", head())
        ex.run()
        kinds = {e[0] for e in worker.log}
        assert expect in kinds

    def test_every_run_yields_exactly_one_logits_message(self):
        cfg = base_cfg(draft_backend="synthetic", alpha=0.2, gen_len=16)
        res = simulate(cfg)
        logits_to_head = res.sent.get((0, "LOGITS"), 0)
        assert logits_to_head == res.metrics.runs_started


class TestPipelineIntegrity:
    def test_transaction_order_identical_on_every_stage(self):
        # pipelined operations execute at their position on each node
        cfg = base_cfg(draft_backend="synthetic", alpha=0.6, gen_len=16)
        res = simulate(cfg)
        stage_nodes = sorted(n for n in res.node_logs if n < max(res.node_logs))
        txn_kinds = {"run-config", "cache-copy", "cache-remove", "shutdown"}
        projections = []
        for node in stage_nodes:
            projections.append([e for e in res.node_logs[node]
                                if e[0] in txn_kinds])
        for proj in projections[1:]:
            assert proj == projections[0]

    def test_messages_consumed_equal_sent_per_node_and_tag(self):
        cfg = base_cfg(draft_backend="synthetic", alpha=0.3, gen_len=16)
        res = simulate(cfg)
        for key, sent in sorted(res.sent.items()):
            assert res.consumed.get(key, 0) == sent, f"unconsumed traffic {key}"

    def test_fifo_completion_order(self):
        cfg = base_cfg(draft_backend="synthetic", alpha=0.5, gen_len=16)
        res = simulate(cfg)
        # the controller raises on out-of-order logits; additionally every
        # record must have left the in-flight state
        assert all(r.status != "in-flight" for r in res.records)
        times = [t for t, _ in res.accept_events]
        assert times == sorted(times)

    def test_partition_exhaustion_stalls_not_crashes(self):
        cfg = base_cfg(draft_backend="synthetic", alpha=1.0, partitions=2,
                       gen_len=16)
        res = simulate(cfg)
        assert res.tokens == oracle_tokens(cfg)
        # with a single speculative partition, at most one spec run in flight
        assert res.metrics.spec_runs > 0


class TestUtilization:
    def test_async_keeps_more_runs_in_flight_than_sync(self):
        async_cfg = base_cfg(mode="async-speculative", nodes=8,
                             target_layers=12, draft_backend="synthetic",
                             alpha=0.8, gen_len=32,
                             per_layer_delay=1e-3, link_latency=1e-5,
                             draft_token_delay=5e-4)
        sync_cfg = base_cfg(mode="sync-speculative", nodes=8, target_layers=12,
                            draft_backend="synthetic", alpha=0.8, gen_len=32,
                            per_layer_delay=1e-3, link_latency=1e-5,
                            draft_token_delay=5e-4)
        a = simulate(async_cfg).metrics.inflight_mean
        s = simulate(sync_cfg).metrics.inflight_mean
        assert a > s


class TestTiming:
    def test_pipeline_iterative_ttft_arithmetic(self):
        # one token through L layers at d seconds per layer plus one message
        # hop per stage boundary and the logits return
        cfg = base_cfg(mode="pipeline-iterative", nodes=3, gen_len=4,
                       per_layer_delay=1e-3, link_latency=1e-5,
                       per_byte_delay=0.0)
        res = simulate(cfg)
        expect = 6 * 1e-3 + 3 * 1e-5
        assert res.metrics.ttft == pytest.approx(expect, rel=1e-9)

    def test_metric_identity(self):
        cfg = base_cfg(draft_backend="synthetic", alpha=0.7, gen_len=24)
        m = simulate(cfg).metrics
        k = m.tokens_generated - 1
        recon = k / (m.ttft + m.itl * (k - 1))
        assert recon == pytest.approx(m.generation_speed, rel=1e-9)


class TestTermination:
    def test_eos_halts_generation_early(self):
        probe = simulate(base_cfg(mode="iterative", nodes=1, gen_len=12))
        eos = probe.tokens[4]
        cfg = base_cfg(mode="iterative", nodes=1, gen_len=12, eos_token=eos)
        res = simulate(cfg)
        assert res.tokens == probe.tokens[:5]
        assert res.tokens[-1] == eos

    def test_eos_in_async_mode(self):
        probe = simulate(base_cfg(gen_len=12))
        eos = probe.tokens[5]
        res = simulate(base_cfg(gen_len=12, eos_token=eos))
        idx = res.tokens.index(eos)
        assert res.tokens == probe.tokens[:idx + 1]


class TestDeterminism:
    def test_virtual_clock_trace_identical(self):
        cfg = base_cfg(draft_backend="synthetic", alpha=0.6, gen_len=16)
        a = simulate(cfg)
        b = simulate(cfg)
        assert a.tokens == b.tokens
        assert a.accept_events == b.accept_events
        assert a.metrics.to_dict(include_wall=False) == \
            b.metrics.to_dict(include_wall=False)


class TestWallClock:
    def test_wall_mode_produces_same_tokens(self):
        cfg = base_cfg(clock="wall", gen_len=8, prompt_len=8,
                       per_layer_delay=1e-5, link_latency=1e-6,
                       draft_token_delay=1e-5)
        res = simulate(cfg)
        assert res.tokens == oracle_tokens(cfg)
        assert res.metrics.generation_speed > 0


class TestConfigValidation:
    def test_unknown_mode(self):
        with pytest.raises(EngineError):
            base_cfg(mode="warp").validate()

    def test_speculative_needs_two_nodes(self):
        with pytest.raises(EngineError):
            base_cfg(mode="async-speculative", nodes=1).validate()

    def test_context_budget(self):
        with pytest.raises(EngineError):
            base_cfg(prompt_len=400, gen_len=200).validate()

    def test_idle_poll_positive(self):
        with pytest.raises(EngineError):
            base_cfg(idle_poll=0.0).validate()

    def test_microbatch_range(self):
        with pytest.raises(EngineError):
            base_cfg(microbatch=5).validate()
