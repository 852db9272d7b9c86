use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use servesim::config::presets;
use servesim::engine::{kv_tokens, route, EngineError};
use servesim::metrics::{tbt_series, ttft};
use servesim::sched::NodeRole;
use servesim::{run, PolicyConfig, PrefillOrder, Request, RequestId, Router, SimConfig};

fn req(id: u64, t: f64, p: u64, o: u64) -> Request<f64> {
    Request {
        id: RequestId(id),
        arrival_time: t,
        prompt_len: p,
        output_len: o,
        class: "default".into(),
        tbt_slo: 1e6,
    }
}

fn toy_cfg(policy: PolicyConfig<f64>, nodes: usize) -> SimConfig<f64> {
    SimConfig::new(presets::toy(), policy, nodes)
}

#[test]
fn empty_trace() {
    let res = run(&toy_cfg(PolicyConfig::Rad { n: 2 }, 1), &[]).unwrap();
    assert!(res.requests.is_empty());
    assert!(res.batches.is_empty());
}

#[test]
fn single_request_hand_trace() {
    // PI(1,2) = 1 + 2 + 2 = 5; DI(3) = 1 + 1 + 4 = 6; DI(4) = 1 + 1 + 4 = 6
    let res = run(&toy_cfg(PolicyConfig::Rad { n: 2 }, 1), &[req(0, 0.0, 2, 2)]).unwrap();
    let r = &res.requests[0];
    assert_eq!(r.completion, Some(17.0));
    assert_eq!(ttft(r), Some(5.0));
    assert_eq!(r.emits, vec![5.0, 11.0, 17.0]);
    assert_eq!(tbt_series(r), vec![6.0, 6.0]);
    let durations: Vec<f64> = res.batches.iter().map(|b| b.end - b.start).collect();
    assert_eq!(durations, vec![5.0, 6.0, 6.0]);
}

#[test]
fn exact_scalar_hand_trace() {
    use servesim::Exact;
    let cfg = SimConfig::new(presets::toy::<Exact>(), PolicyConfig::Rad { n: 2 }, 1);
    let trace = vec![Request {
        id: RequestId(0),
        arrival_time: Exact::from_integer(0),
        prompt_len: 2,
        output_len: 2,
        class: "default".into(),
        tbt_slo: Exact::from_integer(1000),
    }];
    let res = run(&cfg, &trace).unwrap();
    assert_eq!(res.requests[0].completion, Some(Exact::from_integer(17)));
}

#[test]
fn arrival_waits_for_running_batch() {
    // second request arrives mid-prefill and starts after the first batch
    let res = run(
        &toy_cfg(PolicyConfig::Rad { n: 4 }, 1),
        &[req(0, 0.0, 2, 1), req(1, 1.0, 2, 1)],
    )
    .unwrap();
    let b1 = &res.batches[1];
    assert_eq!(b1.start, 5.0);
    assert_eq!(b1.chunks[0].request, RequestId(1));
}

#[test]
fn alt_cycle_tbt_equals_decode_batch() {
    let trace: Vec<_> = (0..2).map(|k| req(k, 0.0, 2, 4)).collect();
    let res = run(&toy_cfg(PolicyConfig::AltCycle { n: 2 }, 1), &trace).unwrap();
    for r in &res.requests {
        let gaps = tbt_series(r);
        assert_eq!(gaps.len(), 4);
        // once decoding, each gap is exactly one decode-only batch
        for (k, g) in gaps.iter().enumerate().skip(1) {
            let end = r.emits[k + 1];
            let b = res.batches.iter().find(|b| b.end == end).unwrap();
            assert_eq!(b.n_prefill, 0);
            assert_eq!(*g, b.end - b.start);
        }
    }
}

#[test]
fn routing_single_node() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut rr = 0;
    for _ in 0..100 {
        assert_eq!(route(Router::UniformRandom, &[0], &mut rr, &mut rng), 0);
    }
}

#[test]
fn routing_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut rr = 0;
    let mut counts = [0usize; 4];
    for _ in 0..10_000 {
        counts[route(Router::UniformRandom, &[0, 1, 2, 3], &mut rr, &mut rng)] += 1;
    }
    let sigma = (10_000.0f64 * 0.25 * 0.75).sqrt();
    for c in counts {
        assert!((c as f64 - 2500.0).abs() <= 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn distserve_arrivals_go_to_prefill_node() {
    let trace: Vec<_> = (0..20).map(|k| req(k, k as f64, 4, 3)).collect();
    let cfg = toy_cfg(PolicyConfig::DistServe { chunked: false }, 2);
    assert_eq!(cfg.roles, vec![NodeRole::Prefill, NodeRole::Decode]);
    let res = run(&cfg, &trace).unwrap();
    assert!(res.requests.iter().all(|r| r.node == Some(0)));
    assert!(res.requests.iter().all(|r| r.completion.is_some()));
    for b in &res.batches {
        match b.node {
            0 => assert_eq!(b.n_decode, 0),
            _ => assert_eq!(b.n_prefill, 0),
        }
    }
}

#[test]
fn kv_token_accounting() {
    assert_eq!(kv_tokens(64, 1, 0, false), 0);
    assert_eq!(kv_tokens(64, 33, 0, false), 32);
    assert_eq!(kv_tokens(64, 65, 3, false), 67);
    assert_eq!(kv_tokens(64, 65, 3, true), 0);
}

#[test]
fn memory_overflow_is_reported() {
    let mut cost = presets::toy::<f64>();
    cost.gpu.kv_token_capacity = 10;
    let cfg = SimConfig::new(
        cost,
        PolicyConfig::Vllm {
            token_budget: 8,
            max_active: None,
        },
        1,
    );
    let trace: Vec<_> = (0..4).map(|k| req(k, 0.0, 6, 4)).collect();
    match run(&cfg, &trace) {
        Err(EngineError::MemoryOverflow { capacity, needed, .. }) => {
            assert_eq!(capacity, 10);
            assert!(needed > 10);
        }
        other => panic!("expected overflow, got {other:?}"),
    }
}

#[test]
fn horizon_stops_the_run() {
    let trace: Vec<_> = (0..50).map(|k| req(k, k as f64, 2, 2)).collect();
    let mut cfg = toy_cfg(PolicyConfig::Rad { n: 4 }, 1);
    cfg.horizon = Some(30.0);
    let res = run(&cfg, &trace).unwrap();
    assert!(res.end_time <= 30.0);
    assert!(res.batches.iter().all(|b| b.end <= 30.0));
    assert!(res.requests.iter().any(|r| r.completion.is_none()));
}

#[test]
fn rerun_is_identical() {
    let trace: Vec<_> = (0..30).map(|k| req(k, 0.3 * k as f64, 2 + (k % 5), 1 + (k % 3))).collect();
    for policy in [
        PolicyConfig::Rad { n: 3 },
        PolicyConfig::Sarathi {
            token_budget: 8,
            order: PrefillOrder::Spf,
            max_active: None,
        },
    ] {
        let cfg = toy_cfg(policy, 3);
        let a = run(&cfg, &trace).unwrap();
        let b = run(&cfg, &trace).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn aligned_prompts_rejects_unaligned_prompts() {
    let mut cfg = toy_cfg(PolicyConfig::Rad { n: 2 }, 1);
    cfg.aligned_prompts = true;
    assert!(run(&cfg, &[req(0, 0.0, 3, 1)]).is_err());
    assert!(run(&cfg, &[req(0, 0.0, 4, 1)]).is_ok());
}

#[test]
fn rad_records_cycles() {
    let trace: Vec<_> = (0..12).map(|k| req(k, 0.0, 2, 2)).collect();
    let res = run(&toy_cfg(PolicyConfig::Rad { n: 4 }, 1), &trace).unwrap();
    let done: u32 = res.cycles.iter().map(|c| c.completed).sum();
    assert_eq!(done, 12);
    assert!(res.cycles.len() >= 3);
}

#[test]
fn csv_outputs_written() {
    let dir = tempfile::tempdir().unwrap();
    let trace: Vec<_> = (0..5).map(|k| req(k, k as f64, 2, 2)).collect();
    let res = run(&toy_cfg(PolicyConfig::Rad { n: 2 }, 1), &trace).unwrap();
    res.save_csvs(dir.path()).unwrap();
    for f in ["batches.csv", "requests.csv", "tokens.csv"] {
        let s = std::fs::read_to_string(dir.path().join(f)).unwrap();
        assert!(s.lines().count() > 1, "{f}");
    }
}
