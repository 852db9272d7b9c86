use servesim::sched::{
    is_critical, last_schedulable_time, AltCycle, DecodeEntry, DistServeDecode, DistServePrefill, OffsetPolicy,
    PrefillEntry, PrefillPriority, Rad, RequestLevel, Sarathi, SchedError, Scheduler, SchedulerDecision,
    SchedulerView, Slai,
};
use servesim::{BatchPlan, PolicyConfig, PrefillItem, PrefillOrder, RequestId, TileConfig, NodeRole};

const TOY: TileConfig = TileConfig::new(2, 2, 2);
const BIG: TileConfig = TileConfig::new(128, 256, 64);

fn pe(id: u64, prompt_len: u64, next_index: u64) -> PrefillEntry<f64> {
    PrefillEntry {
        id: RequestId(id),
        arrival_time: id as f64,
        prompt_len,
        next_index,
        class: "default".into(),
        tbt_slo: 0.5,
    }
}

fn de(id: u64, index: u64, last_emit: f64, tbt_slo: f64) -> DecodeEntry<f64> {
    DecodeEntry {
        id: RequestId(id),
        arrival_time: 0.0,
        prompt_len: 4,
        index,
        class: "default".into(),
        tbt_slo,
        last_emit,
    }
}

fn view<'a>(p: &'a [PrefillEntry<f64>], d: &'a [DecodeEntry<f64>], clock: f64, tbar: f64) -> SchedulerView<'a, f64> {
    SchedulerView {
        clock,
        prefill_queue: p,
        decode_set: d,
        mean_batch_time: tbar,
        kv_tokens_used: 0,
        kv_token_capacity: 1 << 30,
    }
}

fn plan(dec: SchedulerDecision) -> BatchPlan {
    dec.plan.expect("expected a batch")
}

fn decodes(n: u64) -> Vec<DecodeEntry<f64>> {
    (0..n).map(|k| de(k, 5, 0.0, 0.5)).collect()
}

#[test]
fn rad_idle_when_empty() {
    let mut s = Rad::new(4, TOY).unwrap();
    assert!(Scheduler::<f64>::next(&mut s, &view(&[], &[], 0.0, 0.0)).unwrap().is_idle());
}

#[test]
fn rad_full_decode_batch() {
    let mut s = Rad::new(4, BIG).unwrap();
    let d = decodes(256);
    let p = vec![pe(1000, 256, 1)];
    let b = plan(s.next(&view(&p, &d, 0.0, 0.0)).unwrap());
    assert_eq!(b.decode.len(), 256);
    assert!(b.prefill.is_empty());
}

#[test]
fn rad_first_chunk_is_t_lcm() {
    let mut s = Rad::new(4, BIG).unwrap();
    let p = vec![pe(0, 3 * 256, 1)];
    let b = plan(s.next(&view(&p, &[], 0.0, 0.0)).unwrap());
    assert_eq!(
        b.prefill,
        vec![PrefillItem {
            request: RequestId(0),
            start: 1,
            chunk: 256
        }]
    );
    assert!(b.decode.is_empty());
}

#[test]
fn rad_keeps_prefilling_current_request() {
    let mut s = Rad::new(4, TOY).unwrap();
    let p = vec![pe(0, 6, 1), pe(1, 2, 1)];
    let b = plan(s.next(&view(&p, &[], 0.0, 0.0)).unwrap());
    assert_eq!(b.prefill[0].request, RequestId(0));
    let p = vec![pe(0, 6, 3), pe(1, 2, 1)];
    let b = plan(s.next(&view(&p, &[], 1.0, 0.0)).unwrap());
    assert_eq!((b.prefill[0].request, b.prefill[0].start, b.prefill[0].chunk), (RequestId(0), 3, 2));
}

#[test]
fn alt_cycle_admits_n_then_switches() {
    let n = 3;
    let mut s = AltCycle::new(n, TOY).unwrap();
    let mut p: Vec<_> = (0..n as u64 + 5).map(|k| pe(k, 2, 1)).collect();
    let mut d = Vec::new();
    let mut prefilled = 0;
    loop {
        let b = plan(s.next(&view(&p, &d, 0.0, 0.0)).unwrap());
        if !b.decode.is_empty() {
            break;
        }
        let item = b.prefill[0];
        assert_eq!(item.chunk, 2);
        p.retain(|e| e.id != item.request);
        d.push(de(item.request.0, 3, 0.0, 0.5));
        prefilled += 1;
    }
    assert_eq!(prefilled, n);
}

#[test]
fn alt_cycle_active_set_capped_and_refilled() {
    let mut s = AltCycle::new(1, TOY).unwrap();
    // admit one, then decode with five resident requests
    let p = vec![pe(100, 2, 1)];
    plan(s.next(&view(&p, &[], 0.0, 0.0)).unwrap());
    let mut d: Vec<_> = (0..5).map(|k| de(k, 3, 0.0, 0.5)).collect();
    let b = plan(s.next(&view(&[], &d, 1.0, 0.0)).unwrap());
    assert_eq!(b.decode.len(), 2);
    let first: Vec<_> = b.decode.iter().map(|x| x.request).collect();
    assert_eq!(first, vec![RequestId(0), RequestId(1)]);
    // request 0 finishes; request 2 is promoted
    d.remove(0);
    let b = plan(s.next(&view(&[], &d, 2.0, 0.0)).unwrap());
    let ids: Vec<_> = b.decode.iter().map(|x| x.request).collect();
    assert_eq!(ids, vec![RequestId(1), RequestId(2)]);
}

#[test]
fn request_level_modes() {
    let b_max = 2;
    let mut s = RequestLevel::new(b_max, TOY).unwrap();
    let d = vec![de(9, 5, 0.0, 0.5)];
    let b = plan(s.next(&view(&[], &d, 0.0, 0.0)).unwrap());
    assert_eq!(b.decode.len(), 1);
    assert!(b.prefill.is_empty());

    let mut s = RequestLevel::new(b_max, TOY).unwrap();
    let p: Vec<_> = (0..b_max as u64 + 2).map(|k| pe(k, 3 + k, 1)).collect();
    let b = plan(s.next(&view(&p, &[], 0.0, 0.0)).unwrap());
    assert_eq!(b.prefill.len(), b_max as usize);
    assert!(b.prefill.iter().zip(&p).all(|(x, e)| x.chunk == e.prompt_len));

    let mut s = RequestLevel::new(b_max, TOY).unwrap();
    assert!(Scheduler::<f64>::next(&mut s, &view(&[], &[], 0.0, 0.0)).unwrap().is_idle());
}

#[test]
fn sarathi_examples() {
    let mut s = Sarathi::new(512, PrefillOrder::Fcfs, None, BIG).unwrap();
    let d = vec![de(0, 10, 0.0, 0.5)];
    let b = plan(s.next(&view(&[], &d, 0.0, 0.0)).unwrap());
    assert_eq!((b.decode.len(), b.token_count()), (1, 1));

    let p = vec![pe(1, 600, 1)];
    let b = plan(s.next(&view(&p, &[], 0.0, 0.0)).unwrap());
    assert_eq!((b.prefill[0].start, b.prefill[0].chunk), (1, 512));

    let d = decodes(512);
    let b = plan(s.next(&view(&p, &d, 0.0, 0.0)).unwrap());
    assert_eq!(b.decode.len(), 512);
    assert!(b.prefill.is_empty());
}

#[test]
fn sarathi_chunk_finishes_prompt_exactly() {
    let mut s = Sarathi::new(512, PrefillOrder::Fcfs, None, BIG).unwrap();
    // tokens 513..=600 remain
    let p = vec![pe(1, 600, 513)];
    let b = plan(s.next(&view(&p, &[], 0.0, 0.0)).unwrap());
    assert_eq!((b.prefill[0].start, b.prefill[0].chunk, b.prefill[0].end()), (513, 88, 600));
}

#[test]
fn sarathi_spf_order() {
    let mut s = Sarathi::new(120, PrefillOrder::Spf, None, BIG).unwrap();
    let p = vec![pe(0, 100, 1), pe(1, 50, 1)];
    let b = plan(s.next(&view(&p, &[], 0.0, 0.0)).unwrap());
    assert_eq!(b.prefill[0].request, RequestId(1));
    assert_eq!((b.prefill[1].request, b.prefill[1].chunk), (RequestId(0), 70));
}

#[test]
fn sarathi_rejects_budget_below_cap() {
    assert!(matches!(
        Sarathi::new(64, PrefillOrder::Fcfs, Some(128), BIG),
        Err(SchedError::Budget { .. })
    ));
}

#[test]
fn vllm_examples() {
    let mut s = PrefillPriority::new(512, None, BIG).unwrap();
    let p = vec![pe(1, 512, 1)];
    let d = vec![de(0, 10, 0.0, 0.5)];
    let b = plan(s.next(&view(&p, &d, 0.0, 0.0)).unwrap());
    assert_eq!(b.prefill.len(), 1);
    assert!(b.decode.is_empty());

    let d = decodes(600);
    let b = plan(s.next(&view(&[], &d, 0.0, 0.0)).unwrap());
    assert_eq!(b.decode.len(), 512);
    assert!(Scheduler::<f64>::next(&mut s, &view(&[], &[], 0.0, 0.0)).unwrap().is_idle());
}

#[test]
fn vllm_decodes_longest_waiting_first() {
    let mut s = PrefillPriority::new(2, None, BIG).unwrap();
    let d = vec![de(0, 9, 3.0, 0.5), de(1, 9, 1.0, 0.5), de(2, 9, 2.0, 0.5)];
    let b = plan(s.next(&view(&[], &d, 4.0, 0.0)).unwrap());
    let ids: Vec<_> = b.decode.iter().map(|x| x.request).collect();
    assert_eq!(ids, vec![RequestId(1), RequestId(2)]);
}

#[test]
fn last_schedulable_time_examples() {
    let c: f64 = last_schedulable_time(2.0, 0.5, 10.0, 0.02);
    assert!((c - 2.3).abs() < 1e-12);
    assert!(is_critical(2.35, c));
    assert!(!is_critical(2.4, last_schedulable_time(2.0, 0.5, 0.0, 0.02)));
    assert_eq!(last_schedulable_time(2.0, 0.5, 10.0, 0.0), 2.5);
}

fn slai(order: PrefillOrder) -> Slai<f64> {
    Slai::new(512, 128, 128, OffsetPolicy::Fixed(10.0), order, false, BIG).unwrap()
}

#[test]
fn slai_critical_decode_goes_first() {
    let mut s = slai(PrefillOrder::Fcfs);
    let d = vec![de(0, 10, 2.0, 0.5)];
    let p = vec![pe(1, 8000, 1)];
    let dec = s.next(&view(&p, &d, 2.35, 0.02)).unwrap();
    assert_eq!(dec.notes.critical, vec![RequestId(0)]);
    let b = plan(dec);
    assert_eq!(b.decode[0].request, RequestId(0));
    assert_eq!(b.prefill[0].chunk, 511);
}

#[test]
fn slai_spf_admits_shorter_first() {
    let mut s = slai(PrefillOrder::Spf);
    let p = vec![pe(0, 100, 1), pe(1, 50, 1)];
    let b = plan(s.next(&view(&p, &[], 0.0, 0.02)).unwrap());
    assert_eq!(b.prefill[0].request, RequestId(1));
    assert_eq!(b.prefill[1].request, RequestId(0));
}

#[test]
fn slai_relaxed_decodes_by_deadline() {
    let mut s = slai(PrefillOrder::Fcfs);
    let d = vec![de(0, 10, 3.0, 0.5), de(1, 10, 1.0, 0.5), de(2, 10, 2.0, 0.5)];
    let dec = s.next(&view(&[], &d, 0.0, 0.0)).unwrap();
    assert!(dec.notes.critical.is_empty());
    let ids: Vec<_> = plan(dec).decode.iter().map(|x| x.request).collect();
    assert_eq!(ids, vec![RequestId(1), RequestId(2), RequestId(0)]);
}

#[test]
fn slai_prefill_before_relaxed_decodes() {
    let mut s = slai(PrefillOrder::Fcfs);
    let d = vec![de(0, 10, 3.0, 0.5)];
    let p = vec![pe(1, 512, 1)];
    let b = plan(s.next(&view(&p, &d, 0.0, 0.0)).unwrap());
    assert_eq!(b.prefill[0].chunk, 512);
    assert!(b.decode.is_empty());
}

#[test]
fn slai_priority_paying_first() {
    let mut s = Slai::new(512, 128, 128, OffsetPolicy::Fixed(10.0), PrefillOrder::Spf, true, BIG).unwrap();
    let mut paying = pe(0, 300, 1);
    paying.tbt_slo = 0.1;
    let p = vec![pe(1, 50, 1), paying];
    let b = plan(s.next(&view(&p, &[], 0.0, 0.0)).unwrap());
    assert_eq!(b.prefill[0].request, RequestId(0));
}

#[test]
fn slai_setup_checks() {
    assert!(Slai::<f64>::new(512, 128, 64, OffsetPolicy::Fixed(1.0), PrefillOrder::Fcfs, false, BIG).is_err());
    assert!(Slai::<f64>::new(64, 128, 128, OffsetPolicy::Fixed(1.0), PrefillOrder::Fcfs, false, BIG).is_err());
    assert!(Slai::<f64>::new(512, 128, 128, OffsetPolicy::Fixed(-1.0), PrefillOrder::Fcfs, false, BIG).is_err());
}

#[test]
fn dynamic_offset_switches_on_memory() {
    let off = OffsetPolicy::Dynamic {
        low: 2.0,
        high: 8.0,
        threshold: 0.9,
    };
    assert_eq!(off.delta(10, 100), 2.0);
    assert_eq!(off.delta(95, 100), 8.0);
}

#[test]
fn distserve_nodes() {
    let mut pre = DistServePrefill::new(false, BIG);
    let p = vec![pe(0, 256, 1)];
    let b = plan(pre.next(&view(&p, &[], 0.0, 0.0)).unwrap());
    assert_eq!((b.prefill[0].start, b.prefill[0].chunk), (1, 256));

    let mut chunked = DistServePrefill::new(true, BIG);
    let p = vec![pe(0, 600, 1)];
    assert_eq!(plan(chunked.next(&view(&p, &[], 0.0, 0.0)).unwrap()).prefill[0].chunk, 256);

    let mut dec = DistServeDecode::new(BIG);
    assert!(Scheduler::<f64>::next(&mut dec, &view(&[], &[], 0.0, 0.0)).unwrap().is_idle());
    let d = decodes(256);
    assert_eq!(plan(dec.next(&view(&[], &d, 0.0, 0.0)).unwrap()).decode.len(), 256);
    let p = vec![pe(7, 10, 1)];
    assert!(matches!(dec.next(&view(&p, &[], 0.0, 0.0)), Err(SchedError::Routing(_))));
}

#[test]
fn policy_build_checks_role() {
    let rad = PolicyConfig::<f64>::Rad { n: 4 };
    assert!(rad.build(TOY, NodeRole::Unified).is_ok());
    assert!(rad.build(TOY, NodeRole::Prefill).is_err());
    let ds = PolicyConfig::<f64>::DistServe { chunked: false };
    assert!(ds.build(TOY, NodeRole::Unified).is_err());
    assert_eq!(ds.build(TOY, NodeRole::Decode).unwrap().name(), "distserve_decode");
    assert_eq!(
        PolicyConfig::<f64>::Sarathi {
            token_budget: 512,
            order: PrefillOrder::Spf,
            max_active: None
        }
        .label(),
        "sarathi-spf"
    );
}

#[test]
fn view_hides_output_length() {
    let p = vec![pe(0, 10, 1)];
    let d = vec![de(1, 5, 0.0, 0.5)];
    let json = serde_json::to_string(&view(&p, &d, 0.0, 0.0)).unwrap();
    assert!(json.contains("prompt_len"));
    assert!(!json.contains("output_len"));
}
