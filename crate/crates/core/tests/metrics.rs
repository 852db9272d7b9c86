use servesim::config::presets;
use servesim::engine::{QueueSample, RequestRecord};
use servesim::metrics::{
    aggregate, percentile, returns_to_zero, serving_capacity, stability_slope, tbt_series, time_average_queue, ttft,
    MetricsError,
};
use servesim::{run, PolicyConfig, Request, RequestId, SimConfig};

fn record(arrival: f64, emits: Vec<f64>) -> RequestRecord<f64> {
    RequestRecord {
        id: RequestId(0),
        class: "default".into(),
        tbt_slo: 1.0,
        arrival,
        prompt_len: 2,
        output_len: emits.len() as u64,
        arrived: true,
        node: Some(0),
        first_token: emits.first().copied(),
        completion: emits.last().copied(),
        emits,
    }
}

fn sample(time: f64, pending: u32) -> QueueSample<f64> {
    QueueSample {
        time,
        pending,
        arrived: 0,
    }
}

#[test]
fn nearest_rank_percentiles() {
    assert_eq!(percentile(&[3.0, 1.0, 2.0], 0.5).unwrap(), 2.0);
    let xs: Vec<f64> = (1..=200).map(f64::from).collect();
    assert_eq!(percentile(&xs, 0.99).unwrap(), 198.0);
    assert_eq!(percentile(&xs, 1.0).unwrap(), 200.0);
    assert_eq!(percentile(&[7.0], 0.01).unwrap(), 7.0);
    assert_eq!(percentile::<f64>(&[], 0.5), Err(MetricsError::Empty));
    assert!(matches!(percentile(&xs, 0.0), Err(MetricsError::BadRank(_))));
}

#[test]
fn ttft_and_tbt() {
    let r = record(0.3, vec![1.0, 1.2, 1.5]);
    assert!((ttft(&r).unwrap() - 0.7).abs() < 1e-12);
    let gaps = tbt_series(&r);
    assert_eq!(gaps.len(), 2);
    assert!((gaps[0] - 0.2).abs() < 1e-12 && (gaps[1] - 0.3).abs() < 1e-12);
    assert!(tbt_series(&record(0.0, vec![1.0])).is_empty());
    let mut waiting = record(0.0, vec![]);
    waiting.first_token = None;
    assert_eq!(ttft(&waiting), None);
}

#[test]
fn slopes() {
    let flat: Vec<_> = (0..10).map(|k| sample(k as f64, 4)).collect();
    assert_eq!(stability_slope(&flat, 0.0, 10.0).unwrap(), 0.0);
    let ramp: Vec<_> = (0..10).map(|k| sample(k as f64, k)).collect();
    assert!((stability_slope(&ramp, 0.0, 10.0).unwrap() - 1.0).abs() < 1e-12);
    assert!((stability_slope(&ramp, 5.0, 9.0).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(stability_slope(&ramp, 3.0, 3.0), Err(MetricsError::DegenerateWindow(1)));
    let same_time = vec![sample(1.0, 1), sample(1.0, 2)];
    assert!(stability_slope(&same_time, 0.0, 2.0).is_err());
}

#[test]
fn queue_summaries() {
    let q = vec![sample(0.0, 1), sample(1.0, 0), sample(2.0, 2), sample(4.0, 0)];
    assert_eq!(returns_to_zero(&q), 2);
    // 1*1 + 0*1 + 2*2 + 0*1 over 5
    assert!((time_average_queue(&q, 5.0) - 1.0).abs() < 1e-12);
}

#[test]
fn capacity_from_sweep() {
    let pts = [(0.5, Some(0.1)), (1.0, Some(0.4)), (1.5, Some(0.9)), (2.0, None)];
    let c = serving_capacity(&pts, 0.5);
    assert_eq!(c.largest_ok, Some(1.0));
    assert_eq!(c.bracket, Some((1.0, 1.5)));
    let c = serving_capacity(&[(1.0, Some(2.0))], 0.5);
    assert_eq!(c.largest_ok, None);
    let c = serving_capacity(&[(1.0, Some(0.1))], 0.5);
    assert_eq!(c.bracket, None);
}

#[test]
fn aggregate_counts_classes() {
    let trace: Vec<_> = (0..20)
        .map(|k| Request {
            id: RequestId(k),
            arrival_time: 20.0 * k as f64,
            prompt_len: 2,
            output_len: 3,
            class: if k % 4 == 0 { "paying".into() } else { "free".into() },
            tbt_slo: if k % 4 == 0 { 1.0 } else { 100.0 },
        })
        .collect();
    let cfg = SimConfig::new(presets::toy(), PolicyConfig::Rad { n: 1 }, 1);
    let res = run(&cfg, &trace).unwrap();
    let agg = aggregate(&res, 0.0);
    assert_eq!(agg.all.requests, 20);
    assert_eq!(agg.all.completed, 20);
    let paying = agg.classes.iter().find(|c| c.class == "paying").unwrap();
    assert_eq!(paying.requests, 5);
    // toy decode batches take 6 > 1
    assert_eq!(paying.tbt_violation_rate, Some(1.0));
    assert!(agg.throughput > 0.0);
    let mut buf = Vec::new();
    agg.write_csv(&mut buf, "r0", "rad", 0.05).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 1 + agg.classes.len() + 1);
}
