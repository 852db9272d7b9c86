use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use servesim::workload::{
    default_classes, fmt_seconds, generate_trace, paying_free_classes, read_trace, round_to_lcm, write_trace,
    LengthKind, LengthTarget, WorkloadError,
};
use servesim::LengthDistribution;

fn quantile(xs: &mut [u64], p: f64) -> f64 {
    xs.sort_unstable();
    let n = xs.len();
    xs[((p * n as f64).ceil() as usize).clamp(1, n) - 1] as f64
}

#[test]
fn zero_rate_gives_empty_trace() {
    let dist = LengthDistribution::deterministic(4, 2).unwrap();
    let t = generate_trace::<f64>(1, 100.0, 0.0, &dist, &default_classes()).unwrap();
    assert!(t.is_empty());
}

#[test]
fn poisson_count_within_three_sigma() {
    let dist = LengthDistribution::deterministic(4, 2).unwrap();
    let t = generate_trace::<f64>(3, 1e5, 1.0, &dist, &default_classes()).unwrap();
    let sigma = 1e5f64.sqrt();
    assert!((t.len() as f64 - 1e5).abs() <= 3.0 * sigma, "count {}", t.len());
    assert!(t.windows(2).all(|w| w[0].arrival_time <= w[1].arrival_time));
    assert!(t.iter().all(|r| r.arrival_time < 1e5));
}

#[test]
fn chat_fit_hits_targets() {
    let dist = LengthDistribution::chat().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut ps, mut os): (Vec<u64>, Vec<u64>) = (0..100_000).map(|_| dist.sample(&mut rng)).unzip();
    assert!(ps.iter().zip(&os).all(|(p, o)| p + o <= 8192));
    let within = |got: f64, want: f64| (got - want).abs() / want <= 0.02;
    let pm = quantile(&mut ps, 0.5);
    let p90 = quantile(&mut ps, 0.9);
    let om = quantile(&mut os, 0.5);
    let o90 = quantile(&mut os, 0.9);
    assert!(within(pm, 1730.0), "prompt median {pm}");
    assert!(within(p90, 5696.0), "prompt p90 {p90}");
    assert!(within(om, 415.0), "output median {om}");
    assert!(within(o90, 834.0), "output p90 {o90}");
}

#[test]
fn unfittable_targets_rejected() {
    let bad = LengthDistribution::lognormal(
        LengthTarget { median: 100.0, p90: 50.0 },
        LengthTarget { median: 10.0, p90: 20.0 },
    );
    assert!(matches!(bad, Err(WorkloadError::Fit(_))));
    let over_cap = LengthDistribution::lognormal(
        LengthTarget { median: 100.0, p90: 9000.0 },
        LengthTarget { median: 10.0, p90: 20.0 },
    );
    assert!(matches!(over_cap, Err(WorkloadError::Fit(_))));
}

#[test]
fn rounding_to_lcm() {
    assert_eq!(round_to_lcm(1, 8, 1024), 8);
    assert_eq!(round_to_lcm(16, 8, 1024), 16);
    assert_eq!(round_to_lcm(17, 8, 1024), 24);
    assert_eq!(round_to_lcm(1020, 8, 1020), 1020);

    let dist = LengthDistribution::new(LengthKind::Deterministic { prompt: 17, output: 3 }, 64, 8, 128, Some(8)).unwrap();
    assert_eq!(dist.caps(), (24, 3));
    assert_eq!(dist.support().unwrap(), vec![(24, 3)]);
}

#[test]
fn empirical_support_and_sampling() {
    let dist = LengthDistribution::empirical(vec![(2, 1), (4, 3), (8, 2)]).unwrap();
    assert_eq!(dist.caps(), (8, 3));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        assert!(dist.support().unwrap().contains(&dist.sample(&mut rng)));
    }
    assert!(LengthDistribution::empirical(vec![]).is_err());
    assert!(LengthDistribution::empirical(vec![(0, 1)]).is_err());
}

#[test]
fn class_mix_follows_probabilities() {
    let dist = LengthDistribution::deterministic(4, 2).unwrap();
    let classes = paying_free_classes(0.05, 0.1, 0.5);
    let t = generate_trace::<f64>(11, 50_000.0, 1.0, &dist, &classes).unwrap();
    let paying = t.iter().filter(|r| r.class == "paying").count() as f64 / t.len() as f64;
    assert!((paying - 0.05).abs() < 0.005, "paying share {paying}");
    assert!(t.iter().all(|r| (r.class == "paying") == (r.tbt_slo == 0.1)));
}

#[test]
fn lengths_do_not_depend_on_rate() {
    let dist = LengthDistribution::chat().unwrap();
    let a = generate_trace::<f64>(5, 500.0, 0.5, &dist, &default_classes()).unwrap();
    let b = generate_trace::<f64>(5, 500.0, 1.0, &dist, &default_classes()).unwrap();
    let n = a.len().min(b.len());
    assert!(n > 100);
    for k in 0..n {
        assert_eq!(
            (a[k].prompt_len, a[k].output_len),
            (b[k].prompt_len, b[k].output_len)
        );
    }
}

#[test]
fn trace_round_trip() {
    let dist = LengthDistribution::chat().unwrap();
    let classes = paying_free_classes(0.05, 0.1, 0.5);
    let t = generate_trace::<f64>(7, 150.0, 1.0, &dist, &classes).unwrap();
    assert!(t.len() >= 100);
    let t = &t[..100];
    let mut buf = Vec::new();
    write_trace(t, &mut buf).unwrap();
    let back = read_trace::<f64, _>(buf.as_slice(), &classes).unwrap();
    assert_eq!(back, t);
}

#[test]
fn header_only_is_empty() {
    let csv = "id,arrival_time_s,prompt_len,output_len,class\n";
    let t = read_trace::<f64, _>(csv.as_bytes(), &default_classes()).unwrap();
    assert!(t.is_empty());
}

#[test]
fn decreasing_arrival_names_row() {
    let mut csv = String::from("id,arrival_time_s,prompt_len,output_len,class\n");
    for k in 0..10 {
        let t = if k == 6 { 0.5 } else { k as f64 };
        csv.push_str(&format!("{k},{t},4,2,default\n"));
    }
    match read_trace::<f64, _>(csv.as_bytes(), &default_classes()) {
        Err(WorkloadError::Validation { row, .. }) => assert_eq!(row, 7),
        other => panic!("expected validation error, got {other:?}"),
    }
}

#[test]
fn malformed_rows_name_row() {
    let csv = "id,arrival_time_s,prompt_len,output_len,class\n0,0.0,4,2,default\n1,zz,4,2,default\n";
    match read_trace::<f64, _>(csv.as_bytes(), &default_classes()) {
        Err(WorkloadError::Parse { row, .. }) => assert_eq!(row, 2),
        other => panic!("expected parse error, got {other:?}"),
    }
    let csv = "id,arrival_time_s,prompt_len,output_len,class\n0,0.0,4,2,gold\n";
    assert!(matches!(
        read_trace::<f64, _>(csv.as_bytes(), &default_classes()),
        Err(WorkloadError::Validation { row: 1, .. })
    ));
    let csv = "id,arrival,prompt_len,output_len,class\n";
    assert!(read_trace::<f64, _>(csv.as_bytes(), &default_classes()).is_err());
}

#[test]
fn seconds_format() {
    assert_eq!(fmt_seconds(1.0), "1.000000");
    assert_eq!(fmt_seconds(0.5), "0.500000");
    assert_eq!(fmt_seconds(0.1234567891), "0.1234567891");
    let x = 123.456789012345;
    assert_eq!(fmt_seconds(x).parse::<f64>().unwrap(), x);
}
