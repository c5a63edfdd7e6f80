use logkv::cache::oracle_attend;
use logkv::harness::{rows_from_csv, run_experiment_with, SyntheticSource};
use logkv::metrics::{spike_histogram, SpikeThreshold};
use logkv::trace::{generate_synthetic_trace, validate_trace, TraceError};
use logkv::{
    attention, compression_ratio, AttentionConfig, CompressedKvCache, Execution, ExperimentConfig, Matrix,
    Mode, PolicyConfig, PolicyKind, ReleasePayload, SpikeModel, SyntheticSpec, Trace,
};
use proptest::prelude::*;

fn policy_strategy() -> impl Strategy<Value = PolicyConfig> {
    prop_oneof![
        (1usize..6).prop_map(PolicyConfig::logquant),
        (1usize..12).prop_map(PolicyConfig::kivi),
        (3usize..12).prop_map(|r| PolicyConfig::streaming(r, 2)),
        (2usize..12).prop_map(|r| PolicyConfig::h2o(r, 1)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Passthrough storage only reorders rows, so attention matches the oracle.
    #[test]
    fn passthrough_cache_matches_oracle(
        policy in policy_strategy(),
        n in 1usize..40,
        d in 1usize..9,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut row = |_: usize| -> Vec<f32> { (0..d).map(|_| rng.random_range(-2.0..2.0)).collect() };
        let cfg = AttentionConfig::new(d).unwrap();
        let mut cache = CompressedKvCache::new(policy, d, ReleasePayload::Passthrough).unwrap();
        let mut full_k = Matrix::empty(d);
        let mut full_v = Matrix::empty(d);
        for pos in 0..n {
            let (k, v) = (row(0), row(0));
            cache.append_token(&k, &v, pos).unwrap();
            full_k.push_row(&k).unwrap();
            full_v.push_row(&v).unwrap();
            let q = row(0);
            let got = cache.attend(&q, &cfg).unwrap();
            let want = oracle_attend(&full_k, &full_v, &q, &cfg).unwrap();
            for (a, b) in got.output.iter().zip(&want.output) {
                prop_assert!((a - b).abs() < 1e-5);
            }
            let fp = cache.fp_count();
            cache.record_attention(&got.dist_over_stored[..fp]).unwrap();
        }
    }
}

fn spike_source(count: usize) -> Option<SyntheticSource> {
    Some(SyntheticSource {
        count,
        spec: SyntheticSpec {
            prompt_len: 192,
            decode_steps: 24,
            head_dim: 64,
            ..SyntheticSpec::default()
        },
    })
}

#[test]
fn csv_ratio_is_recomputable() {
    let cfg = ExperimentConfig {
        synthetic: spike_source(2),
        bits: vec![2, 4, 16],
        budgets: vec![30],
        modes: vec![Mode::QuantizeRest, Mode::EvictRest],
        ..ExperimentConfig::default()
    };
    let out = run_experiment_with(&cfg, Execution::Parallel).unwrap();
    let rows = rows_from_csv(&out.to_csv().unwrap()).unwrap();
    for r in rows.iter().filter(|r| r.step.is_some()) {
        let len = 192 + r.step.unwrap() + 1;
        if r.mode == Mode::QuantizeRest {
            assert_eq!((r.fp_count + r.q_count) as usize, len);
        } else {
            assert_eq!(r.q_count, 0.0);
        }
        let want = compression_ratio(len, r.fp_count as usize, r.bits as u32, 16).unwrap();
        assert!((r.compression_ratio - want).abs() <= 1e-12 * want);
    }
}

#[test]
fn quantize_rest_beats_evict_rest() {
    let cfg = ExperimentConfig {
        synthetic: spike_source(4),
        policies: vec![PolicyKind::Logquant, PolicyKind::Kivi, PolicyKind::StreamingLlm],
        budgets: vec![48],
        modes: vec![Mode::QuantizeRest, Mode::EvictRest],
        ..ExperimentConfig::default()
    };
    let out = run_experiment_with(&cfg, Execution::Parallel).unwrap();
    for kind in &cfg.policies {
        let mean = |mode: Mode| {
            let v: Vec<f64> = out
                .rows
                .iter()
                .filter(|r| r.step.is_none() && r.policy == *kind && r.mode == mode)
                .map(|r| r.l1_error)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(Mode::QuantizeRest) < mean(Mode::EvictRest), "{kind}");
    }
}

#[test]
fn per_head_replay_shares_cache() {
    let cfg = ExperimentConfig {
        synthetic: Some(SyntheticSource {
            count: 1,
            spec: SyntheticSpec {
                prompt_len: 40,
                decode_steps: 5,
                head_dim: 16,
                heads: 4,
                kv_heads: 2,
                spike_min_distance: 8,
                ..SyntheticSpec::default()
            },
        }),
        policies: vec![PolicyKind::H2o],
        budgets: vec![12],
        gqa: logkv::harness::GqaReplay::PerHead,
        ..ExperimentConfig::default()
    };
    let out = run_experiment_with(&cfg, Execution::Sequential).unwrap();
    let ids: std::collections::BTreeSet<&str> = out.rows.iter().map(|r| r.trace_id.as_str()).collect();
    assert_eq!(ids.len(), 4);
    assert!(ids.contains("synthetic-0/l0/h3"));
    assert_eq!(out.rows.len(), 4 * (5 + 1));
}

#[test]
fn trace_file_round_trip_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        prompt_len: 30,
        decode_steps: 4,
        head_dim: 8,
        ..SyntheticSpec::default()
    };
    let t = generate_synthetic_trace(&spec).unwrap();
    let path = dir.path().join("t.kvtr");
    t.write_file(&path).unwrap();
    assert_eq!(Trace::read_file(&path).unwrap(), t);
    let summary = validate_trace(&path).unwrap();
    assert_eq!(summary.header.prompt_len, 30);
    assert!(summary.to_string().contains("head_dim=8"));

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let err = validate_trace(&path).unwrap_err();
    assert_eq!(
        err.to_string().split(" (").next().unwrap(),
        "payload short by 3 bytes"
    );
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"NOPE");
    std::fs::write(&path, bad).unwrap();
    assert_eq!(validate_trace(&path).unwrap_err(), TraceError::BadMagic);
}

fn oracle_dists(trace: &Trace, steps: usize) -> Vec<Vec<f32>> {
    let d = trace.header.head_dim as usize;
    let attn = AttentionConfig::new(d).unwrap();
    let mut k = trace.prompt_keys(0, 0).clone();
    let mut v = trace.prompt_values(0, 0).clone();
    (0..steps)
        .map(|s| {
            k.push_row(trace.step_key(s, 0, 0)).unwrap();
            v.push_row(trace.step_value(s, 0, 0)).unwrap();
            attention(trace.query(s, 0, 0), &k, &v, &attn).unwrap().dist
        })
        .collect()
}

#[test]
fn uniform_model_entropy_near_log_n() {
    let t = generate_synthetic_trace(&SyntheticSpec {
        prompt_len: 512,
        decode_steps: 4,
        head_dim: 64,
        model: SpikeModel::Uniform,
        ..SyntheticSpec::default()
    })
    .unwrap();
    for dist in oracle_dists(&t, 4) {
        let h: f64 = dist
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -(p as f64) * (p as f64).ln())
            .sum();
        let log_n = (dist.len() as f64).ln();
        assert!((h - log_n).abs() <= 0.05 * log_n, "{h} vs {log_n}");
    }
}

#[test]
fn log_spike_histogram_is_flat_across_log_bins() {
    let steps = 128;
    let t = generate_synthetic_trace(&SyntheticSpec {
        prompt_len: 1024,
        decode_steps: steps,
        head_dim: 256,
        spikes_per_step: 8,
        spike_min_distance: 2,
        seed: 9,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let mut hist = vec![0usize; 12];
    for dist in oracle_dists(&t, steps) {
        let s = spike_histogram(&[dist], SpikeThreshold::Absolute(0.01)).unwrap();
        for (acc, c) in hist.iter_mut().zip(s.histogram) {
            *acc += c;
        }
    }
    // bins 2..=9 lie fully inside the spike distance range
    let full = &hist[2..=9];
    let (lo, hi) = (*full.iter().min().unwrap(), *full.iter().max().unwrap());
    assert!(lo > 0 && hi as f64 <= 1.6 * lo as f64, "{hist:?}");
}

#[test]
fn recency_model_favors_recent_tokens() {
    let t = generate_synthetic_trace(&SyntheticSpec {
        prompt_len: 256,
        decode_steps: 2,
        head_dim: 128,
        model: SpikeModel::RecencyDecay,
        ..SyntheticSpec::default()
    })
    .unwrap();
    for dist in oracle_dists(&t, 2) {
        let n = dist.len();
        let recent: f32 = dist[n - 16..].iter().sum();
        assert!(recent > 0.5, "{recent}");
    }
}
