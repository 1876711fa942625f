use proptest::prelude::*;
use sapef::compressors::{compress, residual, top_k_indices, CompressorSpec};
use sapef::diagnostics::MetricsRecord;
use sapef::harness::{metrics_to_csv, parse_metrics_csv, ExperimentConfig};
use sapef::numerics::ModelVector;
use sapef::theory;

fn vector() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1e6f64..1e6, 1..64)
}

proptest! {
    #[test]
    fn top_k_keeps_largest(u in vector(), k in 1usize..64) {
        let k = k.min(u.len());
        let idx = top_k_indices(&u, k);
        prop_assert_eq!(idx.len(), k);
        let smallest_kept = idx.iter().map(|&i| u[i].abs()).fold(f64::INFINITY, f64::min);
        for (i, x) in u.iter().enumerate() {
            if !idx.contains(&i) {
                prop_assert!(x.abs() <= smallest_kept);
            }
        }
    }

    #[test]
    fn residual_plus_message_is_input(u in vector(), k in 1usize..64) {
        let x = ModelVector::new(u.clone());
        let spec = CompressorSpec::top_k(k.min(u.len()));
        let c = compress(&spec, &x).unwrap();
        let e = residual(&x, &c).unwrap();
        prop_assert!(e.add(&c.dense).unwrap().bit_eq(&x));
        prop_assert!(c.support_size <= spec_k(&spec));
    }

    #[test]
    fn scaled_sign_contracts(u in vector()) {
        let x = ModelVector::new(u);
        let spec = CompressorSpec::scaled_sign();
        let c = compress(&spec, &x).unwrap();
        let err = residual(&x, &c).unwrap().norm2_sq();
        let bound = (1.0 - 1.0 / spec.certified_delta(x.dim())) * x.norm2_sq();
        prop_assert!(err <= bound * (1.0 + 1e-12) + 1e-300);
    }

    #[test]
    fn rho_is_minimised_at_alpha_star(s in 0.0f64..1.0, delta in 1.0f64..1e3, a in 0.0f64..1.0) {
        let best = theory::rho(theory::alpha_star(s), s, delta).unwrap();
        prop_assert!(best <= theory::rho(a, s, delta).unwrap() * (1.0 + 1e-14));
    }

    #[test]
    fn metrics_csv_round_trips(rows in prop::collection::vec((any::<f64>(), 0.0f64..1e300, 0u64..1 << 62), 0..20)) {
        let records: Vec<MetricsRecord> = rows
            .iter()
            .enumerate()
            .map(|(r, &(f, g, bits))| MetricsRecord {
                round: r,
                f_w: if f.is_nan() { 0.0 } else { f },
                grad_norm_sq: g,
                residual_energy_mean: g / 3.0,
                mismatch: g * 1e-7,
                uplink_bits_cum: bits,
                virtual_identity_residual: 1e-17,
                wall_time_ms: 0,
            })
            .collect();
        let text = metrics_to_csv(&records).unwrap();
        prop_assert_eq!(parse_metrics_csv(&text).unwrap(), records);
    }
}

fn spec_k(spec: &CompressorSpec) -> usize {
    match spec.family {
        sapef::compressors::Family::TopK { k } => k,
        _ => usize::MAX,
    }
}

#[test]
fn config_round_trips_through_toml() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/dirichlet.toml")).unwrap();
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(cfg, again);
}
