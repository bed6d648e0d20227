mod common;

use proptest::prelude::*;

use phyc_core::diffusion::SamplerConfig;
use phyc_core::evalbench::{
    mean, proxy_scores, run_benchmark, run_sweep, EvalConfig, ProbeClassifier, ProbeConfig,
    ProbeOutput, RESULTS_HEADER, SWEEP_HEADER,
};
use phyc_core::trainer::{run_training, RunOutputs};

fn quick_probe(c: &phyc_core::dataset::Corpus) -> ProbeClassifier {
    ProbeClassifier::train(
        c,
        &ProbeConfig {
            epochs: 2,
            required_accuracy: 0.0,
            ..ProbeConfig::default()
        },
    )
    .unwrap()
}

fn quick_eval() -> EvalConfig {
    EvalConfig {
        sampler: SamplerConfig {
            steps: 5,
            ..SamplerConfig::default()
        },
        samples: 3,
    }
}

fn simplex(raw: Vec<f64>) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

proptest! {
    #[test]
    fn proxy_v_o_is_bounded_by_both_heads(
        obj in proptest::collection::vec(1e-6f64..1.0, 9),
        phys in proptest::collection::vec(1e-6f64..1.0, 7),
        oi in 0..9usize,
        pi in 0..7usize,
    ) {
        let out = ProbeOutput { object: simplex(obj), physics: simplex(phys), flagged: false };
        let (pv, pvo) = proxy_scores(&out, oi, pi).unwrap();
        prop_assert!((0.0..=1.0).contains(&pv));
        prop_assert!(pvo <= pv.min(out.object[oi]) + 1e-15);
        prop_assert!(pvo >= 0.0);
    }
}

#[test]
fn benchmark_aggregates_recompute_and_probe_is_untouched() {
    let c = common::corpus(5);
    let base = common::base(&c);
    let probe = quick_probe(&c);
    let dir = tempfile::tempdir().unwrap();
    let probe_path = dir.path().join("probe.phyc");
    probe.save(&probe_path).unwrap();
    let before = std::fs::read(&probe_path).unwrap();

    let mut ckpts = Vec::new();
    for seed in 0..2 {
        let mut config = common::short(2);
        config.seed = seed;
        let out = RunOutputs::in_dir(&dir.path().join(format!("run{seed}")));
        run_training(&config, &base, &common::concept(&c), Some(&out)).unwrap();
        ckpts.push(out.checkpoint);
    }
    let loaded = ProbeClassifier::load(&probe_path).unwrap();
    let r = run_benchmark(
        &ckpts,
        &loaded,
        &quick_eval(),
        Some(&dir.path().join("sheets")),
    )
    .unwrap();
    assert_eq!(std::fs::read(&probe_path).unwrap(), before);

    assert_eq!(r.combos.len(), 2);
    for combo in &r.combos {
        assert_eq!(combo.scores.len(), 3);
        let best = combo.scores.iter().map(|s| s.0).fold(f64::MIN, f64::max);
        assert_eq!(combo.proxy_v(), best);
        assert_eq!(combo.scores[combo.selected].0, best);
    }
    let pv: Vec<f64> = r.combos.iter().map(|c| c.proxy_v()).collect();
    let pvo: Vec<f64> = r.combos.iter().map(|c| c.proxy_v_o()).collect();
    assert_eq!(r.mean_proxy_v(), mean(&pv));
    assert_eq!(r.mean_proxy_v_o(), mean(&pvo));
    let csv = r.to_csv();
    assert!(csv.starts_with(RESULTS_HEADER));
    assert_eq!(
        std::fs::read_dir(dir.path().join("sheets"))
            .unwrap()
            .count(),
        2
    );

    let again = run_benchmark(&ckpts, &loaded, &quick_eval(), None).unwrap();
    assert_eq!(again.to_csv(), csv);
}

#[test]
fn probe_refuses_a_corpus_too_thin_to_hold_out() {
    let err = ProbeClassifier::train(&common::corpus(2), &ProbeConfig::default()).unwrap_err();
    assert_eq!(err.code(), "config");
}

#[test]
fn benchmark_rejects_missing_checkpoint() {
    let probe = quick_probe(&common::corpus(5));
    let err = run_benchmark(&["nope.phyc".into()], &probe, &quick_eval(), None).unwrap_err();
    assert_eq!(err.code(), "missing_checkpoint");
}

#[test]
fn sweep_has_one_row_per_grid_cell() {
    let c = common::corpus(5);
    let base = common::base(&c);
    let probe = quick_probe(&c);
    let grid = [0.0, 1.0];
    let r = run_sweep(
        &base,
        &common::concept(&c),
        &common::short(2),
        &grid,
        &[0],
        &probe,
        &quick_eval(),
        None,
    )
    .unwrap();
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], SWEEP_HEADER);
    assert_eq!(lines.len(), 1 + grid.len() * grid.len());
    assert!(lines[1].starts_with("0,0,") || lines[1].starts_with("0.0,0.0,"));
}
