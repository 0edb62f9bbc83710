use querykernel_core::preferential::{preferential_run, PreferentialConfig, SimulatedOracle};
use querykernel_core::space::Bounds;

#[test]
fn recovers_peak_of_quadratic_utility() {
    let mut hits = 0;
    let mut recs = Vec::new();
    for seed in 0..20u64 {
        let cfg = PreferentialConfig::new(Bounds::unit(1), 40, seed);
        let mut oracle = SimulatedOracle {
            utility: |x: &[f64]| -(x[0] - 0.7).powi(2),
            sigma_noise: 0.05,
            seed,
        };
        let out = preferential_run(&mut oracle, &cfg).unwrap();
        assert_eq!(out.trace.len(), 40);
        recs.push(out.recommendation[0]);
        if (out.recommendation[0] - 0.7).abs() <= 0.05 {
            hits += 1;
        }
    }
    assert!(hits >= 16, "{hits}/20 within 0.05: {recs:?}");
}
