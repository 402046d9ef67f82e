//! Monte Carlo checks of the guidance decomposition on the bimodal config.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use anchorlab::config::ExperimentConfig;
use anchorlab::guidance::vanilla_sds_guidance;
use anchorlab::vecops::norm;
use anchorlab::{GuidanceConfig, GuidanceInput, Variant};

fn bimodal() -> ExperimentConfig {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/bimodal.json");
    ExperimentConfig::load(std::path::Path::new(path)).unwrap()
}

// With omega = 100 the class direction swamps the noise residual. Draws
// follow a run from the config's origin initialization: t uniform over the
// run range, eps standard normal.
#[test]
fn omega_100_class_term_dominates_noise_residual() {
    let cfg = bimodal();
    let prior = cfg.prior().unwrap();
    let sched = cfg.schedule().unwrap();
    let gcfg = GuidanceConfig::for_variant(Variant::VanillaSds);
    assert_eq!(gcfg.omega, 100.0);
    let (lo, hi) = cfg.run_config().t_range(sched.total_steps()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut class, mut residual) = (0.0, 0.0);
    let n = 1000;
    for _ in 0..n {
        let t = rng.random_range(lo..=hi);
        let eps: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        let z_t = sched.add_noise(&[0.0, 0.0], t, &eps).unwrap();
        let r = vanilla_sds_guidance(&prior, &GuidanceInput::new(&z_t, t, &eps, "right"), &gcfg, &sched).unwrap();
        class += (gcfg.omega - 1.0) * norm(&r.m1);
        residual += norm(&r.m2);
    }
    let (class, residual) = (class / n as f64, residual / n as f64);
    println!("mean |(w-1) m1| = {class:.4}, mean |m2| = {residual:.4}, ratio {:.2}", class / residual);
    assert!(class >= 10.0 * residual, "{class} vs 10 x {residual}");
}
