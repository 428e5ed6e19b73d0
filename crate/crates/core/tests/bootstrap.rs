mod common;

use common::{dataset, random_case, Row};
use subgroup_transport::data::{Design, Subgroups};
use subgroup_transport::estimators::EstimatorTag;
use subgroup_transport::glm::{Family, ModelFormula};
use subgroup_transport::inference::{
    bootstrap_estimates, mean_sd, normal_quantile, replicate_indices, BootstrapConfig, InferenceError,
};
use subgroup_transport::nuisance::{NuisanceSpec, TreatmentModel};

fn spec(outcome: &str) -> NuisanceSpec {
    NuisanceSpec {
        participation: ModelFormula::parse("S ~ x + g", Family::Binomial).unwrap(),
        treatment: TreatmentModel::Known(vec![0.5, 0.5]),
        outcome: ModelFormula::parse(outcome, Family::Gaussian).unwrap(),
        truncation: None,
    }
}

fn bits(r: &subgroup_transport::inference::BootstrapResult) -> Vec<Option<(u64, u64)>> {
    r.intervals.iter().map(|iv| iv.map(|iv| (iv.point.to_bits(), iv.se.to_bits()))).collect()
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let case = random_case(31, 0, 120..=120);
    let cfg = BootstrapConfig::new(40, 99);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| bootstrap_estimates(&case.ds, &spec("Y ~ x"), &case.groups, &EstimatorTag::ALL, &cfg).unwrap())
    };
    let one = run(1);
    for threads in [2, 4, 8] {
        assert_eq!(bits(&one), bits(&run(threads)));
    }
    let other = bootstrap_estimates(&case.ds, &spec("Y ~ x"), &case.groups, &EstimatorTag::ALL, &BootstrapConfig::new(40, 100)).unwrap();
    assert_ne!(bits(&one), bits(&other));
}

#[test]
fn trial_standard_error_is_sd_of_resampled_cell_means() {
    let case = random_case(32, 0, 150..=150);
    let cfg = BootstrapConfig::new(60, 5);
    let r = bootstrap_estimates(&case.ds, &spec("Y ~ x"), &case.groups, &[EstimatorTag::Trial], &cfg).unwrap();
    assert_eq!(r.failed_replicates, 0);
    for v in 0..2 {
        for a in 0..2 {
            let draws: Vec<f64> = (0..60)
                .map(|j| {
                    let idx = replicate_indices(&case.ds, &cfg, j);
                    let ys: Vec<f64> = idx
                        .iter()
                        .map(|&i| case.rows[i])
                        .filter(|r| r.2 == 1 && r.3 == a && r.1 as usize == v)
                        .map(|r| r.4)
                        .collect();
                    ys.iter().sum::<f64>() / ys.len() as f64
                })
                .collect();
            let (_, sd) = mean_sd(&draws);
            let iv = r.mean_interval(EstimatorTag::Trial, v, a).unwrap();
            assert!((iv.se - sd).abs() < 1e-12, "{} vs {sd}", iv.se);
            let z = normal_quantile(0.95);
            assert!((iv.lower - (iv.point - z * iv.se)).abs() < 1e-12);
            assert!((iv.upper - (iv.point + z * iv.se)).abs() < 1e-12);
        }
    }
}

#[test]
fn constant_outcome_has_zero_standard_error() {
    let mut case = random_case(33, 0, 100..=100);
    for r in case.rows.iter_mut() {
        r.4 = if r.2 == 1 { 0.7 } else { 0.0 };
    }
    let (ds, groups) = dataset(&case.rows, Design::Nested);
    let tags = [
        EstimatorTag::Om,
        EstimatorTag::Ipw2,
        EstimatorTag::Aipw1,
        EstimatorTag::Aipw2,
        EstimatorTag::Aipw3,
        EstimatorTag::OmS0,
        EstimatorTag::Iow2,
        EstimatorTag::Aiow1,
        EstimatorTag::Aiow2,
        EstimatorTag::Aiow3,
        EstimatorTag::SatIpw2,
        EstimatorTag::SatIow2,
        EstimatorTag::Trial,
    ];
    let r = bootstrap_estimates(&ds, &spec("Y ~ x"), &groups, &tags, &BootstrapConfig::new(30, 1)).unwrap();
    for (id, iv) in r.cell_ids().iter().zip(&r.intervals) {
        let iv = iv.unwrap();
        assert!(iv.se < 1e-12, "{id:?}: {}", iv.se);
    }
}

#[test]
fn stratified_resampling_preserves_stratum_sizes() {
    let case = random_case(34, 0, 90..=90);
    let n_trial = case.rows.iter().filter(|r| r.2 == 1).count();
    let mut cfg = BootstrapConfig::new(10, 3);
    cfg.stratify_by_s = true;
    for j in 0..20 {
        let idx = replicate_indices(&case.ds, &cfg, j);
        assert_eq!(idx.len(), 90);
        assert!(idx[..n_trial].iter().all(|&i| case.rows[i].2 == 1));
        assert!(idx[n_trial..].iter().all(|&i| case.rows[i].2 == 0));
    }
    // Non-nested designs are always stratified.
    let (ds, _) = dataset(&case.rows, Design::NonNested);
    let plain = BootstrapConfig::new(10, 3);
    for j in 0..20 {
        let idx = replicate_indices(&ds, &plain, j);
        assert_eq!(idx.iter().filter(|&&i| case.rows[i].2 == 1).count(), n_trial);
    }
}

#[test]
fn plain_resampling_is_reproducible_per_replicate() {
    let case = random_case(35, 0, 60..=60);
    let cfg = BootstrapConfig::new(10, 8);
    let a = replicate_indices(&case.ds, &cfg, 4);
    assert_eq!(a, replicate_indices(&case.ds, &cfg, 4));
    assert_ne!(a, replicate_indices(&case.ds, &cfg, 5));
    assert!(a.iter().all(|&i| i < 60));
}

#[test]
fn sparse_cells_exhaust_the_failure_budget() {
    // Exactly one treated trial row in subgroup 1: about a third of the
    // replicates lose that cell.
    let mut rows: Vec<Row> = Vec::new();
    for i in 0..40 {
        rows.push(((i as f64) / 40.0, 0.0, (i % 3 != 0) as u8, i % 2, (i % 3) as f64));
        rows.push(((i as f64) / 40.0, 1.0, if i % 2 == 0 { 0 } else { 1 }, 0, (i % 5) as f64));
    }
    rows.push((0.5, 1.0, 1, 1, 2.0));
    let (ds, groups) = dataset(&rows, Design::Nested);
    let err = bootstrap_estimates(&ds, &spec("Y ~ x"), &groups, &[EstimatorTag::Trial], &BootstrapConfig::new(50, 2)).unwrap_err();
    match err {
        InferenceError::TooManyFailures { failed, replicates } => {
            assert_eq!(replicates, 50);
            assert!(failed > 5);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn invalid_configurations_are_rejected() {
    let case = random_case(36, 0, 40..=40);
    let run = |cfg: BootstrapConfig| bootstrap_estimates(&case.ds, &spec("Y ~ x"), &case.groups, &[EstimatorTag::Trial], &cfg);
    assert!(matches!(run(BootstrapConfig::new(1, 0)), Err(InferenceError::Config(_))));
    let mut cfg = BootstrapConfig::new(10, 0);
    cfg.ci_level = 1.0;
    assert!(matches!(run(cfg), Err(InferenceError::Config(_))));
}

#[test]
fn cells_failing_on_original_data_have_no_interval() {
    let case = random_case(37, 0, 60..=60);
    let three = Subgroups::from_membership(
        vec!["0".into(), "1".into(), "2".into()],
        case.rows.iter().map(|r| r.1 as usize).collect(),
    );
    let r = bootstrap_estimates(&case.ds, &spec("Y ~ x"), &three, &[EstimatorTag::Trial], &BootstrapConfig::new(20, 4)).unwrap();
    assert!(r.mean_interval(EstimatorTag::Trial, 2, 0).is_none());
    assert!(r.mean_interval(EstimatorTag::Trial, 0, 0).is_some());
    assert!(r.effect_interval(EstimatorTag::Trial, 1, 1).is_some());
}
