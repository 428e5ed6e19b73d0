mod common;

use common::{dataset, max_abs_diff, random_case, Case, Row};
use proptest::prelude::*;

use subgroup_transport::data::{Design, EstimandScope, Subgroups};
use subgroup_transport::estimators::*;
use subgroup_transport::glm::{Family, ModelFormula};
use subgroup_transport::nuisance::{fit_and_predict, NuisanceSpec, NuisanceTable, TreatmentModel};

/// Literal evaluation of the estimator formulas, row by row.
fn literal(tag: EstimatorTag, rows: &[Row], t: &NuisanceTable, member: &dyn Fn(usize) -> bool, a: usize) -> f64 {
    let n = rows.len();
    let in_v = |i: usize| member(i) as u8 as f64;
    let s0 = |i: usize| (rows[i].2 == 0) as u8 as f64;
    let w = |i: usize| {
        let (_, _, s, arm, _) = rows[i];
        if s == 1 && arm == a && member(i) {
            1.0 / (t.participation[i] * t.treatment[a][i])
        } else {
            0.0
        }
    };
    let o = |i: usize| w(i) * (1.0 - t.participation[i]);
    let y = |i: usize| rows[i].4;
    let g = |i: usize| t.outcome[a][i];
    let sum = |f: &dyn Fn(usize) -> f64| (0..n).map(f).sum::<f64>();
    let n_v = sum(&in_v);
    let n_v0 = sum(&|i| in_v(i) * s0(i));
    match tag {
        EstimatorTag::Om => sum(&|i| in_v(i) * g(i)) / n_v,
        EstimatorTag::Ipw1 => sum(&|i| w(i) * y(i)) / n_v,
        EstimatorTag::Ipw2 => sum(&|i| w(i) * y(i)) / sum(&w),
        EstimatorTag::Aipw1 => sum(&|i| w(i) * (y(i) - g(i)) + in_v(i) * g(i)) / n_v,
        EstimatorTag::Aipw2 => sum(&|i| w(i) * (y(i) - g(i))) / sum(&w) + sum(&|i| in_v(i) * g(i)) / n_v,
        EstimatorTag::OmS0 => sum(&|i| in_v(i) * s0(i) * g(i)) / n_v0,
        EstimatorTag::Iow1 => sum(&|i| o(i) * y(i)) / n_v0,
        EstimatorTag::Iow2 => sum(&|i| o(i) * y(i)) / sum(&o),
        EstimatorTag::Aiow1 => sum(&|i| o(i) * (y(i) - g(i)) + in_v(i) * s0(i) * g(i)) / n_v0,
        EstimatorTag::Aiow2 => sum(&|i| o(i) * (y(i) - g(i))) / sum(&o) + sum(&|i| in_v(i) * s0(i) * g(i)) / n_v0,
        EstimatorTag::Trial => {
            let cell = |i: usize| (rows[i].2 == 1 && rows[i].3 == a && member(i)) as u8 as f64;
            sum(&|i| cell(i) * y(i)) / sum(&cell)
        }
        other => panic!("no literal form for {other}"),
    }
}

const CLOSED_FORM: [EstimatorTag; 11] = [
    EstimatorTag::Om,
    EstimatorTag::Ipw1,
    EstimatorTag::Ipw2,
    EstimatorTag::Aipw1,
    EstimatorTag::Aipw2,
    EstimatorTag::OmS0,
    EstimatorTag::Iow1,
    EstimatorTag::Iow2,
    EstimatorTag::Aiow1,
    EstimatorTag::Aiow2,
    EstimatorTag::Trial,
];

fn value(r: Result<PomEstimate, EstimationError>) -> f64 {
    r.expect("estimable").value
}

fn by_tag(ctx: &EstimationContext, tag: EstimatorTag, v: usize, a: usize) -> Result<PomEstimate, EstimationError> {
    match tag {
        EstimatorTag::Om => om_target(ctx, v, a),
        EstimatorTag::Ipw1 => ipw1(ctx, v, a),
        EstimatorTag::Ipw2 => ipw2(ctx, v, a),
        EstimatorTag::Aipw1 => aipw1(ctx, v, a),
        EstimatorTag::Aipw2 => aipw2(ctx, v, a),
        EstimatorTag::OmS0 => om_s0(ctx, v, a),
        EstimatorTag::Iow1 => iow1(ctx, v, a),
        EstimatorTag::Iow2 => iow2(ctx, v, a),
        EstimatorTag::Aiow1 => aiow1(ctx, v, a),
        EstimatorTag::Aiow2 => aiow2(ctx, v, a),
        EstimatorTag::Trial => trial_mean(ctx, v, a),
        other => panic!("not closed form: {other}"),
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn closed_forms_match_literal_sums(seed in any::<u64>(), i in 0u64..1000) {
        let Case { rows, ds, groups, table } = random_case(seed, i, 10..=50);
        let ctx = EstimationContext::new(&ds, &groups, &table);
        for tag in CLOSED_FORM {
            for v in 0..2 {
                for a in 0..2 {
                    let got = value(by_tag(&ctx, tag, v, a));
                    let want = literal(tag, &rows, &table, &|i| rows[i].1 as usize == v, a);
                    prop_assert!(close(got, want, 1e-12), "{tag} v={v} a={a}: {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn zero_outcome_model_reduces_augmented_to_weighting(seed in any::<u64>(), i in 0u64..1000) {
        let Case { ds, groups, table, .. } = random_case(seed, i, 10..=50);
        let zero = table.with_constant_outcome(0.0);
        let ctx = EstimationContext::new(&ds, &groups, &zero);
        for v in 0..2 {
            for a in 0..2 {
                for (aug, plain) in [
                    (EstimatorTag::Aipw1, EstimatorTag::Ipw1),
                    (EstimatorTag::Aipw2, EstimatorTag::Ipw2),
                    (EstimatorTag::Aiow1, EstimatorTag::Iow1),
                    (EstimatorTag::Aiow2, EstimatorTag::Iow2),
                ] {
                    let x = value(by_tag(&ctx, aug, v, a));
                    let y = value(by_tag(&ctx, plain, v, a));
                    prop_assert!((x - y).abs() < 1e-12, "{aug} vs {plain}: {x} {y}");
                }
            }
        }
    }

    #[test]
    fn interpolating_outcome_model_reduces_augmented_to_om(seed in any::<u64>(), i in 0u64..1000) {
        let Case { rows, ds, groups, mut table } = random_case(seed, i, 10..=50);
        for (i, r) in rows.iter().enumerate() {
            if r.2 == 1 {
                table.outcome[r.3][i] = r.4;
            }
        }
        let ctx = EstimationContext::new(&ds, &groups, &table);
        for v in 0..2 {
            for a in 0..2 {
                let om = value(om_target(&ctx, v, a));
                let om0 = value(om_s0(&ctx, v, a));
                prop_assert!((value(aipw1(&ctx, v, a)) - om).abs() < 1e-12);
                prop_assert!((value(aipw2(&ctx, v, a)) - om).abs() < 1e-12);
                prop_assert!((value(aiow1(&ctx, v, a)) - om0).abs() < 1e-12);
                prop_assert!((value(aiow2(&ctx, v, a)) - om0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalized_estimators_are_weight_scale_invariant(seed in any::<u64>(), i in 0u64..1000, c in 0.3f64..1.0) {
        let Case { ds, groups, table, .. } = random_case(seed, i, 10..=50);
        // Scaling every e_a by c scales both weight kinds by 1/c.
        let mut scaled = table.clone();
        for col in &mut scaled.treatment {
            for e in col.iter_mut() {
                *e *= c;
            }
        }
        let base = EstimationContext::new(&ds, &groups, &table);
        let ctx = EstimationContext::new(&ds, &groups, &scaled);
        for v in 0..2 {
            for a in 0..2 {
                for tag in [EstimatorTag::Ipw2, EstimatorTag::Iow2, EstimatorTag::Aipw2, EstimatorTag::Aiow2] {
                    let x = value(by_tag(&base, tag, v, a));
                    let y = value(by_tag(&ctx, tag, v, a));
                    prop_assert!(close(x, y, 1e-10), "{tag}: {x} vs {y}");
                }
                let w0 = ipw_weights(&base, v, a).unwrap();
                let w1 = ipw_weights(&ctx, v, a).unwrap();
                for (x, y) in w0.values.iter().zip(&w1.values) {
                    prop_assert!(close(x / c, *y, 1e-12));
                }
            }
        }
    }

    #[test]
    fn weights_vanish_off_support_and_odds_weights_are_products(seed in any::<u64>(), i in 0u64..1000) {
        let Case { rows, ds, groups, table } = random_case(seed, i, 10..=50);
        let ctx = EstimationContext::new(&ds, &groups, &table);
        for v in 0..2 {
            for a in 0..2 {
                let w = ipw_weights(&ctx, v, a).unwrap();
                let o = iow_weights(&ctx, v, a).unwrap();
                prop_assert_eq!(w.kind, WeightKind::Ipw);
                prop_assert_eq!(o.kind, WeightKind::Iow);
                for (i, r) in rows.iter().enumerate() {
                    let on = r.2 == 1 && r.3 == a && r.1 as usize == v;
                    prop_assert_eq!(w.values[i] > 0.0, on);
                    prop_assert!(w.values[i].is_finite());
                    prop_assert_eq!(o.values[i], w.values[i] * (1.0 - table.participation[i]));
                }
            }
        }
    }

    #[test]
    fn type_one_estimators_aggregate_over_subgroups(seed in any::<u64>(), i in 0u64..1000) {
        let Case { rows, ds, groups, table } = random_case(seed, i, 10..=50);
        let whole = Subgroups::whole(&ds);
        let part = EstimationContext::new(&ds, &groups, &table);
        let all = EstimationContext::new(&ds, &whole, &table);
        let n = rows.len() as f64;
        let n_v = |v: usize| rows.iter().filter(|r| r.1 as usize == v).count() as f64;
        let n_v0 = |v: usize| rows.iter().filter(|r| r.1 as usize == v && r.2 == 0).count() as f64;
        let n0 = rows.iter().filter(|r| r.2 == 0).count() as f64;
        for a in 0..2 {
            for tag in [EstimatorTag::Om, EstimatorTag::Ipw1, EstimatorTag::Aipw1] {
                let lhs: f64 = (0..2).map(|v| n_v(v) * value(by_tag(&part, tag, v, a))).sum();
                let rhs = n * value(by_tag(&all, tag, 0, a));
                prop_assert!((lhs - rhs).abs() < 1e-10, "{tag}: {lhs} vs {rhs}");
            }
            for tag in [EstimatorTag::OmS0, EstimatorTag::Iow1, EstimatorTag::Aiow1] {
                let lhs: f64 = (0..2).map(|v| n_v0(v) * value(by_tag(&part, tag, v, a))).sum();
                let rhs = n0 * value(by_tag(&all, tag, 0, a));
                prop_assert!((lhs - rhs).abs() < 1e-10, "{tag}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn range_properties(seed in any::<u64>(), i in 0u64..1000) {
        let Case { rows, ds, groups, table } = random_case(seed, i, 10..=50);
        let ctx = EstimationContext::new(&ds, &groups, &table);
        for v in 0..2 {
            for a in 0..2 {
                let g: Vec<f64> = (0..rows.len()).filter(|&i| rows[i].1 as usize == v).map(|i| table.outcome[a][i]).collect();
                let ys: Vec<f64> = rows.iter().filter(|r| r.2 == 1 && r.3 == a && r.1 as usize == v).map(|r| r.4).collect();
                let (gmin, gmax) = (g.iter().copied().fold(f64::INFINITY, f64::min), g.iter().copied().fold(f64::NEG_INFINITY, f64::max));
                let (ymin, ymax) = (ys.iter().copied().fold(f64::INFINITY, f64::min), ys.iter().copied().fold(f64::NEG_INFINITY, f64::max));
                let eps = 1e-12;
                for x in [value(om_target(&ctx, v, a)), value(om_s0(&ctx, v, a))] {
                    prop_assert!(x >= gmin - eps && x <= gmax + eps);
                }
                for x in [value(ipw2(&ctx, v, a)), value(iow2(&ctx, v, a))] {
                    prop_assert!(x >= ymin - eps && x <= ymax + eps);
                }
            }
        }
    }

    #[test]
    fn saturated_regression_reproduces_normalized_weighting(seed in any::<u64>(), i in 0u64..1000) {
        let Case { ds, groups, table, .. } = random_case(seed, i, 10..=50);
        let ctx = EstimationContext::new(&ds, &groups, &table);
        for (scope, f) in [
            (EstimandScope::EntirePopulation, ipw2 as fn(&EstimationContext, usize, usize) -> _),
            (EstimandScope::NonRandomized, iow2),
        ] {
            let sat = saturated_weighted_regression(&ctx, scope);
            for v in 0..2 {
                for a in 0..2 {
                    let x = sat[v][a].as_ref().unwrap().value;
                    let y = value(f(&ctx, v, a));
                    prop_assert!((x - y).abs() < 1e-8, "{scope} v={v} a={a}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn effects_are_exact_differences(seed in any::<u64>(), i in 0u64..1000) {
        let Case { ds, groups, table, .. } = random_case(seed, i, 10..=50);
        let ctx = EstimationContext::new(&ds, &groups, &table);
        let formula = ModelFormula::parse("Y ~ x", Family::Gaussian).unwrap();
        let set = estimate_all(&ctx, &CLOSED_FORM, &formula);
        for tag in CLOSED_FORM {
            for v in 0..2 {
                let m1 = set.mean(tag, v, 1).unwrap().as_ref().unwrap().value;
                let m0 = set.mean(tag, v, 0).unwrap().as_ref().unwrap().value;
                let e = set.effect(tag, v, 1).unwrap().as_ref().unwrap();
                prop_assert_eq!(e.value, m1 - m0);
                prop_assert_eq!(e.reference.as_str(), "0");
            }
        }
        let pom: Vec<PomEstimate> = (0..4).map(|k| ipw2(&ctx, k / 2, k % 2).unwrap()).collect();
        let fwd = subgroup_ate(&pom, "1", "0");
        let back = subgroup_ate(&pom, "0", "1");
        for (f, b) in fwd.iter().zip(&back) {
            prop_assert_eq!(f.as_ref().unwrap().value, -b.as_ref().unwrap().value);
        }
        let same = subgroup_ate(&pom, "1", "1");
        prop_assert!(same.iter().all(|e| e.as_ref().unwrap().value == 0.0));
    }

    #[test]
    fn constant_participation_makes_odds_weighting_equal_probability_weighting(seed in any::<u64>(), i in 0u64..1000, p in 0.05f64..0.95) {
        let Case { ds, groups, mut table, .. } = random_case(seed, i, 10..=50);
        table.participation = vec![p; ds.len()];
        let ctx = EstimationContext::new(&ds, &groups, &table);
        for v in 0..2 {
            for a in 0..2 {
                let x = value(iow2(&ctx, v, a));
                let y = value(ipw2(&ctx, v, a));
                prop_assert!(close(x, y, 1e-12));
            }
        }
    }
}

/// Four-row example: subgroup 1 holds one treated trial row (Y = 1) and one
/// non-randomized row; `p = e = 0.5` everywhere.
fn micro() -> (common::Row, Vec<Row>) {
    let rows = vec![
        (0.1, 1.0, 1, 1, 1.0),
        (0.2, 1.0, 0, 0, 0.0),
        (0.3, 0.0, 1, 0, 0.0),
        (0.4, 0.0, 1, 1, 1.0),
    ];
    (rows[0], rows)
}

#[test]
fn micro_dataset_hand_arithmetic() {
    let (_, rows) = micro();
    let (ds, groups) = dataset(&rows, Design::Nested);
    let table = NuisanceTable::constant(4, 0.5, &[0.5, 0.5], &[0.5, 0.5]);
    let ctx = EstimationContext::new(&ds, &groups, &table);
    let w = ipw_weights(&ctx, 1, 1).unwrap();
    assert_eq!(w.values, vec![4.0, 0.0, 0.0, 0.0]);
    assert_eq!(iow_weights(&ctx, 1, 1).unwrap().values, vec![2.0, 0.0, 0.0, 0.0]);
    assert_eq!(ipw1(&ctx, 1, 1).unwrap().value, 2.0);
    assert_eq!(ipw2(&ctx, 1, 1).unwrap().value, 1.0);
    // (4 (1 - 0.5) + 2 (0.5)) / 2
    assert_eq!(aipw1(&ctx, 1, 1).unwrap().value, 1.5);
    // 4 (0.5) / 4 + 0.5
    assert_eq!(aipw2(&ctx, 1, 1).unwrap().value, 1.0);
    // (2 (0.5) + 0.5) / 1
    assert_eq!(aiow1(&ctx, 1, 1).unwrap().value, 1.5);
    assert_eq!(aiow2(&ctx, 1, 1).unwrap().value, 1.0);
    assert_eq!(iow1(&ctx, 1, 1).unwrap().value, 2.0);
    assert_eq!(om_target(&ctx, 1, 1).unwrap().value, 0.5);

    let constant = NuisanceTable::constant(4, 0.5, &[0.5, 0.5], &[0.3, 0.7]);
    let ctx = EstimationContext::new(&ds, &groups, &constant);
    assert_eq!(om_target(&ctx, 0, 1).unwrap().value, 0.7);
    assert_eq!(om_s0(&ctx, 1, 0).unwrap().value, 0.3);

    let zero_y: Vec<Row> = rows.iter().map(|r| (r.0, r.1, r.2, r.3, 0.0)).collect();
    let (ds0, g0) = dataset(&zero_y, Design::Nested);
    let ctx = EstimationContext::new(&ds0, &g0, &table);
    assert_eq!(ipw1(&ctx, 0, 1).unwrap().value, 0.0);
}

#[test]
fn diagnostics_report_counts_and_effective_size() {
    let (_, rows) = micro();
    let (ds, groups) = dataset(&rows, Design::Nested);
    let table = NuisanceTable::constant(4, 0.5, &[0.5, 0.5], &[0.5, 0.5]);
    let ctx = EstimationContext::new(&ds, &groups, &table);
    let d = ipw2(&ctx, 1, 1).unwrap().diagnostics;
    assert_eq!(d.n_rows, 2);
    assert_eq!(d.n_included, 1);
    assert_eq!(d.weight_sum, Some(4.0));
    assert_eq!(d.effective_sample_size, Some(1.0));
}

#[test]
fn error_paths_have_codes() {
    // Every row in the trial: nothing is non-randomized.
    let rows: Vec<Row> = vec![(0.0, 0.0, 1, 0, 1.0), (0.0, 0.0, 1, 1, 0.0), (1.0, 1.0, 1, 0, 1.0), (1.0, 1.0, 1, 1, 1.0)];
    let (ds, groups) = dataset(&rows, Design::Nested);
    let table = NuisanceTable::constant(4, 0.5, &[0.5, 0.5], &[0.5, 0.5]);
    let ctx = EstimationContext::new(&ds, &groups, &table);
    assert_eq!(om_s0(&ctx, 0, 0).unwrap_err().code(), "EMPTY_NONRANDOMIZED_SUBGROUP");
    assert_eq!(aiow1(&ctx, 0, 0).unwrap_err().code(), "EMPTY_NONRANDOMIZED_SUBGROUP");

    // Subgroup 1 has no treated trial rows.
    let rows: Vec<Row> = vec![(0.0, 0.0, 1, 0, 1.0), (0.0, 0.0, 1, 1, 0.0), (1.0, 1.0, 1, 0, 1.0), (1.0, 1.0, 0, 0, 0.0)];
    let (ds, groups) = dataset(&rows, Design::Nested);
    let ctx = EstimationContext::new(&ds, &groups, &table);
    assert_eq!(ipw2(&ctx, 1, 1).unwrap_err().code(), "ZERO_WEIGHT_SUM");
    assert_eq!(trial_mean(&ctx, 1, 1).unwrap_err().code(), "EMPTY_TRIAL_CELL");
    assert!(ipw1(&ctx, 1, 1).is_ok());
    let sat = saturated_weighted_regression(&ctx, EstimandScope::EntirePopulation);
    assert_eq!(sat[0][0].as_ref().unwrap_err().code(), "EMPTY_TRIAL_CELL");

    // Subgroup with no rows at all.
    let three = Subgroups::from_membership(vec!["0".into(), "1".into(), "2".into()], vec![0, 0, 1, 1]);
    let ctx = EstimationContext::new(&ds, &three, &table);
    assert_eq!(om_target(&ctx, 2, 0).unwrap_err().code(), "EMPTY_SUBGROUP");

    // Entire-population estimands on a non-nested design.
    let rows: Vec<Row> = vec![(0.0, 0.0, 1, 0, 1.0), (0.0, 1.0, 1, 1, 0.0), (1.0, 1.0, 0, 0, 0.0), (1.0, 0.0, 0, 0, 0.0)];
    let (ds, groups) = dataset(&rows, Design::NonNested);
    let ctx = EstimationContext::new(&ds, &groups, &table);
    assert_eq!(ipw2(&ctx, 0, 0).unwrap_err().code(), "SCOPE_DESIGN");
    assert_eq!(om_target(&ctx, 0, 0).unwrap_err().code(), "SCOPE_DESIGN");
    assert!(om_s0(&ctx, 0, 0).is_ok());
    let formula = ModelFormula::parse("Y ~ 1", Family::Gaussian).unwrap();
    let set = estimate_all(&ctx, &[EstimatorTag::Aipw3, EstimatorTag::SatIpw2], &formula);
    assert!(set.means.iter().all(|c| c.result.as_ref().unwrap_err().code() == "SCOPE_DESIGN"));
    assert!(!set.all_ok());
}

#[test]
fn non_finite_weights_are_rejected() {
    let (_, rows) = micro();
    let (ds, groups) = dataset(&rows, Design::Nested);
    let mut table = NuisanceTable::constant(4, 0.5, &[0.5, 0.5], &[0.5, 0.5]);
    table.participation[0] = 0.0;
    let ctx = EstimationContext::new(&ds, &groups, &table);
    assert_eq!(ipw_weights(&ctx, 1, 1).unwrap_err().code(), "NONFINITE_WEIGHT");
}

fn fitted_case(seed: u64, participation: &str, treatment: TreatmentModel, outcome: &str, family: Family) -> (Case, NuisanceSpec) {
    let mut case = random_case(seed, 0, 200..=200);
    let spec = NuisanceSpec {
        participation: ModelFormula::parse(participation, Family::Binomial).unwrap(),
        treatment,
        outcome: ModelFormula::parse(outcome, family).unwrap(),
        truncation: None,
    };
    let (_, table) = fit_and_predict(&case.ds, &spec).unwrap();
    case.table = table;
    (case, spec)
}

#[test]
fn weighted_standardization_with_constant_weights_is_outcome_modelling() {
    let (case, spec) = fitted_case(3, "S ~ 1", TreatmentModel::Known(vec![0.5, 0.5]), "Y ~ x + g", Family::Gaussian);
    let ctx = EstimationContext::new(&case.ds, &case.groups, &case.table);
    for v in 0..2 {
        for a in 0..2 {
            let x = weighted_regression_standardization(&ctx, &spec.outcome, v, a, EstimandScope::EntirePopulation).unwrap();
            let y = om_target(&ctx, v, a).unwrap();
            assert!((x.value - y.value).abs() < 1e-10, "{} vs {}", x.value, y.value);
            let x = weighted_regression_standardization(&ctx, &spec.outcome, v, a, EstimandScope::NonRandomized).unwrap();
            let y = om_s0(&ctx, v, a).unwrap();
            assert!((x.value - y.value).abs() < 1e-10);
        }
    }
}

#[test]
fn weighted_standardization_with_saturated_formula_is_normalized_weighting() {
    let (case, spec) = fitted_case(5, "S ~ x + g", TreatmentModel::Fitted(ModelFormula::parse("A ~ x", Family::Binomial).unwrap()), "Y ~ g", Family::Gaussian);
    let ctx = EstimationContext::new(&case.ds, &case.groups, &case.table);
    for v in 0..2 {
        for a in 0..2 {
            let x = weighted_regression_standardization(&ctx, &spec.outcome, v, a, EstimandScope::EntirePopulation).unwrap();
            assert!((x.value - ipw2(&ctx, v, a).unwrap().value).abs() < 1e-10);
            let x = weighted_regression_standardization(&ctx, &spec.outcome, v, a, EstimandScope::NonRandomized).unwrap();
            assert!((x.value - iow2(&ctx, v, a).unwrap().value).abs() < 1e-10);
        }
    }
}

#[test]
fn intercept_only_weighted_outcome_is_arm_weighted_mean() {
    let (case, spec) = fitted_case(9, "S ~ x", TreatmentModel::Known(vec![0.4, 0.6]), "Y ~ 1", Family::Gaussian);
    let whole = Subgroups::whole(&case.ds);
    let ctx = EstimationContext::new(&case.ds, &whole, &case.table);
    for a in 0..2 {
        let x = weighted_regression_standardization(&ctx, &spec.outcome, 0, a, EstimandScope::EntirePopulation).unwrap();
        assert!((x.value - ipw2(&ctx, 0, a).unwrap().value).abs() < 1e-10);
    }
}

#[test]
fn trial_comparator_is_the_unweighted_cell_mean() {
    let Case { rows, ds, groups, table } = random_case(17, 3, 40..=40);
    let ctx = EstimationContext::new(&ds, &groups, &table);
    for v in 0..2 {
        for a in 0..2 {
            let ys: Vec<f64> = rows.iter().filter(|r| r.2 == 1 && r.3 == a && r.1 as usize == v).map(|r| r.4).collect();
            let want = ys.iter().sum::<f64>() / ys.len() as f64;
            assert!((trial_mean(&ctx, v, a).unwrap().value - want).abs() < 1e-15);
        }
    }
}

#[test]
fn estimate_set_layout() {
    let Case { ds, groups, table, .. } = random_case(1, 1, 30..=30);
    let ctx = EstimationContext::new(&ds, &groups, &table);
    let formula = ModelFormula::parse("Y ~ x", Family::Gaussian).unwrap();
    let set = estimate_all(&ctx, &EstimatorTag::ALL, &formula);
    assert_eq!(set.means.len(), 15 * 4);
    assert_eq!(set.effects.len(), 15 * 2);
    assert_eq!(set.values().len(), 90);
    for (i, c) in set.means.iter().enumerate() {
        assert_eq!((c.subgroup, c.arm), ((i / 2) % 2, i % 2));
    }
    let direct = [ipw2(&ctx, 1, 0).unwrap().value, aiow2(&ctx, 0, 1).unwrap().value];
    let from_set = [
        set.mean(EstimatorTag::Ipw2, 1, 0).unwrap().as_ref().unwrap().value,
        set.mean(EstimatorTag::Aiow2, 0, 1).unwrap().as_ref().unwrap().value,
    ];
    assert!(max_abs_diff(&direct, &from_set) == 0.0);
}

#[test]
fn extrapolation_share_counts_rows_outside_trial_range() {
    let rows: Vec<Row> = vec![
        (0.0, 0.0, 1, 0, 1.0),
        (1.0, 0.0, 1, 1, 0.0),
        (0.5, 1.0, 1, 0, 1.0),
        (0.6, 1.0, 1, 1, 1.0),
        (2.0, 0.0, 0, 0, 0.0),
        (0.5, 0.0, 0, 0, 0.0),
        (-1.0, 1.0, 0, 0, 0.0),
        (0.2, 1.0, 0, 0, 0.0),
    ];
    let (ds, groups) = dataset(&rows, Design::Nested);
    let d = extrapolation_diagnostic(&ds, &groups);
    assert_eq!(d.overall, 0.5);
    assert_eq!(d.by_subgroup, vec![("0".to_string(), 0.5), ("1".to_string(), 0.5)]);
}
