mod common;

use common::{dataset, random_case, Row};
use subgroup_transport::data::Design;
use subgroup_transport::glm::{Family, GlmError, ModelFormula};
use subgroup_transport::nuisance::{fit_and_predict, Component, NuisanceError, NuisanceSpec, TreatmentModel};

fn spec(participation: &str, treatment: TreatmentModel, outcome: &str, family: Family) -> NuisanceSpec {
    NuisanceSpec {
        participation: ModelFormula::parse(participation, Family::Binomial).unwrap(),
        treatment,
        outcome: ModelFormula::parse(outcome, family).unwrap(),
        truncation: None,
    }
}

fn fitted(f: &str) -> TreatmentModel {
    TreatmentModel::Fitted(ModelFormula::parse(f, Family::Binomial).unwrap())
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

#[test]
fn intercept_only_models_are_sample_proportions() {
    let case = random_case(4, 0, 80..=80);
    let rows = &case.rows;
    let (_, t) = fit_and_predict(&case.ds, &spec("S ~ 1", fitted("A ~ 1"), "Y ~ 1", Family::Gaussian)).unwrap();
    let p = mean(rows.iter().map(|r| r.2 as f64));
    let trial: Vec<&Row> = rows.iter().filter(|r| r.2 == 1).collect();
    let e1 = mean(trial.iter().map(|r| r.3 as f64));
    for i in 0..rows.len() {
        assert!((t.participation[i] - p).abs() < 1e-12);
        assert!((t.treatment[1][i] - e1).abs() < 1e-12);
        assert!((t.treatment[0][i] + t.treatment[1][i] - 1.0).abs() < 1e-15);
        for a in 0..2 {
            // Outcome models use only the trial rows of their own arm but
            // predict everywhere, including S = 0 rows.
            let g = mean(trial.iter().filter(|r| r.3 == a).map(|r| r.4));
            assert!((t.outcome[a][i] - g).abs() < 1e-12);
        }
    }
}

#[test]
fn categorical_models_are_cell_proportions() {
    let case = random_case(6, 0, 120..=120);
    let rows = &case.rows;
    let (_, t) = fit_and_predict(&case.ds, &spec("S ~ C(g)", fitted("A ~ C(g)"), "Y ~ C(g)", Family::Gaussian)).unwrap();
    for (i, r) in rows.iter().enumerate() {
        let same: Vec<&Row> = rows.iter().filter(|q| q.1 == r.1).collect();
        let p = mean(same.iter().map(|q| q.2 as f64));
        assert!((t.participation[i] - p).abs() < 1e-10);
        let e1 = mean(same.iter().filter(|q| q.2 == 1).map(|q| q.3 as f64));
        assert!((t.treatment[1][i] - e1).abs() < 1e-10);
        for a in 0..2 {
            let g = mean(same.iter().filter(|q| q.2 == 1 && q.3 == a).map(|q| q.4));
            assert!((t.outcome[a][i] - g).abs() < 1e-10);
        }
    }
}

#[test]
fn known_probabilities_are_used_verbatim_and_validated() {
    let case = random_case(7, 0, 40..=40);
    let (_, t) = fit_and_predict(&case.ds, &spec("S ~ x", TreatmentModel::Known(vec![0.25, 0.75]), "Y ~ x", Family::Gaussian)).unwrap();
    assert!(t.treatment[0].iter().all(|&e| e == 0.25));
    assert!(t.treatment[1].iter().all(|&e| e == 0.75));
    for bad in [vec![0.5], vec![0.0, 1.0], vec![0.3, 0.3]] {
        let err = fit_and_predict(&case.ds, &spec("S ~ x", TreatmentModel::Known(bad), "Y ~ x", Family::Gaussian)).unwrap_err();
        assert!(matches!(err, NuisanceError::KnownProbability(_)), "{err}");
    }
}

#[test]
fn wrong_response_names_are_rejected() {
    let case = random_case(8, 0, 40..=40);
    let err = fit_and_predict(&case.ds, &spec("A ~ x", fitted("A ~ 1"), "Y ~ x", Family::Gaussian)).unwrap_err();
    assert!(matches!(err, NuisanceError::Response { .. }));
    let err = fit_and_predict(&case.ds, &spec("S ~ x", fitted("A ~ 1"), "S ~ x", Family::Gaussian)).unwrap_err();
    assert!(matches!(err, NuisanceError::Response { .. }));
    let err = fit_and_predict(&case.ds, &spec("S ~ nope", fitted("A ~ 1"), "Y ~ x", Family::Gaussian)).unwrap_err();
    assert!(err.to_string().contains("nope"), "{err}");
}

#[test]
fn separated_participation_model_fails_with_component() {
    // g = 1 rows are all in the trial.
    let mut rows: Vec<Row> = Vec::new();
    for i in 0..30 {
        let g = (i % 2) as f64;
        let s = if g == 1.0 { 1 } else { (i % 4 == 0) as u8 };
        rows.push((i as f64 / 30.0, g, s, (i / 2) % 2, (i % 3 == 0) as u8 as f64));
    }
    let (ds, _) = dataset(&rows, Design::Nested);
    let err = fit_and_predict(&ds, &spec("S ~ C(g)", fitted("A ~ 1"), "Y ~ 1", Family::Binomial)).unwrap_err();
    assert!(
        matches!(err, NuisanceError::Fit { component: Component::Participation, source: GlmError::Separation { .. } }),
        "{err}"
    );
}

#[test]
fn truncation_clamps_probabilities() {
    let case = random_case(9, 0, 200..=200);
    let mut s = spec("S ~ x + g", fitted("A ~ x"), "Y ~ x", Family::Gaussian);
    let (_, raw) = fit_and_predict(&case.ds, &s).unwrap();
    let lo = raw.participation.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.participation.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // Cut into whichever tail is nearer to its bound.
    let c = (lo + 0.25 * (hi - lo)).min(1.0 - hi + 0.25 * (hi - lo));
    assert!(c > 0.0 && c < 0.5);
    s.truncation = Some(c);
    let (_, t) = fit_and_predict(&case.ds, &s).unwrap();
    for (a, b) in raw.participation.iter().zip(&t.participation) {
        assert_eq!(*b, a.clamp(c, 1.0 - c));
    }
    assert_ne!(raw.participation, t.participation);
}
