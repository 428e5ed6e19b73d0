#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use subgroup_transport::data::{Column, Dataset, Design, Observation, Subgroups, TrialRecord};
use subgroup_transport::nuisance::NuisanceTable;
use subgroup_transport::rng::stream;

/// Row of a hand-built dataset: covariates `(x, g)`, `S`, arm, `Y`.
pub type Row = (f64, f64, u8, usize, f64);

/// Dataset with covariates `x` and `g`; subgroups are the values of `g`.
pub fn dataset(rows: &[Row], design: Design) -> (Dataset, Subgroups) {
    let obs = rows
        .iter()
        .map(|&(x, g, s, a, y)| Observation {
            covariates: vec![x, g],
            trial: (s == 1).then_some(TrialRecord { arm: a, y }),
        })
        .collect();
    let ds = Dataset::new(obs, design, vec![Column::numeric("x"), Column::numeric("g")], vec!["0".into(), "1".into()])
        .expect("valid dataset");
    let membership = rows.iter().map(|r| r.1 as usize).collect();
    let groups = Subgroups::from_membership(vec!["0".into(), "1".into()], membership);
    (ds, groups)
}

/// Random dataset of size `n` with binary arm and subgroup; every
/// `(subgroup, arm)` trial cell and every subgroup's `S = 0` part is non-empty.
pub fn random_rows(rng: &mut ChaCha8Rng, n: usize, binary_y: bool) -> Vec<Row> {
    assert!(n >= 6);
    let mut rows = Vec::with_capacity(n);
    let y = |rng: &mut ChaCha8Rng| if binary_y { rng.random_bool(0.5) as u8 as f64 } else { rng.random_range(-2.0..3.0) };
    for g in 0..2 {
        for a in 0..2 {
            let v = y(rng);
            rows.push((rng.random_range(-1.0..1.0), g as f64, 1, a, v));
        }
        rows.push((rng.random_range(-1.0..1.0), g as f64, 0, 0, 0.0));
    }
    while rows.len() < n {
        let s = rng.random_bool(0.6) as u8;
        let a = rng.random_range(0..2);
        let v = y(rng);
        rows.push((rng.random_range(-1.0..1.0), rng.random_range(0..2) as f64, s, a, if s == 1 { v } else { 0.0 }));
    }
    // Shuffle so that the seeded rows are not always first.
    for i in (1..rows.len()).rev() {
        let j = rng.random_range(0..=i);
        rows.swap(i, j);
    }
    rows
}

/// Arbitrary nuisance predictions with `p, e` bounded away from 0 and 1.
pub fn random_table(rng: &mut ChaCha8Rng, n: usize) -> NuisanceTable {
    let participation = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
    let e1: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..0.8)).collect();
    let e0 = e1.iter().map(|e| 1.0 - e).collect();
    let outcome = (0..2).map(|_| (0..n).map(|_| rng.random_range(-1.0..2.0)).collect()).collect();
    NuisanceTable { participation, treatment: vec![e0, e1], outcome }
}

pub struct Case {
    pub rows: Vec<Row>,
    pub ds: Dataset,
    pub groups: Subgroups,
    pub table: NuisanceTable,
}

/// The `i`-th of a reproducible family of small random nested cases.
pub fn random_case(seed: u64, i: u64, n_range: std::ops::RangeInclusive<usize>) -> Case {
    let mut rng = stream(seed, i);
    let n = rng.random_range(n_range);
    let binary = rng.random_bool(0.5);
    let rows = random_rows(&mut rng, n, binary);
    let (ds, groups) = dataset(&rows, Design::Nested);
    let table = random_table(&mut rng, n);
    Case { rows, ds, groups, table }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// The command-line binary built for this test run.
pub fn bin() -> std::process::Command {
    std::process::Command::new(env!("CARGO_BIN_EXE_subgroup-transport"))
}

/// Writes `sample.csv` (nested default-design sample) and `analysis.toml`
/// into `dir`; `extra` is appended to the config and may add sections.
pub fn write_analysis(dir: &std::path::Path, n: usize, seed: u64, bootstrap: usize, extra: &str) -> std::path::PathBuf {
    use subgroup_transport::simulation::{generate_sample, Dgp, SampleDesign};
    let sample = generate_sample(&Dgp::default_study(), SampleDesign::Nested { n }, &mut stream(seed, 0)).unwrap();
    subgroup_transport::data::write_dataset(&sample.dataset, std::fs::File::create(dir.join("sample.csv")).unwrap())
        .unwrap();
    let cfg = format!(
        r#"seed = 20240601

[data]
path = "sample.csv"
design = "nested"
covariates = ["X1", "X2", "X3"]

[subgroups]
column = "X1"

[estimands]
scopes = ["entire_population", "non_randomized"]

[models]
participation = "S ~ X1 + X2 + X3 + X1:X2"
treatment = "A ~ 1"
outcome = "Y ~ X1 + X2 + X3"

[bootstrap]
replicates = {bootstrap}

[output]
path = "report.json"
{extra}"#
    );
    let path = dir.join("analysis.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}

/// Writes a simulation config using the frozen oracle fixture.
pub fn write_simulation(dir: &std::path::Path, n: usize, replications: usize, extra: &str) -> std::path::PathBuf {
    let fixture = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/oracle_default.json");
    let cfg = format!(
        r#"seed = 7

[study]
design = "nested"
n = {n}
replications = {replications}
{extra}

[oracle]
fixture = "{}"

[output]
dir = "out"
"#,
        fixture.display()
    );
    let path = dir.join("simulation.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}
