//! Writes a nested sample from the default study design as CSV.
//!
//!     cargo run --release --example make_sample -- <n> <seed> <out.csv>

use subgroup_transport::data::write_dataset;
use subgroup_transport::rng::stream;
use subgroup_transport::simulation::{generate_sample, Dgp, SampleDesign};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [n, seed, out] = args.as_slice() else {
        anyhow::bail!("usage: make_sample <n> <seed> <out.csv>");
    };
    let mut rng = stream(seed.parse()?, 0);
    let sample = generate_sample(&Dgp::default_study(), SampleDesign::Nested { n: n.parse()? }, &mut rng)?;
    write_dataset(&sample.dataset, std::fs::File::create(out)?)?;
    Ok(())
}
