//! Regenerates `tests/fixtures/oracle_default.json`.
//!
//!     cargo run --release --example freeze_oracle -- [m] [seed]

use std::path::PathBuf;

use subgroup_transport::simulation::{oracle_truths, Dgp};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let m: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10_000_000);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20_240_601);
    let table = oracle_truths(&Dgp::default_study(), m, seed)?;
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/oracle_default.json");
    std::fs::write(&path, serde_json::to_string_pretty(&table)? + "\n")?;
    for c in &table.cells {
        println!("{:<18} v={} {:<5} {:.6} (se {:.2e})", c.scope.as_str(), c.subgroup, c.quantity.to_string(), c.value, c.se);
    }
    println!("wrote {}", path.display());
    Ok(())
}
