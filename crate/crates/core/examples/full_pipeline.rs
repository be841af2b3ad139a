//! Writes the demo corpus and runs every stage through the CLI entry point.
//!
//!     cargo run --example full_pipeline -- /tmp/zcurate-demo

use std::path::PathBuf;

fn main() {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("zcurate-demo"));
    let paths = zcurate::fixture::write_fixture(&root).expect("write fixture");
    let config = paths.config.to_string_lossy().into_owned();
    for stage in [
        "ingest", "profile", "dedup", "graph", "sample", "pairs", "plan", "stats",
    ] {
        let code = zcurate::cli::run(["zcurate", "--config", config.as_str(), stage]);
        if code != 0 {
            std::process::exit(code);
        }
    }
    println!("outputs in {}", paths.data_dir.display());
}
