//! Runs a small experiment grid twice; the second run resumes from the
//! completion markers without retraining.

use anyhow::Result;
use pseudo3d::experiment::{run_grid, ExperimentConfig};

fn main() -> Result<()> {
    let out = std::env::temp_dir().join("pseudo3d-grid");
    let _ = std::fs::remove_dir_all(&out);
    let config = ExperimentConfig::parse(&format!(
        r#"
output_dir = "{}"
folds = 2

[source.phantom]
preset = "kidney"
dims = [8, 16, 16]
count = 4

[grid]
modes = ["end2end_2d", "proposed", "channel_based"]
depths = [3, 5]
base_filters = 4

[train]
max_epochs = 3
"#,
        out.display()
    ))?;
    let first = run_grid(&config, &mut |line| println!("  {line}"))?;
    println!("first run: {} trained, {} skipped", first.trained, first.skipped);
    let second = run_grid(&config, &mut |_| {})?;
    println!("second run: {} trained, {} skipped", second.trained, second.skipped);
    print!("{}", std::fs::read_to_string(&second.aggregate_path)?);
    Ok(())
}
