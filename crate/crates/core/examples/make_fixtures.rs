//! Regenerates the shipped fixtures under `fixtures/` at the workspace root:
//! regression toys, the two-datum bundle, a one-cell HJB toy and the synthetic
//! 8×8 digit images.
//!
//!     cargo run -p deepide --example make_fixtures

use std::path::{Path, PathBuf};

use deepide::datasets::{digit_images, regression_toy};
use deepide::grid::{GridFunction, SpatialGrid};
use deepide::io::{write_function_csv, write_training_set};
use deepide::output::TrainingSet;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn main() -> deepide::Result<()> {
    let dir = root();
    write_training_set(&dir.join("toy1"), &regression_toy(1, 8)?)?;
    write_training_set(&dir.join("toy2"), &regression_toy(2, 8)?)?;
    write_training_set(&dir.join("toy3"), &regression_toy(3, 8)?)?;
    write_training_set(&dir.join("digits8x8"), &digit_images(8)?)?;

    let g = SpatialGrid::unit_interval(1)?.into_shared();
    let one = TrainingSet::new(vec![GridFunction::constant(g.clone(), 0.2)], vec![GridFunction::constant(g.clone(), 1.5)])?;
    let hjb = dir.join("hjb1");
    write_training_set(&hjb, &one)?;
    write_function_csv(&hjb.join("state.csv"), &GridFunction::constant(g.clone(), 0.2))?;
    write_function_csv(&hjb.join("costate.csv"), &GridFunction::constant(g, -1.3))?;
    println!("fixtures written to {}", dir.display());
    Ok(())
}
