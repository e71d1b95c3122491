//! Generates phantoms, saves them as SSV files, reads them back, and compares
//! the extracted structure features with the generator's metadata.
//!
//! Usage: `phantom_features [out-dir]` (default: a temporary directory).

use anyhow::Result;
use pseudo3d::analysis::{structure_depth, structure_displacement, structure_size, DepthReduction, StructureFeatures};
use pseudo3d::data::io::{load_dir, save_volume};
use pseudo3d::data::{generate_set, PhantomPreset, PhantomSpec};
use pseudo3d::experiment::write_slice;
use std::path::PathBuf;

fn main() -> Result<()> {
    let out = match std::env::args().nth(1) {
        Some(p) => PathBuf::from(p),
        None => std::env::temp_dir().join("pseudo3d-phantoms"),
    };
    std::fs::create_dir_all(&out)?;
    let spec = PhantomSpec::preset(PhantomPreset::Brain, [24, 48, 48], 11);
    let set = generate_set(&spec, 3)?;
    for (v, _) in &set {
        save_volume(v, &out)?;
    }
    let volumes = load_dir(&out, spec.num_classes)?;
    println!("wrote and reloaded {} volumes in {}", volumes.len(), out.display());

    for recipe in &spec.classes {
        let c = recipe.class;
        let metas: Vec<_> = set.iter().flat_map(|(_, m)| m.iter().filter(|m| m.class == c)).collect();
        let meta_depth = metas.iter().map(|m| m.depth as f64).sum::<f64>() / metas.len() as f64;
        let meta_size = metas.iter().map(|m| m.voxel_count as f64).sum::<f64>()
            / (volumes.len() * volumes[0].voxels()) as f64;
        println!(
            "class {c}: depth {:.2} (metadata {meta_depth:.2}), size {:.5} (metadata {meta_size:.5}), displacement {:.4}",
            structure_depth(&volumes, c, DepthReduction::RegionMean)?,
            structure_size(&volumes, c)?,
            structure_displacement(&volumes, c)?,
        );
    }
    print!("{}", StructureFeatures::extract(&volumes, DepthReduction::RegionMean)?.to_csv());

    let slice = volumes[0].dims[0] / 2;
    let ppm = out.join("phantom-000-mid.ppm");
    write_slice(&volumes[0], None, slice, &ppm)?;
    println!("rendered slice {slice} to {}", ppm.display());
    Ok(())
}
