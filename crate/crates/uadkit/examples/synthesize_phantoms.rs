//! Generate a small synthetic phantom dataset and inspect it.
//!
//! Writes .uadv volumes plus a PGM preview of one axial slice, and prints
//! per-volume statistics. Run with `cargo run --example synthesize_phantoms`.

use uadkit::phantom::{generate_dataset, PhantomSpec};
use uadkit::volume::write_pgm16;

fn main() -> Result<(), uadkit::UadError> {
    let out = std::path::Path::new("target/example-output/phantoms");
    std::fs::create_dir_all(out).expect("create output dir");

    let spec = PhantomSpec {
        shape: [32, 32, 32],
        seed: 7,
        ..PhantomSpec::default()
    };

    for (lesioned, n) in [(false, 3), (true, 3)] {
        for v in generate_dataset(&spec, n, lesioned)? {
            let brain = v.brain_mask.iter().filter(|&&b| b).count();
            let lesion = v
                .lesion_mask
                .as_ref()
                .map_or(0, |m| m.iter().filter(|&&b| b).count());
            println!(
                "{:>14}: {} brain voxels, {} lesion voxels",
                v.id, brain, lesion
            );
            v.write(&out.join(format!("{}.uadv", v.id)))?;
        }
    }

    // Preview the central slice of one lesioned volume.
    let v = uadkit::phantom::generate_phantom(&spec, true, 0)?;
    let z = v.shape[0] / 2;
    let plane = v.shape[1] * v.shape[2];
    let slice: Vec<f64> = v.voxels[z * plane..(z + 1) * plane]
        .iter()
        .map(|&x| x as f64)
        .collect();
    let preview = out.join("lesioned_0000_slice.pgm");
    write_pgm16(&preview, v.shape[1], v.shape[2], &slice)?;
    println!("dataset and preview written under {}", out.display());
    Ok(())
}
