//! The .uadv volume format: write a volume with masks and metadata, read it
//! back bit-exactly, preprocess to a model grid and extract central slices.
//! Run with `cargo run --example volume_io`.

use uadkit::phantom::{generate_phantom, PhantomSpec};
use uadkit::volume::{extract_slices, preprocess, Volume};

fn main() -> Result<(), uadkit::UadError> {
    let dir = std::path::Path::new("target/example-output");
    std::fs::create_dir_all(dir).expect("create output dir");
    let path = dir.join("volume_io.uadv");

    let spec = PhantomSpec {
        shape: [24, 28, 36],
        seed: 2,
        ..PhantomSpec::default()
    };
    let v = generate_phantom(&spec, true, 0)?;
    v.write(&path)?;
    let back = Volume::read(&path)?;
    assert_eq!(v, back);
    println!(
        "round-tripped {} ({}x{}x{}, id `{}`)",
        path.display(),
        v.shape[0],
        v.shape[1],
        v.shape[2],
        back.id
    );
    println!("metadata: {}", back.metadata);

    // Crop/pad to a 2D model grid and pull central slices.
    let pre = preprocess(&back, [24, 32, 32]);
    println!(
        "preprocessed to {:?}; intensities rescaled to [0,1] inside the brain mask",
        pre.shape
    );
    let slices = extract_slices(&pre, 4)?;
    for (id, z, t) in &slices {
        println!("  slice {id}[z={z}] as tensor {:?}", t.shape());
    }
    Ok(())
}
