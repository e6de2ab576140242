//! Warps the source frames into the target view with ground-truth depth
//! and pose, then with a perturbed pose.
//!
//! cargo run --release --example warp_reconstruct -- [out_dir]

use std::path::PathBuf;

use monovit::batch::{gt_reprojection_error, motion_magnitude};
use monovit::geometry::reconstruct;
use monovit::io::write_ppm;
use monovit::pose::PoseVar;
use monovit::synth::{make_dataset, DatasetConfig};
use monovit::Tape;

fn main() -> monovit::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "warp".into()));
    std::fs::create_dir_all(&out).map_err(|e| monovit::Error::Io {
        path: out.clone(),
        source: e,
    })?;
    let t = make_dataset(&DatasetConfig {
        count: 1,
        ..DatasetConfig::default()
    })?
    .remove(0);
    let (h, w) = (t.target.shape()[1], t.target.shape()[2]);

    let tape = Tape::new();
    let src = tape.constant(t.src_fwd.reshaped(&[1, 3, h, w])?);
    let depth = tape.constant(t.depth.reshaped(&[1, 1, h, w])?);
    let pose = PoseVar::constant(&tape, &[t.pose_fwd]);
    let (recon, proj) = reconstruct(src, depth, &pose, &t.intrinsics)?;
    write_ppm(&out.join("target.ppm"), &t.target)?;
    write_ppm(&out.join("source_fwd.ppm"), &t.src_fwd)?;
    write_ppm(
        &out.join("reconstructed.ppm"),
        &recon.value().reshaped(&[3, h, w])?,
    )?;
    println!("in view: {:.1}%", 100.0 * proj.valid_fraction());

    let alpha = 0.85;
    let exact = gt_reprojection_error(&t, alpha, [0.0; 3])?;
    let m = motion_magnitude(&t);
    let off = gt_reprojection_error(&t, alpha, [0.1 * m, 0.0, 0.0])?;
    println!("photometric error, true pose:        {exact:.6}");
    println!(
        "photometric error, 10% motion offset: {off:.6} ({:.1}x)",
        off / exact
    );
    Ok(())
}
