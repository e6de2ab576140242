//! Ray-casts a hand-built scene: textured ground with two boxes.
//!
//! cargo run --release --example render_scene -- [out_dir]

use std::path::PathBuf;

use monovit::geometry::Intrinsics;
use monovit::io::{write_pfm, write_pgm, write_ppm};
use monovit::synth::{camera_pose, render, AaBox, Scene, TextureConfig};

fn main() -> monovit::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "render".into()));
    std::fs::create_dir_all(&out).map_err(|e| monovit::Error::Io {
        path: out.clone(),
        source: e,
    })?;

    let ground = 1.5;
    let scene = Scene {
        ground_y: ground,
        ground_seed: 11,
        boxes: vec![
            AaBox {
                min: [-0.4, ground - 0.3, 2.0],
                max: [0.0, ground, 2.4],
                seed: 11,
            },
            AaBox {
                min: [0.3, ground - 0.2, 1.5],
                max: [0.5, ground, 1.7],
                seed: 11,
            },
        ],
        texture: TextureConfig::default(),
        background: [0.5; 3],
        far: 100.0,
    };
    let (h, w) = (96, 128);
    let k = Intrinsics::new(
        0.9 * w as f64,
        0.9 * w as f64,
        (w as f64 - 1.0) / 2.0,
        (h as f64 - 1.0) / 2.0,
    )?;
    let cam = camera_pose([0.0, 0.0, 0.0], 0.0, 0.6);
    let r = render(&scene, &cam, &k, (h, w), 4)?;

    write_ppm(&out.join("image.ppm"), &r.image)?;
    write_pfm(&out.join("depth.pfm"), &r.depth)?;
    write_pgm(&out.join("inverse_depth.pgm"), &r.depth.map(|d| 1.0 / d))?;
    let d = r.depth.data();
    let near = d.iter().copied().fold(f64::INFINITY, f64::min);
    println!(
        "{w}x{h}, nearest surface {near:.3}, files in {}",
        out.display()
    );
    Ok(())
}
