//! Procedural scenes (textured ground plane and boxes) ray-cast from a moving
//! pinhole camera, giving image triplets with exact depth and poses.
//!
//! World axes match the camera at rest: x right, y down, z forward. The
//! ground is the plane `y = ground_y`; cameras sit near `y = 0` and pitch
//! down so the ground fills the view.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{DepthRange, Intrinsics};
use crate::pose::{so3_exp, Se3};
use crate::tensor::{for_each_chunk, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextureConfig {
    /// Lattice frequency of the first octave, cycles per scene unit.
    pub base_frequency: f64,
    pub octaves: u32,
    pub persistence: f64,
    pub contrast: f64,
}

impl Default for TextureConfig {
    fn default() -> Self {
        TextureConfig {
            base_frequency: 1.5,
            octaves: 3,
            persistence: 0.5,
            contrast: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AaBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub ground_y: f64,
    pub ground_seed: u64,
    pub boxes: Vec<AaBox>,
    pub texture: TextureConfig,
    pub background: [f64; 3],
    /// Depth reported for rays that hit nothing.
    pub far: f64,
}

fn hash(mut x: u64) -> u64 {
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^ (x >> 33)
}

fn lattice(seed: u64, i: i64, j: i64, k: i64) -> f64 {
    let h = hash(
        seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
            ^ (j as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
            ^ (k as u64).wrapping_mul(0x1656_67b1_9e37_79f9),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn fade(t: f64) -> f64 {
    t * t * t * (t * (t * 6.0 - 15.0) + 10.0)
}

/// Smooth value noise in `[0, 1]`.
pub fn value_noise(seed: u64, p: [f64; 3]) -> f64 {
    let f = p.map(f64::floor);
    let i = f.map(|v| v as i64);
    let t = [0, 1, 2].map(|a| fade(p[a] - f[a]));
    let mut acc = 0.0;
    for c in 0..8 {
        let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
        let w = [dx, dy, dz]
            .iter()
            .zip(t)
            .map(|(&d, t)| if d == 1 { t } else { 1.0 - t })
            .product::<f64>();
        acc += w * lattice(seed, i[0] + dx as i64, i[1] + dy as i64, i[2] + dz as i64);
    }
    acc
}

/// Multi-octave value noise, normalised to `[0, 1]`.
pub fn fbm(seed: u64, p: [f64; 3], cfg: &TextureConfig) -> f64 {
    let (mut sum, mut norm, mut amp, mut freq) = (0.0, 0.0, 1.0, cfg.base_frequency);
    for o in 0..cfg.octaves {
        sum += amp * value_noise(hash(seed.wrapping_add(u64::from(o))), p.map(|v| v * freq));
        norm += amp;
        amp *= cfg.persistence;
        freq *= 2.0;
    }
    sum / norm
}

fn surface_color(seed: u64, p: [f64; 3], cfg: &TextureConfig) -> [f64; 3] {
    let tint = [0, 1, 2].map(|c| 0.35 + 0.3 * lattice(seed, c, 17, 5));
    [0, 1, 2].map(|c| {
        let n = fbm(hash(seed ^ (c as u64 + 1) * 0x51_7cc1), p, cfg);
        (tint[c as usize] + cfg.contrast * (n - 0.5)).clamp(0.0, 1.0)
    })
}

/// Ray/box intersection distance (slab method), `None` on a miss.
fn hit_box(b: &AaBox, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        if d[a].abs() < 1e-15 {
            if o[a] < b.min[a] || o[a] > b.max[a] {
                return None;
            }
            continue;
        }
        let (mut lo, mut hi) = ((b.min[a] - o[a]) / d[a], (b.max[a] - o[a]) / d[a]);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    (t0 <= t1 && t0 > 1e-9).then_some(t0)
}

impl Scene {
    /// Nearest hit along a world ray: distance and surface seed.
    pub fn cast(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, u64)> {
        let mut best = None;
        if d[1].abs() > 1e-15 {
            let t = (self.ground_y - o[1]) / d[1];
            if t > 1e-9 {
                best = Some((t, self.ground_seed));
            }
        }
        for b in &self.boxes {
            if let Some(t) = hit_box(b, o, d) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, b.seed));
                }
            }
        }
        best
    }

    fn shade(&self, cam: &Se3, ray_cam: [f64; 3]) -> ([f64; 3], Option<f64>) {
        let d = crate::pose::mat_vec(&cam.rotation, ray_cam);
        match self.cast(cam.translation, d) {
            Some((t, seed)) => {
                let p = [0, 1, 2].map(|a| cam.translation[a] + t * d[a]);
                // ray_cam has unit z, so t is the camera-frame depth
                (surface_color(seed, p, &self.texture), Some(t))
            }
            None => (self.background, None),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Rendered {
    /// `[3,H,W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[1,H,W]` camera-frame depth.
    pub depth: Tensor,
}

/// Renders `scene` from `camera` (camera-to-world). Colour is the mean of
/// `supersample^2` sub-pixel rays; depth is the pixel-centre ray.
pub fn render(
    scene: &Scene,
    camera: &Se3,
    k: &Intrinsics,
    size: (usize, usize),
    supersample: usize,
) -> Result<Rendered> {
    k.validate()?;
    let (h, w) = size;
    if h == 0 || w == 0 || supersample == 0 {
        return Err(Error::invalid(format!(
            "invalid render size {h}x{w}, supersample {supersample}"
        )));
    }
    let mut buf = vec![0.0; h * w * 4];
    let s = supersample;
    for_each_chunk(&mut buf, w * 4, |v, row| {
        for u in 0..w {
            let mut rgb = [0.0; 3];
            for sy in 0..s {
                for sx in 0..s {
                    let du = (sx as f64 + 0.5) / s as f64 - 0.5;
                    let dv = (sy as f64 + 0.5) / s as f64 - 0.5;
                    let (c, _) = scene.shade(camera, k.ray(u as f64 + du, v as f64 + dv));
                    for (a, c) in rgb.iter_mut().zip(c) {
                        *a += c;
                    }
                }
            }
            let (_, depth) = scene.shade(camera, k.ray(u as f64, v as f64));
            let px = &mut row[u * 4..u * 4 + 4];
            for c in 0..3 {
                px[c] = rgb[c] / (s * s) as f64;
            }
            px[3] = depth.unwrap_or(scene.far);
        }
    });
    let mut image = vec![0.0; 3 * h * w];
    let mut depth = vec![0.0; h * w];
    for (i, px) in buf.chunks(4).enumerate() {
        for c in 0..3 {
            image[c * h * w + i] = px[c];
        }
        depth[i] = px[3];
    }
    Ok(Rendered {
        image: Tensor::new(&[3, h, w], image)?,
        depth: Tensor::new(&[1, h, w], depth)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneConfig {
    pub camera_height: f64,
    /// Downward pitch of every camera, radians.
    pub pitch: f64,
    /// Horizontal focal length as a multiple of the image width.
    pub focal_ratio: f64,
    pub min_boxes: usize,
    pub max_boxes: usize,
    /// Half-extent range of box footprints, as fractions of the camera height.
    pub box_half_size: (f64, f64),
    /// Box height range, as fractions of the camera height.
    pub box_height: (f64, f64),
    pub supersample: usize,
    /// Boxes reuse the ground's noise field instead of drawing their own.
    /// Colour then only jumps at occlusion edges, not at every silhouette.
    pub shared_texture: bool,
    pub texture: TextureConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            camera_height: 1.5,
            pitch: 1.0,
            focal_ratio: 0.9,
            min_boxes: 1,
            max_boxes: 2,
            box_half_size: (0.05, 0.12),
            box_height: (0.05, 0.15),
            supersample: 4,
            shared_texture: true,
            texture: TextureConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetConfig {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Nominal camera travel per frame, scene units.
    pub motion: f64,
    pub range: DepthRange,
    pub scene: SceneConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            count: 10,
            height: 96,
            width: 96,
            motion: 0.3,
            range: DepthRange::default(),
            scene: SceneConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid("dataset needs at least one triplet"));
        }
        if self.height < 2 || self.width < 2 {
            return Err(Error::invalid(format!(
                "image size {}x{} too small",
                self.height, self.width
            )));
        }
        if !(self.motion >= 0.0 && self.motion.is_finite()) {
            return Err(Error::invalid(format!(
                "invalid motion magnitude {}",
                self.motion
            )));
        }
        let s = &self.scene;
        if !(s.camera_height > 0.0
            && s.focal_ratio > 0.0
            && s.pitch > 0.0
            && s.pitch < std::f64::consts::FRAC_PI_2 + 1e-12)
            || s.min_boxes > s.max_boxes
            || !(0.0 < s.box_half_size.0 && s.box_half_size.0 <= s.box_half_size.1)
            || !(0.0 < s.box_height.0 && s.box_height.0 <= s.box_height.1 && s.box_height.1 < 1.0)
            || s.supersample == 0
            || s.texture.octaves == 0
        {
            return Err(Error::invalid(format!("invalid scene config {s:?}")));
        }
        self.range.validate()
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let f = self.scene.focal_ratio * self.width as f64;
        Intrinsics {
            fx: f,
            fy: f,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
        }
    }
}

/// Target frame with its two neighbours. `pose_fwd` maps target camera
/// coordinates into the `t+1` camera, `pose_bwd` into the `t-1` camera.
#[derive(Clone, Debug)]
pub struct Triplet {
    pub target: Tensor,
    pub src_fwd: Tensor,
    pub src_bwd: Tensor,
    pub depth: Tensor,
    pub pose_fwd: Se3,
    pub pose_bwd: Se3,
    pub intrinsics: Intrinsics,
}

/// Camera-to-world pose with heading `yaw` about the vertical axis.
pub fn camera_pose(position: [f64; 3], yaw: f64, pitch: f64) -> Se3 {
    let r = crate::pose::mat_mul(&so3_exp([0.0, -yaw, 0.0]), &so3_exp([-pitch, 0.0, 0.0]));
    Se3 {
        rotation: r,
        translation: position,
    }
}

fn random_scene(rng: &mut ChaCha8Rng, cfg: &DatasetConfig, cam: &Se3, k: &Intrinsics) -> Scene {
    let h = cfg.scene.camera_height;
    let mut scene = Scene {
        ground_y: h,
        ground_seed: rng.gen(),
        boxes: Vec::new(),
        texture: cfg.scene.texture,
        background: [0.5; 3],
        far: cfg.range.d_max,
    };
    let n = rng.gen_range(cfg.scene.min_boxes..=cfg.scene.max_boxes);
    for _ in 0..n {
        let u = rng.gen_range(0.15..0.85) * cfg.width as f64;
        let v = rng.gen_range(0.25..0.85) * cfg.height as f64;
        let d = crate::pose::mat_vec(&cam.rotation, k.ray(u, v));
        let Some((t, _)) = scene.cast(cam.translation, d) else {
            continue;
        };
        let foot = [0, 1, 2].map(|a| cam.translation[a] + t * d[a]);
        let (s0, s1) = cfg.scene.box_half_size;
        let (h0, h1) = cfg.scene.box_height;
        let half = [rng.gen_range(s0..=s1) * h, 0.0, rng.gen_range(s0..=s1) * h];
        let height = rng.gen_range(h0..=h1) * h;
        let seed = rng.gen();
        scene.boxes.push(AaBox {
            min: [foot[0] - half[0], h - height, foot[2] - half[2]],
            max: [foot[0] + half[0], h, foot[2] + half[2]],
            seed: if cfg.scene.shared_texture {
                scene.ground_seed
            } else {
                seed
            },
        });
    }
    scene
}

/// One triplet from an explicit RNG stream.
pub fn make_triplet(cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> Result<Triplet> {
    let k = cfg.intrinsics();
    let m = cfg.motion;
    let yaw0: f64 = rng.gen_range(-0.5..0.5);
    let step = m * rng.gen_range(0.8..1.2);
    let lateral = m * rng.gen_range(-0.2..0.2);
    let yaw_rate = m * rng.gen_range(-0.1..0.1);
    let cams: Vec<Se3> = [-1.0, 0.0, 1.0]
        .iter()
        .map(|&i: &f64| {
            let fwd = [yaw0.sin(), 0.0, yaw0.cos()];
            let side = [yaw0.cos(), 0.0, -yaw0.sin()];
            let p = [0, 1, 2].map(|a| i * (step * fwd[a] + lateral * side[a]));
            camera_pose(p, yaw0 + i * yaw_rate, cfg.scene.pitch)
        })
        .collect();
    let scene = random_scene(rng, cfg, &cams[1], &k);
    let size = (cfg.height, cfg.width);
    let ss = cfg.scene.supersample;
    let bwd = render(&scene, &cams[0], &k, size, ss)?;
    let tgt = render(&scene, &cams[1], &k, size, ss)?;
    let fwd = render(&scene, &cams[2], &k, size, ss)?;
    let relative = |src: &Se3| {
        if *src == cams[1] {
            Se3::identity()
        } else {
            src.inverse().compose(&cams[1])
        }
    };
    Ok(Triplet {
        target: tgt.image,
        src_fwd: fwd.image,
        src_bwd: bwd.image,
        depth: tgt.depth,
        pose_fwd: relative(&cams[2]),
        pose_bwd: relative(&cams[0]),
        intrinsics: k,
    })
}

/// Triplet `i` uses RNG stream `i` of `seed`, so any prefix of a dataset is
/// reproducible on its own.
pub fn make_dataset(cfg: &DatasetConfig) -> Result<Vec<Triplet>> {
    cfg.validate()?;
    (0..cfg.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            make_triplet(cfg, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(ground: f64) -> Scene {
        Scene {
            ground_y: ground,
            ground_seed: 1,
            boxes: vec![],
            texture: TextureConfig::default(),
            background: [0.5; 3],
            far: 100.0,
        }
    }

    fn looking_down() -> Se3 {
        camera_pose([0.0; 3], 0.0, std::f64::consts::FRAC_PI_2)
    }

    #[test]
    fn looking_straight_down_gives_constant_depth() {
        let k = Intrinsics::new(8.0, 8.0, 3.5, 3.5).unwrap();
        let r = render(&flat(5.0), &looking_down(), &k, (8, 8), 1).unwrap();
        assert!(r.depth.data().iter().all(|d| (d - 5.0).abs() < 1e-12));
    }

    #[test]
    fn box_top_occludes_ground() {
        let k = Intrinsics::new(10.0, 10.0, 7.5, 7.5).unwrap();
        let mut scene = flat(10.0);
        scene.boxes.push(AaBox {
            min: [-1.0, 4.0, -1.0],
            max: [1.0, 10.0, 1.0],
            seed: 3,
        });
        let r = render(&scene, &looking_down(), &k, (16, 16), 1).unwrap();
        let cam = looking_down();
        for v in 0..16 {
            for u in 0..16 {
                // the top face spans world x, z in [-1, 1] at depth 4
                let d = crate::pose::mat_vec(&cam.rotation, k.ray(u as f64, v as f64));
                let at4 = [d[0] * 4.0, d[2] * 4.0];
                let inside = at4.iter().all(|c| c.abs() <= 1.0);
                let expected = if inside { 4.0 } else { 10.0 };
                let got = r.depth.at(&[0, v, u]);
                assert!(
                    (got - expected).abs() < 1e-12,
                    "({u},{v}) {got} vs {expected}"
                );
            }
        }
    }

    #[test]
    fn render_is_deterministic() {
        let cfg = DatasetConfig {
            count: 2,
            height: 16,
            width: 16,
            ..DatasetConfig::default()
        };
        let a = make_dataset(&cfg).unwrap();
        let b = make_dataset(&cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.target.data(), y.target.data());
            assert_eq!(x.depth.data(), y.depth.data());
        }
    }

    #[test]
    fn zero_motion_gives_identical_frames() {
        let cfg = DatasetConfig {
            count: 1,
            height: 16,
            width: 16,
            motion: 0.0,
            ..DatasetConfig::default()
        };
        let t = &make_dataset(&cfg).unwrap()[0];
        assert_eq!(t.target.data(), t.src_fwd.data());
        assert_eq!(t.target.data(), t.src_bwd.data());
        assert_eq!(t.pose_fwd, Se3::identity());
        assert_eq!(t.pose_bwd, Se3::identity());
    }

    #[test]
    fn depth_positive_and_in_range_images_in_unit_interval() {
        let cfg = DatasetConfig {
            count: 4,
            height: 32,
            width: 32,
            ..DatasetConfig::default()
        };
        for t in make_dataset(&cfg).unwrap() {
            assert!(t
                .depth
                .data()
                .iter()
                .all(|&d| d > cfg.range.d_min && d < cfg.range.d_max));
            for img in [&t.target, &t.src_fwd, &t.src_bwd] {
                assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
            assert!(t.pose_fwd.orthonormality_error() < 1e-9);
        }
    }

    #[test]
    fn noise_is_bounded_and_continuous() {
        let cfg = TextureConfig::default();
        for i in 0..200 {
            let p = [i as f64 * 0.37, 0.1, -(i as f64) * 0.11];
            let a = fbm(9, p, &cfg);
            let b = fbm(9, [p[0] + 1e-7, p[1], p[2]], &cfg);
            assert!((0.0..=1.0).contains(&a));
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let cfg = DatasetConfig {
            count: 0,
            ..DatasetConfig::default()
        };
        assert!(make_dataset(&cfg).is_err());
    }
}
