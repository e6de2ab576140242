//! Image and dataset files: binary PPM/PGM, little-endian PFM, pose text
//! files and the `key=value` dataset manifest.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::{DepthRange, Intrinsics};
use crate::pose::{Pose6DoF, Se3};
use crate::synth::{DatasetConfig, Triplet};
use crate::tensor::Tensor;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Splits a PNM-style header into `count` whitespace-separated tokens,
/// skipping `#` comments. Returns the tokens and the offset of the byte
/// following the single whitespace after the last token.
fn header_tokens(bytes: &[u8], count: usize, path: &Path) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format(path, "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return Err(Error::format(path, "missing pixel data"));
    }
    Ok((tokens, i + 1))
}

fn parse_dim(tok: &str, path: &Path) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::format(path, format!("bad dimension {tok:?}"))),
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[3,H,W]` image in `[0,1]` as 8-bit binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let [3, h, w] = image.shape()[..] else {
        return Err(Error::shape(
            "write_ppm",
            format!("expected [3,H,W], got {:?}", image.shape()),
        ));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..h * w {
        for c in 0..3 {
            out.push(to_byte(d[c * h * w + i]));
        }
    }
    write(path, &out)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = read(path)?;
    let (tok, off) = header_tokens(&bytes, 4, path)?;
    if tok[0] != "P6" || tok[3] != "255" {
        return Err(Error::format(path, "expected 8-bit P6"));
    }
    let (w, h) = (parse_dim(&tok[1], path)?, parse_dim(&tok[2], path)?);
    let px = &bytes[off..];
    if px.len() != 3 * h * w {
        return Err(Error::format(
            path,
            format!("expected {} bytes of pixels, got {}", 3 * h * w, px.len()),
        ));
    }
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            data[c * h * w + i] = f64::from(px[3 * i + c]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

fn map_hw(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape()[..] {
        [h, w] | [1, h, w] | [1, 1, h, w] => Ok((h, w)),
        _ => Err(Error::shape(
            op,
            format!("expected a single-channel map, got {:?}", t.shape()),
        )),
    }
}

/// Writes a single-channel map as grayscale PFM (bottom row first).
pub fn write_pfm(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w) = map_hw("write_pfm", map)?;
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for row in map.data().chunks(w).rev() {
        for &v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write(path, &out)
}

/// Reads a grayscale PFM into `[1,H,W]`, top row first.
pub fn read_pfm(path: &Path) -> Result<Tensor> {
    let bytes = read(path)?;
    let (tok, off) = header_tokens(&bytes, 4, path)?;
    if tok[0] != "Pf" {
        return Err(Error::format(path, "expected grayscale PFM"));
    }
    let (w, h) = (parse_dim(&tok[1], path)?, parse_dim(&tok[2], path)?);
    let scale: f64 = tok[3]
        .parse()
        .map_err(|_| Error::format(path, "bad scale"))?;
    if scale == 0.0 {
        return Err(Error::format(path, "zero scale"));
    }
    let px = &bytes[off..];
    if px.len() != 4 * h * w {
        return Err(Error::format(
            path,
            format!("expected {} bytes of samples, got {}", 4 * h * w, px.len()),
        ));
    }
    let decode = |b: &[u8]| {
        let a = [b[0], b[1], b[2], b[3]];
        f64::from(if scale < 0.0 {
            f32::from_le_bytes(a)
        } else {
            f32::from_be_bytes(a)
        })
    };
    let mut data = Vec::with_capacity(h * w);
    for row in px.chunks(4 * w).rev() {
        data.extend(row.chunks(4).map(decode));
    }
    Tensor::new(&[1, h, w], data)
}

/// Min-max normalised 8-bit PGM of a single-channel map.
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w) = map_hw("write_pgm", map)?;
    let d = map.data();
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(d.iter().map(|v| to_byte((v - lo) / span)));
    write(path, &out)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = read(path)?;
    let (tok, off) = header_tokens(&bytes, 4, path)?;
    if tok[0] != "P5" || tok[3] != "255" {
        return Err(Error::format(path, "expected 8-bit P5"));
    }
    let (w, h) = (parse_dim(&tok[1], path)?, parse_dim(&tok[2], path)?);
    let px = &bytes[off..];
    if px.len() != h * w {
        return Err(Error::format(path, "pixel count does not match header"));
    }
    Tensor::new(
        &[1, h, w],
        px.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )
}

fn pose_line(p: &Se3) -> String {
    let v: Vec<String> = p.log().to_array().iter().map(|x| x.to_string()).collect();
    v.join(" ")
}

/// Two rows of six numbers: forward then backward pose.
pub fn write_poses(path: &Path, fwd: &Se3, bwd: &Se3) -> Result<()> {
    write(
        path,
        format!("{}\n{}\n", pose_line(fwd), pose_line(bwd)).as_bytes(),
    )
}

pub fn read_poses(path: &Path) -> Result<(Se3, Se3)> {
    let text = String::from_utf8(read(path)?).map_err(|_| Error::format(path, "not UTF-8"))?;
    let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if rows.len() != 2 {
        return Err(Error::format(
            path,
            format!("expected 2 pose rows, got {}", rows.len()),
        ));
    }
    let parse = |row: &str| -> Result<Se3> {
        let vals: Vec<f64> = row
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::format(path, format!("bad number {t:?}")))
            })
            .collect::<Result<_>>()?;
        let p = Pose6DoF::from_slice(&vals).map_err(|e| Error::format(path, e.to_string()))?;
        Se3::exp(&p).map_err(|e| Error::format(path, e.to_string()))
    };
    Ok((parse(rows[0])?, parse(rows[1])?))
}

pub const MANIFEST: &str = "manifest.txt";
const MANIFEST_FORMAT: &str = "monovit-synth-1";

/// Files of one triplet, relative to the dataset directory.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletFiles {
    pub target: String,
    pub src_fwd: String,
    pub src_bwd: String,
    pub depth: String,
    pub poses: String,
}

impl TripletFiles {
    pub fn numbered(i: usize) -> Self {
        TripletFiles {
            target: format!("{i:03}_target.ppm"),
            src_fwd: format!("{i:03}_src_fwd.ppm"),
            src_bwd: format!("{i:03}_src_bwd.ppm"),
            depth: format!("{i:03}_depth.pfm"),
            poses: format!("{i:03}_pose.txt"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub motion: f64,
    pub intrinsics: Intrinsics,
    pub range: DepthRange,
    pub triplets: Vec<TripletFiles>,
}

impl Manifest {
    pub fn for_config(cfg: &DatasetConfig) -> Self {
        Manifest {
            seed: cfg.seed,
            height: cfg.height,
            width: cfg.width,
            motion: cfg.motion,
            intrinsics: cfg.intrinsics(),
            range: cfg.range,
            triplets: (0..cfg.count).map(TripletFiles::numbered).collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let k = &self.intrinsics;
        let mut s = format!(
            "format={MANIFEST_FORMAT}\nseed={}\ncount={}\nheight={}\nwidth={}\nmotion={}\n\
             fx={}\nfy={}\ncx={}\ncy={}\nd_min={}\nd_max={}\n",
            self.seed,
            self.triplets.len(),
            self.height,
            self.width,
            self.motion,
            k.fx,
            k.fy,
            k.cx,
            k.cy,
            self.range.d_min,
            self.range.d_max
        );
        for t in &self.triplets {
            s += &format!(
                "triplet={} {} {} {} {}\n",
                t.target, t.src_fwd, t.src_bwd, t.depth, t.poses
            );
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |d: String| Error::format(path, d);
        let mut kv = std::collections::HashMap::new();
        let mut triplets = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key=value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "triplet" {
                let f: Vec<&str> = v.split_whitespace().collect();
                let [a, b, c, d, e] = f[..] else {
                    return Err(bad(format!("line {}: triplet needs 5 files", n + 1)));
                };
                triplets.push(TripletFiles {
                    target: a.into(),
                    src_fwd: b.into(),
                    src_bwd: c.into(),
                    depth: d.into(),
                    poses: e.into(),
                });
            } else if kv.insert(k.to_string(), v.to_string()).is_some() {
                return Err(bad(format!("duplicate key {k}")));
            }
        }
        const KEYS: [&str; 12] = [
            "format", "seed", "count", "height", "width", "motion", "fx", "fy", "cx", "cy",
            "d_min", "d_max",
        ];
        if let Some(k) = kv.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(bad(format!("unknown key {k}")));
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| bad(format!("missing key {k}")));
        if get("format")? != MANIFEST_FORMAT {
            return Err(bad(format!("unsupported format {}", get("format")?)));
        }
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| bad(format!("bad value for {k}")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| bad(format!("bad value for {k}")))
        };
        let count = int("count")?;
        if count != triplets.len() || count == 0 {
            return Err(bad(format!(
                "count={count} but {} triplet records",
                triplets.len()
            )));
        }
        let intrinsics = Intrinsics::new(num("fx")?, num("fy")?, num("cx")?, num("cy")?)
            .map_err(|e| bad(e.to_string()))?;
        let range =
            DepthRange::new(num("d_min")?, num("d_max")?).map_err(|e| bad(e.to_string()))?;
        Ok(Manifest {
            seed: get("seed")?
                .parse()
                .map_err(|_| bad("bad value for seed".into()))?,
            height: int("height")?,
            width: int("width")?,
            motion: num("motion")?,
            intrinsics,
            range,
            triplets,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub triplets: Vec<Triplet>,
}

/// Writes `triplets` and a manifest into `dir` (created if missing).
pub fn save_dataset(dir: &Path, cfg: &DatasetConfig, triplets: &[Triplet]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        triplets: (0..triplets.len()).map(TripletFiles::numbered).collect(),
        ..Manifest::for_config(cfg)
    };
    for (t, f) in triplets.iter().zip(&manifest.triplets) {
        write_ppm(&dir.join(&f.target), &t.target)?;
        write_ppm(&dir.join(&f.src_fwd), &t.src_fwd)?;
        write_ppm(&dir.join(&f.src_bwd), &t.src_bwd)?;
        write_pfm(&dir.join(&f.depth), &t.depth)?;
        write_poses(&dir.join(&f.poses), &t.pose_fwd, &t.pose_bwd)?;
    }
    write(&dir.join(MANIFEST), manifest.to_text().as_bytes())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = String::from_utf8(read(&path)?).map_err(|_| Error::format(&path, "not UTF-8"))?;
    Manifest::parse(&text, &path)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let (h, w) = (manifest.height, manifest.width);
    let mut triplets = Vec::with_capacity(manifest.triplets.len());
    for f in &manifest.triplets {
        let img = |name: &str| -> Result<Tensor> {
            let p = dir.join(name);
            let t = read_ppm(&p)?;
            if t.shape() != [3, h, w] {
                return Err(Error::format(
                    &p,
                    format!("size {:?} disagrees with manifest {h}x{w}", t.shape()),
                ));
            }
            Ok(t)
        };
        let dp = dir.join(&f.depth);
        let depth = read_pfm(&dp)?;
        if depth.shape() != [1, h, w] {
            return Err(Error::format(&dp, "depth size disagrees with manifest"));
        }
        let (pose_fwd, pose_bwd) = read_poses(&dir.join(&f.poses))?;
        triplets.push(Triplet {
            target: img(&f.target)?,
            src_fwd: img(&f.src_fwd)?,
            src_bwd: img(&f.src_bwd)?,
            depth,
            pose_fwd,
            pose_bwd,
            intrinsics: manifest.intrinsics,
        });
    }
    Ok(Dataset {
        root: dir.to_path_buf(),
        manifest,
        triplets,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::synth::make_dataset;

    #[test]
    fn ppm_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let data: Vec<f64> = (0..3 * 4 * 5)
            .map(|i| f64::from((i * 37 % 256) as u8) / 255.0)
            .collect();
        let t = Tensor::new(&[3, 4, 5], data).unwrap();
        write_ppm(&p, &t).unwrap();
        assert_eq!(read_ppm(&p).unwrap().data(), t.data());
    }

    #[test]
    fn pfm_round_trip_and_orientation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::uniform(&[1, 3, 4], 0.1, 10.0, &mut rng);
        write_pfm(&p, &t).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"Pf\n4 3\n-1.0\n"));
        // first stored sample is the bottom-left pixel
        let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        assert_eq!(first, t.at(&[0, 2, 0]) as f32);
        let back = read_pfm(&p).unwrap();
        assert!(back.max_abs_diff(&t) < 1e-5);
    }

    #[test]
    fn truncated_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ppm");
        std::fs::write(&p, b"P6\n4 4\n255\n\x00\x01").unwrap();
        assert!(matches!(read_ppm(&p), Err(Error::Format { .. })));
        assert!(matches!(
            read_ppm(&dir.path().join("missing.ppm")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn manifest_rejects_unknown_keys() {
        let cfg = DatasetConfig {
            count: 1,
            ..DatasetConfig::default()
        };
        let text = Manifest::for_config(&cfg).to_text();
        let p = Path::new("manifest.txt");
        assert_eq!(
            Manifest::parse(&text, p).unwrap(),
            Manifest::for_config(&cfg)
        );
        assert!(Manifest::parse(&(text + "colour=blue\n"), p).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            count: 2,
            height: 16,
            width: 16,
            ..DatasetConfig::default()
        };
        let ts = make_dataset(&cfg).unwrap();
        save_dataset(dir.path(), &cfg, &ts).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.triplets.len(), 2);
        for (a, b) in ts.iter().zip(&ds.triplets) {
            assert!(a.target.max_abs_diff(&b.target) <= 0.5 / 255.0 + 1e-12);
            assert!(a.depth.max_abs_diff(&b.depth) < 1e-5);
            for (x, y) in a
                .pose_fwd
                .rotation
                .iter()
                .flatten()
                .zip(b.pose_fwd.rotation.iter().flatten())
            {
                assert!((x - y).abs() < 1e-12);
            }
            assert_eq!(a.pose_bwd.translation, b.pose_bwd.translation);
        }
    }
}
