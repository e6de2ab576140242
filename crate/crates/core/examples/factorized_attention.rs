//! Factorized attention against the direct formula, and its cost as the
//! token count grows.
//!
//! cargo run --release --example factorized_attention

use std::time::Instant;

use monovit::encoder::factorized_attention;
use monovit::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// softmax over tokens of K, then Q/sqrt(d) (K^T V), one head.
fn direct(q: &[f64], k: &[f64], v: &[f64], l: usize, c: usize, d: usize) -> Vec<f64> {
    let mut ks = vec![0.0; l * c];
    for j in 0..c {
        let m = (0..l)
            .map(|i| k[i * c + j])
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..l).map(|i| (k[i * c + j] - m).exp()).sum();
        for i in 0..l {
            ks[i * c + j] = (k[i * c + j] - m).exp() / z;
        }
    }
    let mut ctx = vec![0.0; c * c];
    for a in 0..c {
        for b in 0..c {
            ctx[a * c + b] = (0..l).map(|i| ks[i * c + a] * v[i * c + b]).sum();
        }
    }
    let s = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; l * c];
    for i in 0..l {
        for b in 0..c {
            out[i * c + b] = s * (0..c).map(|a| q[i * c + a] * ctx[a * c + b]).sum::<f64>();
        }
    }
    out
}

fn main() -> monovit::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c = 16;
    for l in [64, 256, 1024, 4096] {
        let shape = [1, 1, l, c];
        let [q, k, v] = [0; 3].map(|_| Tensor::uniform(&shape, -1.0, 1.0, &mut rng));
        let tape = Tape::new();
        let start = Instant::now();
        let out = factorized_attention(
            tape.constant(q.clone()),
            tape.constant(k.clone()),
            tape.constant(v.clone()),
            c,
        )?;
        let t = start.elapsed().as_secs_f64() * 1e3;
        let want = direct(q.data(), k.data(), v.data(), l, c, c);
        let err = out
            .value()
            .data()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        println!("L = {l:5}: {t:7.2} ms, max |diff| vs direct {err:.1e}");
    }
    Ok(())
}
