use crate::error::{Error, Result};
use crate::tensor::tape::{Backward, BackwardCtx, OpKind};
use crate::tensor::{broadcast_shape, strides, Tensor, Var};

/// `c[m,p] += a[m,k] * b[k,p]` on row-major blocks.
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let crow = &mut c[i * p..][..p];
        for (kk, &aik) in a[i * k..][..k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * p..][..p];
            crow.iter_mut().zip(brow).for_each(|(c, &b)| *c += aik * b);
        }
    }
}

/// `c[m,k] += g[m,p] * b[k,p]^T`
fn gemm_acc_bt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let grow = &g[i * p..][..p];
        for kk in 0..k {
            let brow = &b[kk * p..][..p];
            c[i * k + kk] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[k,p] += a[m,k]^T * g[m,p]`
fn gemm_acc_at(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let grow = &g[i * p..][..p];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            c[kk * p..][..p]
                .iter_mut()
                .zip(grow)
                .for_each(|(c, &g)| *c += aik * g);
        }
    }
}

/// Batch index into an operand whose batch shape broadcasts to `out`.
fn batch_index(out: &[usize], operand: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    let offset = out.len() - operand.len();
    let os = strides(out);
    let is = strides(operand);
    (0..n)
        .map(|flat| {
            let mut idx = 0;
            for (j, &d) in operand.iter().enumerate() {
                let coord = (flat / os[offset + j]) % out[offset + j];
                if d != 1 {
                    idx += coord * is[j];
                }
            }
            idx
        })
        .collect()
}

struct MatMul {
    m: usize,
    k: usize,
    p: usize,
    ia: Vec<usize>,
    ib: Vec<usize>,
}

impl Backward for MatMul {
    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (ctx.parents[0].data(), ctx.parents[1].data());
        let (m, k, p) = (self.m, self.k, self.p);
        let mut ga = ctx.needs[0].then(|| vec![0.0; a.len()]);
        let mut gb = ctx.needs[1].then(|| vec![0.0; b.len()]);
        for (batch, (&ja, &jb)) in self.ia.iter().zip(&self.ib).enumerate() {
            let gblk = &g[batch * m * p..][..m * p];
            if let Some(ga) = ga.as_mut() {
                gemm_acc_bt(
                    gblk,
                    &b[jb * k * p..][..k * p],
                    &mut ga[ja * m * k..][..m * k],
                    m,
                    k,
                    p,
                );
            }
            if let Some(gb) = gb.as_mut() {
                gemm_acc_at(
                    &a[ja * m * k..][..m * k],
                    gblk,
                    &mut gb[jb * k * p..][..k * p],
                    m,
                    k,
                    p,
                );
            }
        }
        vec![ga, gb]
    }
}

impl<'t> Var<'t> {
    /// Batched matrix product over the last two axes; leading axes broadcast.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", "operands need rank >= 2"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{sa:?} x {sb:?}: inner dims differ"),
            ));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb)
            .ok_or_else(|| Error::shape("matmul", format!("batch dims {ba:?} vs {bb:?}")))?;
        let ia = batch_index(&batch, ba);
        let ib = batch_index(&batch, bb);
        let nb = ia.len();
        let mut out = vec![0.0; nb * m * p];
        for (bi, (&ja, &jb)) in ia.iter().zip(&ib).enumerate() {
            gemm_acc(
                &a.data()[ja * m * k..][..m * k],
                &b.data()[jb * k * p..][..k * p],
                &mut out[bi * m * p..][..m * p],
                m,
                k,
                p,
            );
        }
        let mut shape = batch;
        shape.extend([m, p]);
        let out = Tensor::from_parts(shape, out);
        Ok(self.tape.push(
            OpKind::MatMul,
            out,
            &[self, other],
            MatMul { m, k, p, ia, ib },
        ))
    }
}
