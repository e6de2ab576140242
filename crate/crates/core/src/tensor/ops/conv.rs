use crate::error::{Error, Result};
use crate::tensor::parallel::for_each_chunk;
use crate::tensor::tape::{Backward, BackwardCtx, OpKind};
use crate::tensor::{Tensor, Var};

/// How `pad2d` fills the border.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Mirror without repeating the edge sample (`d c b | a b c d | c b a`).
    Reflect,
    Replicate,
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Geom {
    fn co_per_group(&self) -> usize {
        self.co / self.groups
    }

    /// Output coordinates `o` whose tap `k` lands inside `[0, len)`.
    fn valid_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        // i = o*stride + k - pad must satisfy 0 <= i < len
        let lo = if k >= self.pad {
            0
        } else {
            (self.pad - k).div_ceil(self.stride)
        };
        let hi = if len + self.pad > k {
            ((len + self.pad - k - 1) / self.stride + 1).min(out_len)
        } else {
            0
        };
        if hi > lo {
            (lo, hi)
        } else {
            (0, 0)
        }
    }
}

fn conv_forward(x: &[f64], k: &[f64], bias: Option<&[f64]>, g: Geom) -> Vec<f64> {
    let plane = g.ho * g.wo;
    let mut out = vec![0.0; g.n * g.co * plane];
    for_each_chunk(&mut out, plane, |idx, dst| {
        let (n, co) = (idx / g.co, idx % g.co);
        let grp = co / g.co_per_group();
        if let Some(b) = bias {
            dst.fill(b[co]);
        }
        for ci in 0..g.ci {
            let c = grp * g.ci + ci;
            let src = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = g.valid_range(ky, g.h, g.ho);
                for kx in 0..g.kw {
                    let wv = k[((co * g.ci + ci) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = g.valid_range(kx, g.w, g.wo);
                    if ox0 == ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let row = &src[iy * g.w..][..g.w];
                        let drow = &mut dst[oy * g.wo..][..g.wo];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            drow[ox0..ox1]
                                .iter_mut()
                                .zip(&row[ix0..ix0 + (ox1 - ox0)])
                                .for_each(|(d, &s)| *d += wv * s);
                        } else {
                            for ox in ox0..ox1 {
                                drow[ox] += wv * row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

struct Conv2d {
    geom: Geom,
    has_bias: bool,
}

impl Backward for Conv2d {
    fn backward(&self, ctx: &BackwardCtx<'_>, gout: &[f64]) -> Vec<Option<Vec<f64>>> {
        let g = self.geom;
        let x = ctx.parents[0].data();
        let k = ctx.parents[1].data();
        let oplane = g.ho * g.wo;
        let iplane = g.h * g.w;
        let cog = g.co_per_group();

        let gx = ctx.needs[0].then(|| {
            let mut gx = vec![0.0; x.len()];
            for_each_chunk(&mut gx, iplane, |idx, dst| {
                let (n, c) = (idx / g.c, idx % g.c);
                let (grp, ci) = (c / g.ci, c % g.ci);
                for co in grp * cog..(grp + 1) * cog {
                    let gsrc = &gout[(n * g.co + co) * oplane..][..oplane];
                    for ky in 0..g.kh {
                        let (oy0, oy1) = g.valid_range(ky, g.h, g.ho);
                        for kx in 0..g.kw {
                            let wv = k[((co * g.ci + ci) * g.kh + ky) * g.kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let (ox0, ox1) = g.valid_range(kx, g.w, g.wo);
                            if ox0 == ox1 {
                                continue;
                            }
                            for oy in oy0..oy1 {
                                let iy = oy * g.stride + ky - g.pad;
                                let grow = &gsrc[oy * g.wo..][..g.wo];
                                let drow = &mut dst[iy * g.w..][..g.w];
                                if g.stride == 1 {
                                    let ix0 = ox0 + kx - g.pad;
                                    drow[ix0..ix0 + (ox1 - ox0)]
                                        .iter_mut()
                                        .zip(&grow[ox0..ox1])
                                        .for_each(|(d, &s)| *d += wv * s);
                                } else {
                                    for ox in ox0..ox1 {
                                        drow[ox * g.stride + kx - g.pad] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            });
            gx
        });

        let gk = ctx.needs[1].then(|| {
            let per_co = g.ci * g.kh * g.kw;
            let mut gk = vec![0.0; k.len()];
            for_each_chunk(&mut gk, per_co, |co, dst| {
                let grp = co / cog;
                for ci in 0..g.ci {
                    let c = grp * g.ci + ci;
                    for ky in 0..g.kh {
                        let (oy0, oy1) = g.valid_range(ky, g.h, g.ho);
                        for kx in 0..g.kw {
                            let (ox0, ox1) = g.valid_range(kx, g.w, g.wo);
                            if ox0 == ox1 {
                                continue;
                            }
                            let mut acc = 0.0;
                            for n in 0..g.n {
                                let src = &x[(n * g.c + c) * iplane..][..iplane];
                                let gsrc = &gout[(n * g.co + co) * oplane..][..oplane];
                                for oy in oy0..oy1 {
                                    let iy = oy * g.stride + ky - g.pad;
                                    let row = &src[iy * g.w..][..g.w];
                                    let grow = &gsrc[oy * g.wo..][..g.wo];
                                    if g.stride == 1 {
                                        let ix0 = ox0 + kx - g.pad;
                                        acc += grow[ox0..ox1]
                                            .iter()
                                            .zip(&row[ix0..ix0 + (ox1 - ox0)])
                                            .map(|(a, b)| a * b)
                                            .sum::<f64>();
                                    } else {
                                        for ox in ox0..ox1 {
                                            acc += grow[ox] * row[ox * g.stride + kx - g.pad];
                                        }
                                    }
                                }
                            }
                            dst[(ci * g.kh + ky) * g.kw + kx] = acc;
                        }
                    }
                }
            });
            gk
        });

        let mut grads = vec![gx, gk];
        if self.has_bias {
            grads.push(ctx.needs[2].then(|| {
                let mut gb = vec![0.0; g.co];
                for n in 0..g.n {
                    for (co, b) in gb.iter_mut().enumerate() {
                        *b += gout[(n * g.co + co) * oplane..][..oplane]
                            .iter()
                            .sum::<f64>();
                    }
                }
                gb
            }));
        }
        grads
    }
}

struct AvgPool {
    k: usize,
    dims: (usize, usize, usize, usize),
}

impl Backward for AvgPool {
    fn backward(&self, _ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (nc, h, w, k) = (self.dims.0, self.dims.1, self.dims.2, self.k);
        let (ho, wo) = (h - k + 1, w - k + 1);
        let scale = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; nc * h * w];
        for p in 0..nc {
            let gsrc = &g[p * ho * wo..][..ho * wo];
            let dst = &mut out[p * h * w..][..h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let v = gsrc[oy * wo + ox] * scale;
                    for dy in 0..k {
                        for d in &mut dst[(oy + dy) * w + ox..][..k] {
                            *d += v;
                        }
                    }
                }
            }
        }
        vec![Some(out)]
    }
}

struct Pad {
    /// Source flat index per output element, `usize::MAX` for zero fill.
    src: Vec<usize>,
    in_len: usize,
}

impl Backward for Pad {
    fn backward(&self, _ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut out = vec![0.0; self.in_len];
        for (&s, &gk) in self.src.iter().zip(g) {
            if s != usize::MAX {
                out[s] += gk;
            }
        }
        vec![Some(out)]
    }
}

fn nchw(v: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *v.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::shape(op, format!("expected [N,C,H,W], got {s:?}"))),
    }
}

impl<'t> Var<'t> {
    /// 2-D cross-correlation with zero padding. `kernel` is
    /// `[Co, C/groups, kh, kw]`, `bias` is `[Co]`.
    pub fn conv2d(
        self,
        kernel: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var<'t>> {
        let xv = self.value();
        let kv = kernel.value();
        let (n, c, h, w) = nchw(&xv, "conv2d")?;
        let [co, ci, kh, kw] = *kv.shape() else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel shape {:?}", kv.shape()),
            ));
        };
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        if groups == 0 || ci * groups != c || co % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {c}, kernel in-channels {ci}, out {co}, groups {groups}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid(format!(
                "conv2d kernel {kh}x{kw} must be odd"
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape("conv2d", "kernel larger than padded input"));
        }
        let bv = bias.map(|b| b.value());
        if let Some(b) = &bv {
            if b.shape() != [co] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} != [{co}]", b.shape()),
                ));
            }
        }
        let geom = Geom {
            n,
            c,
            h,
            w,
            co,
            ci,
            kh,
            kw,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
            stride,
            pad: padding,
            groups,
        };
        let data = conv_forward(xv.data(), kv.data(), bv.as_deref().map(Tensor::data), geom);
        let out = Tensor::from_parts(vec![n, co, geom.ho, geom.wo], data);
        let mut parents = vec![self, kernel];
        parents.extend(bias);
        Ok(self.tape.push(
            OpKind::Conv2d,
            out,
            &parents,
            Conv2d {
                geom,
                has_bias: bias.is_some(),
            },
        ))
    }

    /// `k x k` mean filter, stride 1, no padding.
    pub fn avg_pool2d(self, k: usize) -> Result<Var<'t>> {
        let v = self.value();
        let (n, c, h, w) = nchw(&v, "avg_pool2d")?;
        if k == 0 || k > h || k > w {
            return Err(Error::invalid(format!("pool size {k} for {h}x{w} input")));
        }
        let (ho, wo) = (h - k + 1, w - k + 1);
        let scale = 1.0 / (k * k) as f64;
        let d = v.data();
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            let src = &d[p * h * w..][..h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        acc += src[(oy + dy) * w + ox..][..k].iter().sum::<f64>();
                    }
                    out[(p * ho + oy) * wo + ox] = acc * scale;
                }
            }
        }
        let out = Tensor::from_parts(vec![n, c, ho, wo], out);
        Ok(self.tape.push(
            OpKind::AvgPool2d,
            out,
            &[self],
            AvgPool {
                k,
                dims: (n * c, h, w, k),
            },
        ))
    }

    /// Pads height and width by `pad` on every side.
    pub fn pad2d(self, pad: usize, mode: PadMode) -> Result<Var<'t>> {
        let v = self.value();
        let (n, c, h, w) = nchw(&v, "pad2d")?;
        if mode == PadMode::Reflect && (pad >= h || pad >= w) {
            return Err(Error::invalid(format!(
                "reflect pad {pad} needs size > pad, got {h}x{w}"
            )));
        }
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let map = |i: isize, len: usize| -> Option<usize> {
            let l = len as isize;
            if (0..l).contains(&i) {
                return Some(i as usize);
            }
            match mode {
                PadMode::Zero => None,
                PadMode::Replicate => Some(i.clamp(0, l - 1) as usize),
                PadMode::Reflect => Some(if i < 0 { -i } else { 2 * (l - 1) - i } as usize),
            }
        };
        let mut src = Vec::with_capacity(n * c * hp * wp);
        for p in 0..n * c {
            for y in 0..hp {
                let sy = map(y as isize - pad as isize, h);
                for x in 0..wp {
                    let sx = map(x as isize - pad as isize, w);
                    src.push(match (sy, sx) {
                        (Some(sy), Some(sx)) => (p * h + sy) * w + sx,
                        _ => usize::MAX,
                    });
                }
            }
        }
        let d = v.data();
        let data = src
            .iter()
            .map(|&s| if s == usize::MAX { 0.0 } else { d[s] })
            .collect();
        let out = Tensor::from_parts(vec![n, c, hp, wp], data);
        Ok(self.tape.push(
            OpKind::Pad2d,
            out,
            &[self],
            Pad {
                src,
                in_len: v.numel(),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn one_by_one_identity() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 2, 3], (0..6).map(f64::from).collect()).unwrap());
        let k = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = x.conv2d(k, Some(b), 1, 0, 1).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn box_filter_keeps_constant_interior() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 5, 5], 5.0));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
        let y = x.conv2d(k, None, 1, 1, 1).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 5, 5]);
        for yy in 1..4 {
            for xx in 1..4 {
                assert!((y.at(&[0, 0, yy, xx]) - 5.0).abs() < 1e-12);
            }
        }
        // zero padding shows at the corner: 4 of 9 taps inside
        assert!((y.at(&[0, 0, 0, 0]) - 5.0 * 4.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn output_size_formula() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[2, 4, 9, 8]));
        let k = tape.constant(Tensor::ones(&[6, 2, 3, 3]));
        let y = x.conv2d(k, None, 2, 1, 2).unwrap();
        assert_eq!(y.shape(), vec![2, 6, 5, 4]);
    }

    #[test]
    fn rejects_bad_arguments() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 3, 4, 4]));
        let k = tape.constant(Tensor::ones(&[2, 2, 3, 3]));
        assert!(matches!(
            x.conv2d(k, None, 1, 1, 1),
            Err(Error::ShapeMismatch { .. })
        ));
        let k3 = tape.constant(Tensor::ones(&[2, 3, 3, 3]));
        assert!(matches!(
            x.conv2d(k3, None, 0, 1, 1),
            Err(Error::InvalidInput(_))
        ));
        let even = tape.constant(Tensor::ones(&[2, 3, 2, 2]));
        assert!(x.conv2d(even, None, 1, 1, 1).is_err());
    }

    #[test]
    fn padding_wider_than_plane() {
        // 7x7 taps over a 2x3 plane: most taps fall outside.
        let tape = Tape::new();
        let xs: Vec<f64> = (0..6).map(|v| v as f64 + 1.0).collect();
        let ks: Vec<f64> = (0..49).map(|v| (v as f64 * 0.37).sin()).collect();
        let x = tape.leaf(
            Tensor::new(&[1, 1, 2, 3], xs.clone())
                .unwrap()
                .with_requires_grad(true),
        );
        let k = tape.leaf(
            Tensor::new(&[1, 1, 7, 7], ks.clone())
                .unwrap()
                .with_requires_grad(true),
        );
        let y = x.conv2d(k, None, 1, 3, 1).unwrap();
        let yv = y.value();
        for oy in 0..2 {
            for ox in 0..3 {
                let mut want = 0.0;
                for iy in 0..2 {
                    for ix in 0..3 {
                        want += xs[iy * 3 + ix] * ks[(iy + 3 - oy) * 7 + (ix + 3 - ox)];
                    }
                }
                assert!((yv.at(&[0, 0, oy, ox]) - want).abs() < 1e-12);
            }
        }
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(k).unwrap().shape(), &[1, 1, 7, 7]);
        assert_eq!(g.get(k).unwrap().data()[0], 0.0);
    }

    #[test]
    fn depthwise_groups() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 2, 1, 1], vec![2.0, 3.0]).unwrap());
        let k = tape.constant(Tensor::new(&[2, 1, 1, 1], vec![10.0, 100.0]).unwrap());
        let y = x.conv2d(k, None, 1, 0, 2).unwrap();
        assert_eq!(y.value().data(), &[20.0, 300.0]);
    }

    #[test]
    fn reflect_padding() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let x = x.pad2d(0, PadMode::Reflect).unwrap();
        let x2 = tape
            .constant(Tensor::new(&[1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .pad2d(1, PadMode::Reflect)
            .unwrap();
        assert_eq!(x.shape(), vec![1, 1, 1, 4]);
        assert_eq!(x2.value().data()[..5], [5.0, 4.0, 5.0, 6.0, 5.0]);
        let z = tape
            .constant(Tensor::ones(&[1, 1, 1, 1]))
            .pad2d(1, PadMode::Zero)
            .unwrap();
        assert_eq!(z.value().sum(), 1.0);
    }

    #[test]
    fn avg_pool_of_ramp() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 3, 3], (0..9).map(f64::from).collect()).unwrap());
        let y = x.avg_pool2d(3).unwrap();
        assert_eq!(y.value().data(), &[4.0]);
    }
}
