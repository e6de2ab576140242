use crate::error::{Error, Result};
use crate::tensor::tape::{Backward, BackwardCtx, OpKind};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    /// Half-pixel centers (align-corners = false): `src = (dst + 0.5) / f - 0.5`.
    Bilinear,
}

/// Two-tap linear interpolation weights for one output coordinate.
#[derive(Clone, Copy)]
struct Taps {
    i0: usize,
    i1: usize,
    w1: f64,
}

fn taps(out_len: usize, in_len: usize, factor: usize, mode: UpsampleMode) -> Vec<Taps> {
    (0..out_len)
        .map(|d| match mode {
            UpsampleMode::Nearest => Taps {
                i0: d / factor,
                i1: d / factor,
                w1: 0.0,
            },
            UpsampleMode::Bilinear => {
                let s = ((d as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                Taps {
                    i0,
                    i1,
                    w1: s - i0 as f64,
                }
            }
        })
        .collect()
}

struct Upsample {
    ty: Vec<Taps>,
    tx: Vec<Taps>,
    dims: (usize, usize, usize),
}

impl Backward for Upsample {
    fn backward(&self, _ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (planes, h, w) = self.dims;
        let (ho, wo) = (self.ty.len(), self.tx.len());
        let mut out = vec![0.0; planes * h * w];
        for p in 0..planes {
            let dst = &mut out[p * h * w..][..h * w];
            for (oy, ty) in self.ty.iter().enumerate() {
                for (ox, tx) in self.tx.iter().enumerate() {
                    let gv = g[(p * ho + oy) * wo + ox];
                    let (wy1, wx1) = (ty.w1, tx.w1);
                    dst[ty.i0 * w + tx.i0] += gv * (1.0 - wy1) * (1.0 - wx1);
                    dst[ty.i0 * w + tx.i1] += gv * (1.0 - wy1) * wx1;
                    dst[ty.i1 * w + tx.i0] += gv * wy1 * (1.0 - wx1);
                    dst[ty.i1 * w + tx.i1] += gv * wy1 * wx1;
                }
            }
        }
        vec![Some(out)]
    }
}

/// Border-clamped bilinear lookup at continuous pixel coordinates.
#[derive(Clone, Copy)]
struct Sample {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: f64,
    wy: f64,
    /// Coordinate was inside the clamp range, so it carries gradient.
    live_x: bool,
    live_y: bool,
}

fn locate(c: f64, len: usize) -> (usize, usize, f64, bool) {
    let max = (len - 1) as f64;
    let live = c.is_finite() && (0.0..=max).contains(&c);
    let cc = if c.is_finite() {
        c.clamp(0.0, max)
    } else {
        0.0
    };
    let i0 = (cc.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, cc - i0 as f64, live)
}

struct GridSample {
    samples: Vec<Sample>,
    dims: (usize, usize, usize, usize, usize, usize),
}

impl Backward for GridSample {
    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (n, c, h, w, ho, wo) = self.dims;
        let src = ctx.parents[0].data();
        let op = ho * wo;
        let mut gs = ctx.needs[0].then(|| vec![0.0; src.len()]);
        let mut gg = ctx.needs[1].then(|| vec![0.0; n * 2 * op]);
        for b in 0..n {
            for k in 0..op {
                let s = self.samples[b * op + k];
                let (mut dx, mut dy) = (0.0, 0.0);
                for ch in 0..c {
                    let plane = (b * c + ch) * h * w;
                    let gv = g[(b * c + ch) * op + k];
                    if let Some(gs) = gs.as_mut() {
                        gs[plane + s.y0 * w + s.x0] += gv * (1.0 - s.wy) * (1.0 - s.wx);
                        gs[plane + s.y0 * w + s.x1] += gv * (1.0 - s.wy) * s.wx;
                        gs[plane + s.y1 * w + s.x0] += gv * s.wy * (1.0 - s.wx);
                        gs[plane + s.y1 * w + s.x1] += gv * s.wy * s.wx;
                    }
                    if gg.is_some() {
                        let p = |y: usize, x: usize| src[plane + y * w + x];
                        let (v00, v01, v10, v11) =
                            (p(s.y0, s.x0), p(s.y0, s.x1), p(s.y1, s.x0), p(s.y1, s.x1));
                        dx += gv * ((1.0 - s.wy) * (v01 - v00) + s.wy * (v11 - v10));
                        dy += gv * ((1.0 - s.wx) * (v10 - v00) + s.wx * (v11 - v01));
                    }
                }
                if let Some(gg) = gg.as_mut() {
                    if s.live_x && s.x1 != s.x0 {
                        gg[(b * 2) * op + k] = dx;
                    }
                    if s.live_y && s.y1 != s.y0 {
                        gg[(b * 2 + 1) * op + k] = dy;
                    }
                }
            }
        }
        vec![gs, gg]
    }
}

impl<'t> Var<'t> {
    /// Integer-factor spatial upsampling of an `[N,C,H,W]` tensor.
    pub fn upsample(self, factor: usize, mode: UpsampleMode) -> Result<Var<'t>> {
        if factor < 2 {
            return Err(Error::invalid(format!(
                "upsample factor {factor} must be >= 2"
            )));
        }
        let v = self.value();
        let [n, c, h, w] = *v.shape() else {
            return Err(Error::shape(
                "upsample",
                format!("expected [N,C,H,W], got {:?}", v.shape()),
            ));
        };
        let (ho, wo) = (h * factor, w * factor);
        let ty = taps(ho, h, factor, mode);
        let tx = taps(wo, w, factor, mode);
        let d = v.data();
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            let src = &d[p * h * w..][..h * w];
            for (oy, t_y) in ty.iter().enumerate() {
                let r0 = &src[t_y.i0 * w..][..w];
                let r1 = &src[t_y.i1 * w..][..w];
                for (ox, t_x) in tx.iter().enumerate() {
                    let top = r0[t_x.i0] * (1.0 - t_x.w1) + r0[t_x.i1] * t_x.w1;
                    let bot = r1[t_x.i0] * (1.0 - t_x.w1) + r1[t_x.i1] * t_x.w1;
                    out[(p * ho + oy) * wo + ox] = top * (1.0 - t_y.w1) + bot * t_y.w1;
                }
            }
        }
        let out = Tensor::from_parts(vec![n, c, ho, wo], out);
        Ok(self.tape.push(
            OpKind::Upsample,
            out,
            &[self],
            Upsample {
                ty,
                tx,
                dims: (n * c, h, w),
            },
        ))
    }

    /// Samples `self` (`[N,C,H,W]`) at pixel coordinates `grid`
    /// (`[N,2,Ho,Wo]`, channel 0 = x/column, channel 1 = y/row) with bilinear
    /// interpolation. Coordinates outside the image are clamped to the border;
    /// clamped coordinates get zero gradient.
    pub fn grid_sample(self, grid: Var<'t>) -> Result<Var<'t>> {
        let v = self.value();
        let gv = grid.value();
        let [n, c, h, w] = *v.shape() else {
            return Err(Error::shape(
                "grid_sample",
                format!("source {:?}", v.shape()),
            ));
        };
        let [gn, two, ho, wo] = *gv.shape() else {
            return Err(Error::shape(
                "grid_sample",
                format!("grid {:?}", gv.shape()),
            ));
        };
        if gn != n || two != 2 {
            return Err(Error::shape(
                "grid_sample",
                format!("grid {:?} for source {:?}", gv.shape(), v.shape()),
            ));
        }
        let op = ho * wo;
        let gd = gv.data();
        let mut samples = Vec::with_capacity(n * op);
        for b in 0..n {
            for k in 0..op {
                let (x0, x1, wx, live_x) = locate(gd[(b * 2) * op + k], w);
                let (y0, y1, wy, live_y) = locate(gd[(b * 2 + 1) * op + k], h);
                samples.push(Sample {
                    x0,
                    x1,
                    y0,
                    y1,
                    wx,
                    wy,
                    live_x,
                    live_y,
                });
            }
        }
        let d = v.data();
        let mut out = vec![0.0; n * c * op];
        for b in 0..n {
            for ch in 0..c {
                let plane = &d[(b * c + ch) * h * w..][..h * w];
                for k in 0..op {
                    let s = samples[b * op + k];
                    let top = plane[s.y0 * w + s.x0] * (1.0 - s.wx) + plane[s.y0 * w + s.x1] * s.wx;
                    let bot = plane[s.y1 * w + s.x0] * (1.0 - s.wx) + plane[s.y1 * w + s.x1] * s.wx;
                    out[(b * c + ch) * op + k] = top * (1.0 - s.wy) + bot * s.wy;
                }
            }
        }
        let out = Tensor::from_parts(vec![n, c, ho, wo], out);
        Ok(self.tape.push(
            OpKind::GridSample,
            out,
            &[self, grid],
            GridSample {
                samples,
                dims: (n, c, h, w, ho, wo),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn nearest_doubles_blocks() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = x.upsample(2, UpsampleMode::Nearest).unwrap();
        assert_eq!(
            y.value().data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn bilinear_half_pixel_row() {
        // src = (dst + 0.5)/2 - 0.5 -> -0.25 (clamped), 0.25, 0.75, 1.25 (edge)
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![0.0, 2.0]).unwrap());
        let y = x.upsample(2, UpsampleMode::Bilinear).unwrap();
        let yv = y.value();
        let row = &yv.data()[..4];
        let oracle = [0.0, 0.25 * 2.0, 0.75 * 2.0, 2.0];
        for (a, b) in row.iter().zip(oracle) {
            assert!((a - b).abs() < 1e-15, "{row:?}");
        }
    }

    #[test]
    fn constant_survives_both_modes() {
        let tape = Tape::new();
        for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
            let y = tape
                .constant(Tensor::full(&[1, 2, 3, 2], 0.7))
                .upsample(4, mode)
                .unwrap();
            assert!(y.value().data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        }
    }

    #[test]
    fn factor_below_two_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        assert!(x.upsample(1, UpsampleMode::Nearest).is_err());
    }

    #[test]
    fn grid_sample_half_pixel() {
        let tape = Tape::new();
        let src = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![0.0, 1.0]).unwrap());
        let grid = tape.constant(Tensor::new(&[1, 2, 1, 1], vec![0.5, 0.0]).unwrap());
        assert_eq!(src.grid_sample(grid).unwrap().item(), 0.5);
    }

    #[test]
    fn grid_sample_clamps_outside() {
        let tape = Tape::new();
        let src = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![0.25, 1.0]).unwrap());
        let grid = tape.var(Tensor::new(&[1, 2, 1, 2], vec![-3.0, 7.0, 0.0, 0.0]).unwrap());
        let y = src.grid_sample(grid).unwrap();
        assert_eq!(y.value().data(), &[0.25, 1.0]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(grid).unwrap().data()[..2], [0.0, 0.0]);
    }
}
