use super::reduce::split_axis;
use crate::error::{Error, Result};
use crate::tensor::tape::{Backward, BackwardCtx, OpKind};
use crate::tensor::{resolve_axis, strides, Tensor, Var};

struct Identity;

impl Backward for Identity {
    fn backward(&self, _ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec())]
    }
}

/// Gather by index: `out[k] = in[src[k]]`.
struct Gather {
    src: Vec<usize>,
    in_len: usize,
}

impl Backward for Gather {
    fn backward(&self, _ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut out = vec![0.0; self.in_len];
        for (&s, &gk) in self.src.iter().zip(g) {
            out[s] += gk;
        }
        vec![Some(out)]
    }
}

struct Concat {
    /// (outer, len, inner) per input along the concat axis.
    parts: Vec<(usize, usize, usize)>,
    total_len: usize,
}

impl Backward for Concat {
    fn backward(&self, ctx: &BackwardCtx<'_>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.parts.len());
        for (p, &(outer, len, inner)) in self.parts.iter().enumerate() {
            if !ctx.needs[p] {
                out.push(None);
                offset += len;
                continue;
            }
            let mut gp = vec![0.0; outer * len * inner];
            for o in 0..outer {
                let src = &g[(o * self.total_len + offset) * inner..][..len * inner];
                gp[o * len * inner..][..len * inner].copy_from_slice(src);
            }
            out.push(Some(gp));
            offset += len;
        }
        out
    }
}

impl<'t> Var<'t> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let n: usize = shape.iter().product();
        if n != v.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", v.shape()),
            ));
        }
        let out = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        Ok(self.tape.push(OpKind::Reshape, out, &[self], Identity))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let nd = v.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd
            || perm
                .iter()
                .any(|&p| p >= nd || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::invalid(format!(
                "bad permutation {perm:?} for rank {nd}"
            )));
        }
        let in_strides = strides(v.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| v.shape()[p]).collect();
        let n = v.numel();
        let mut src = Vec::with_capacity(n);
        let mut idx = vec![0usize; nd];
        for _ in 0..n {
            src.push(idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum());
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let d = v.data();
        let data = src.iter().map(|&s| d[s]).collect();
        let out = Tensor::from_parts(out_shape, data);
        Ok(self
            .tape
            .push(OpKind::Permute, out, &[self], Gather { src, in_len: n }))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: isize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        let ax = resolve_axis(axis, base.len())?;
        for v in &values[1..] {
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == ax || a == b);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{base:?} vs {s:?} on axis {ax}"),
                ));
            }
        }
        let dims: Vec<_> = values.iter().map(|v| split_axis(v.shape(), ax)).collect();
        let total_len: usize = dims.iter().map(|d| d.1).sum();
        let (outer, _, inner) = dims[0];
        let mut data = Vec::with_capacity(outer * total_len * inner);
        for o in 0..outer {
            for (v, &(_, len, _)) in values.iter().zip(&dims) {
                data.extend_from_slice(&v.data()[o * len * inner..][..len * inner]);
            }
        }
        let mut shape = base;
        shape[ax] = total_len;
        let out = Tensor::from_parts(shape, data);
        Ok(first.tape.push(
            OpKind::Concat,
            out,
            parts,
            Concat {
                parts: dims,
                total_len,
            },
        ))
    }

    /// `len` consecutive entries starting at `start` along `axis`.
    pub fn slice(self, axis: isize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value();
        let ax = resolve_axis(axis, v.ndim())?;
        let (outer, full, inner) = split_axis(v.shape(), ax);
        if start + len > full || len == 0 {
            return Err(Error::invalid(format!(
                "slice [{start}, {}) outside axis of length {full}",
                start + len
            )));
        }
        let mut src = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            src.extend(base..base + len * inner);
        }
        let d = v.data();
        let data = src.iter().map(|&s| d[s]).collect();
        let mut shape = v.shape().to_vec();
        shape[ax] = len;
        let out = Tensor::from_parts(shape, data);
        Ok(self.tape.push(
            OpKind::Slice,
            out,
            &[self],
            Gather {
                src,
                in_len: v.numel(),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Tape, Tensor, Var};

    fn iota(shape: &[usize]) -> Tensor {
        let n = shape.iter().product::<usize>();
        Tensor::new(shape, (0..n).map(|x| x as f64).collect()).unwrap()
    }

    #[test]
    fn permute_transposes() {
        let tape = Tape::new();
        let x = tape.constant(iota(&[2, 3]));
        let y = x.permute(&[1, 0]).unwrap();
        assert_eq!(y.shape(), vec![3, 2]);
        assert_eq!(y.value().data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn permute_rejects_duplicates() {
        let tape = Tape::new();
        let x = tape.constant(iota(&[2, 3]));
        assert!(x.permute(&[0, 0]).is_err());
        assert!(x.permute(&[0]).is_err());
    }

    #[test]
    fn concat_and_slice_invert() {
        let tape = Tape::new();
        let a = tape.var(iota(&[2, 1, 3]));
        let b = tape.var(iota(&[2, 2, 3]));
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 3, 3]);
        let back = c.slice(1, 1, 2).unwrap();
        assert_eq!(back.value().data(), b.value().data());
        let g = tape.backward(back.sum()).unwrap();
        assert_eq!(g.get(a).unwrap().sum(), 0.0);
        assert_eq!(g.get(b).unwrap().sum(), 12.0);
    }

    #[test]
    fn concat_rejects_mismatch() {
        let tape = Tape::new();
        let a = tape.var(iota(&[2, 3]));
        let b = tape.var(iota(&[3, 3]));
        assert!(Var::concat(&[a, b], 1).is_err());
        assert!(Var::concat(&[a, b], 0).is_ok());
    }

    #[test]
    fn reshape_checks_count() {
        let tape = Tape::new();
        let x = tape.var(iota(&[2, 3]));
        assert!(x.reshape(&[4]).is_err());
        assert_eq!(x.reshape(&[3, 2]).unwrap().value().data(), x.value().data());
    }
}
