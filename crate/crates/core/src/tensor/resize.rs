use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Two-point linear interpolation stencil: `(1 - t) * v[i0] + t * v[i1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Taps {
    pub i0: usize,
    pub i1: usize,
    pub t: f64,
}

/// Align-centers stencils for upsampling an axis of length `n` by `factor`.
///
/// Output sample `o` sits at source coordinate `(2o + 1 - factor) / (2 factor)`,
/// so cell centers map onto cell centers. Non-periodic axes clamp to the
/// border; periodic axes wrap.
pub fn linear_taps(n: usize, factor: usize, circular: bool) -> Vec<Taps> {
    let f = factor as i64;
    (0..n as i64 * f)
        .map(|o| {
            let src = (2 * o + 1 - f) as f64 / (2 * f) as f64;
            if circular {
                let fl = src.floor();
                let t = src - fl;
                let i0 = (fl as i64).rem_euclid(n as i64) as usize;
                Taps { i0, i1: (i0 + 1) % n, t }
            } else {
                let s = src.clamp(0.0, (n - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                Taps { i0, i1, t: s - i0 as f64 }
            }
        })
        .collect()
}

fn strides(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, inner)
}

fn resize_axis(data: &[f64], shape: &[usize], axis: usize, taps: &[Taps]) -> (Vec<f64>, Vec<usize>) {
    let (outer, inner) = strides(shape, axis);
    let (n_in, n_out) = (shape[axis], taps.len());
    let mut out = vec![0.0; outer * n_out * inner];
    for o in 0..outer {
        let src = &data[o * n_in * inner..(o + 1) * n_in * inner];
        let dst = &mut out[o * n_out * inner..(o + 1) * n_out * inner];
        for (k, tp) in taps.iter().enumerate() {
            let (a, b) = (&src[tp.i0 * inner..(tp.i0 + 1) * inner], &src[tp.i1 * inner..(tp.i1 + 1) * inner]);
            for ((d, va), vb) in dst[k * inner..(k + 1) * inner].iter_mut().zip(a).zip(b) {
                *d = (1.0 - tp.t) * va + tp.t * vb;
            }
        }
    }
    let mut s = shape.to_vec();
    s[axis] = n_out;
    (out, s)
}

fn resize_axis_transpose(grad: &[f64], in_shape: &[usize], axis: usize, taps: &[Taps]) -> Vec<f64> {
    let (outer, inner) = strides(in_shape, axis);
    let (n_in, n_out) = (in_shape[axis], taps.len());
    let mut out = vec![0.0; outer * n_in * inner];
    for o in 0..outer {
        let src = &grad[o * n_out * inner..(o + 1) * n_out * inner];
        let dst = &mut out[o * n_in * inner..(o + 1) * n_in * inner];
        for (k, tp) in taps.iter().enumerate() {
            let g = &src[k * inner..(k + 1) * inner];
            for (j, gv) in g.iter().enumerate() {
                dst[tp.i0 * inner + j] += (1.0 - tp.t) * gv;
                dst[tp.i1 * inner + j] += tp.t * gv;
            }
        }
    }
    out
}

impl Graph {
    /// Separable linear upsampling of the listed axes, each by `factor`.
    fn resize_axes(&self, x: Var, axes: &[(usize, bool)], factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::shape("resize: factor must be at least 1"));
        }
        let xv = self.value(x);
        if axes.iter().any(|&(a, _)| xv.shape()[a] == 0) {
            return Err(Error::shape(format!("resize: empty axis in {:?}", xv.shape())));
        }
        let plan: Vec<(usize, Vec<Taps>, Vec<usize>)> = {
            let mut shape = xv.shape().to_vec();
            axes.iter()
                .map(|&(a, circ)| {
                    let taps = linear_taps(shape[a], factor, circ);
                    let before = shape.clone();
                    shape[a] *= factor;
                    (a, taps, before)
                })
                .collect()
        };
        let mut data = xv.data().to_vec();
        let mut shape = xv.shape().to_vec();
        for (a, taps, _) in &plan {
            let (d, s) = resize_axis(&data, &shape, *a, taps);
            data = d;
            shape = s;
        }
        let out = Tensor::new(shape, data)?;
        let in_shape = xv.shape().to_vec();
        Ok(self.custom(
            out,
            &[x],
            Some(Box::new(move |g, _| {
                let mut grad = g.data().to_vec();
                for (a, taps, before) in plan.iter().rev() {
                    grad = resize_axis_transpose(&grad, before, *a, taps);
                }
                vec![Some(Tensor::new(in_shape.clone(), grad).unwrap())]
            })),
        ))
    }

    /// Bilinear upsampling of `x: [c, a, b]` by an integer factor.
    /// `circular_axis` (0 or 1) marks a periodic spatial axis.
    pub fn resize_bilinear_2d(&self, x: Var, factor: usize, circular_axis: Option<usize>) -> Result<Var> {
        if self.value(x).rank() != 3 {
            return Err(Error::shape(format!("resize_bilinear_2d: input {:?}", self.shape(x))));
        }
        self.resize_axes(x, &[(1, circular_axis == Some(0)), (2, circular_axis == Some(1))], factor)
    }

    /// Trilinear upsampling of `x: [c, nx, ny, nz]` by an integer factor.
    pub fn resize_trilinear_3d(&self, x: Var, factor: usize) -> Result<Var> {
        if self.value(x).rank() != 4 {
            return Err(Error::shape(format!("resize_trilinear_3d: input {:?}", self.shape(x))));
        }
        self.resize_axes(x, &[(1, false), (2, false), (3, false)], factor)
    }
}
