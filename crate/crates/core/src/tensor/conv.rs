use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Border handling for [`Graph::conv2d`]. Circular modes wrap one spatial
/// axis and zero-pad the other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Zeros,
    /// Wrap the first spatial axis (rows).
    CircularFirst,
    /// Wrap the second spatial axis (columns).
    CircularSecond,
}

impl Padding {
    /// Spatial axis that wraps, if any.
    pub fn circular_axis(self) -> Option<usize> {
        match self {
            Padding::Zeros => None,
            Padding::CircularFirst => Some(0),
            Padding::CircularSecond => Some(1),
        }
    }

    pub fn for_axis(axis: Option<usize>) -> Self {
        match axis {
            Some(0) => Padding::CircularFirst,
            Some(1) => Padding::CircularSecond,
            _ => Padding::Zeros,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    hp: usize,
    wp: usize,
    ho: usize,
    wo: usize,
}

/// Maps a padded index to its source index, or `None` for zero padding.
fn source_index(p: usize, pad: usize, n: usize, wrap: bool) -> Option<usize> {
    let s = p as isize - pad as isize;
    if (0..n as isize).contains(&s) {
        Some(s as usize)
    } else if wrap {
        Some(s.rem_euclid(n as isize) as usize)
    } else {
        None
    }
}

fn pad_input(x: &[f64], g: &Geometry, padding: Padding) -> Vec<f64> {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let wrap = padding.circular_axis();
    let mut xp = vec![0.0; g.c * g.hp * g.wp];
    for ci in 0..g.c {
        for py in 0..g.hp {
            let Some(sy) = source_index(py, ph, g.h, wrap == Some(0)) else { continue };
            for px in 0..g.wp {
                let Some(sx) = source_index(px, pw, g.w, wrap == Some(1)) else { continue };
                xp[(ci * g.hp + py) * g.wp + px] = x[(ci * g.h + sy) * g.w + sx];
            }
        }
    }
    xp
}

fn fold_padded(gxp: &[f64], g: &Geometry, padding: Padding) -> Vec<f64> {
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let wrap = padding.circular_axis();
    let mut gx = vec![0.0; g.c * g.h * g.w];
    for ci in 0..g.c {
        for py in 0..g.hp {
            let Some(sy) = source_index(py, ph, g.h, wrap == Some(0)) else { continue };
            for px in 0..g.wp {
                let Some(sx) = source_index(px, pw, g.w, wrap == Some(1)) else { continue };
                gx[(ci * g.h + sy) * g.w + sx] += gxp[(ci * g.hp + py) * g.wp + px];
            }
        }
    }
    gx
}

impl Graph {
    /// 2D cross-correlation of `x: [c, h, w]` with `k: [co, c, kh, kw]`
    /// (odd kernel extents, "same" padding), optional per-channel bias.
    pub fn conv2d(&self, x: Var, k: Var, bias: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(k));
        if xv.rank() != 3 || kv.rank() != 4 || xv.shape()[0] != kv.shape()[1] {
            return Err(Error::shape(format!(
                "conv2d: input {:?}, kernel {:?}",
                xv.shape(),
                kv.shape()
            )));
        }
        if stride < 1 {
            return Err(Error::shape("conv2d: stride must be at least 1"));
        }
        let (kh, kw) = (kv.shape()[2], kv.shape()[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(format!("conv2d: kernel extents {kh}x{kw} must be odd")));
        }
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if h == 0 || w == 0 {
            return Err(Error::shape("conv2d: empty spatial extent"));
        }
        let co = kv.shape()[0];
        let bv = match bias {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [co] {
                    return Err(Error::shape(format!("conv2d: bias {:?} for {co} channels", bv.shape())));
                }
                Some(bv)
            }
            None => None,
        };
        let geo = Geometry {
            c,
            h,
            w,
            co,
            kh,
            kw,
            stride,
            hp: h + 2 * (kh / 2),
            wp: w + 2 * (kw / 2),
            ho: (h - 1) / stride + 1,
            wo: (w - 1) / stride + 1,
        };
        let xp = std::rc::Rc::new(pad_input(xv.data(), &geo, padding));
        let out = conv_forward(&xp, kv.data(), bv.as_ref().map(|b| b.data()), &geo);
        let out = Tensor::new(vec![co, geo.ho, geo.wo], out)?;
        let mut parents = vec![x, k];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_bias = bias.is_some();
        Ok(self.custom(
            out,
            &parents,
            Some(Box::new(move |g, needs| {
                let gd = g.data();
                let gx = needs[0].then(|| {
                    let gxp = conv_backward_input(gd, kv.data(), &geo);
                    Tensor::new(vec![geo.c, geo.h, geo.w], fold_padded(&gxp, &geo, padding)).unwrap()
                });
                let gk = needs[1].then(|| {
                    Tensor::new(
                        vec![geo.co, geo.c, geo.kh, geo.kw],
                        conv_backward_kernel(gd, &xp, &geo),
                    )
                    .unwrap()
                });
                let mut res = vec![gx, gk];
                if has_bias {
                    res.push(needs[2].then(|| {
                        let plane = geo.ho * geo.wo;
                        let db = gd.chunks_exact(plane).map(|ch| ch.iter().sum()).collect();
                        Tensor::new(vec![geo.co], db).unwrap()
                    }));
                }
                res
            })),
        ))
    }
}

fn conv_forward(xp: &[f64], k: &[f64], bias: Option<&[f64]>, g: &Geometry) -> Vec<f64> {
    let plane = g.ho * g.wo;
    let mut out = vec![0.0; g.co * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(o, dst)| {
        if let Some(b) = bias {
            dst.fill(b[o]);
        }
        for ci in 0..g.c {
            let src = &xp[ci * g.hp * g.wp..(ci + 1) * g.hp * g.wp];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = k[((o * g.c + ci) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..g.ho {
                        let row = &src[(oy * g.stride + ky) * g.wp..];
                        let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        if g.stride == 1 {
                            for (d, s) in drow.iter_mut().zip(&row[kx..kx + g.wo]) {
                                *d += wv * s;
                            }
                        } else {
                            for (ox, d) in drow.iter_mut().enumerate() {
                                *d += wv * row[ox * g.stride + kx];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv_backward_input(gout: &[f64], k: &[f64], g: &Geometry) -> Vec<f64> {
    let pplane = g.hp * g.wp;
    let mut gxp = vec![0.0; g.c * pplane];
    gxp.par_chunks_mut(pplane).enumerate().for_each(|(ci, dst)| {
        for o in 0..g.co {
            let go = &gout[o * g.ho * g.wo..(o + 1) * g.ho * g.wo];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = k[((o * g.c + ci) * g.kh + ky) * g.kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..g.ho {
                        let grow = &go[oy * g.wo..(oy + 1) * g.wo];
                        let drow = &mut dst[(oy * g.stride + ky) * g.wp..];
                        if g.stride == 1 {
                            for (d, s) in drow[kx..kx + g.wo].iter_mut().zip(grow) {
                                *d += wv * s;
                            }
                        } else {
                            for (ox, s) in grow.iter().enumerate() {
                                drow[ox * g.stride + kx] += wv * s;
                            }
                        }
                    }
                }
            }
        }
    });
    gxp
}

fn conv_backward_kernel(gout: &[f64], xp: &[f64], g: &Geometry) -> Vec<f64> {
    let per_out = g.c * g.kh * g.kw;
    let mut gk = vec![0.0; g.co * per_out];
    gk.par_chunks_mut(per_out).enumerate().for_each(|(o, dst)| {
        let go = &gout[o * g.ho * g.wo..(o + 1) * g.ho * g.wo];
        for ci in 0..g.c {
            let src = &xp[ci * g.hp * g.wp..(ci + 1) * g.hp * g.wp];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let mut acc = 0.0;
                    for oy in 0..g.ho {
                        let grow = &go[oy * g.wo..(oy + 1) * g.wo];
                        let row = &src[(oy * g.stride + ky) * g.wp..];
                        if g.stride == 1 {
                            acc += grow.iter().zip(&row[kx..kx + g.wo]).map(|(a, b)| a * b).sum::<f64>();
                        } else {
                            acc += grow
                                .iter()
                                .enumerate()
                                .map(|(ox, a)| a * row[ox * g.stride + kx])
                                .sum::<f64>();
                        }
                    }
                    dst[(ci * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    });
    gk
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &Tensor, k: &Tensor, stride: usize, padding: Padding) -> Tensor {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let (ho, wo) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
        let at = |ci: usize, y: isize, xx: isize| -> f64 {
            let (mut y, mut xx) = (y, xx);
            match padding {
                Padding::CircularFirst => y = y.rem_euclid(h as isize),
                Padding::CircularSecond => xx = xx.rem_euclid(w as isize),
                Padding::Zeros => {}
            }
            if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                0.0
            } else {
                x.data()[(ci * h + y as usize) * w + xx as usize]
            }
        };
        Tensor::from_fn(&[co, ho, wo], |i| {
            let (o, rem) = (i / (ho * wo), i % (ho * wo));
            let (oy, ox) = (rem / wo, rem % wo);
            let mut acc = 0.0;
            for ci in 0..c {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let y = (oy * stride + ky) as isize - (kh / 2) as isize;
                        let xx = (ox * stride + kx) as isize - (kw / 2) as isize;
                        acc += k.data()[((o * c + ci) * kh + ky) * kw + kx] * at(ci, y, xx);
                    }
                }
            }
            acc
        })
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn matches_naive_reference() {
        for padding in [Padding::Zeros, Padding::CircularFirst, Padding::CircularSecond] {
            for stride in [1, 2] {
                let x = pseudo(&[3, 6, 8], 1);
                let k = pseudo(&[4, 3, 3, 3], 2);
                let g = Graph::new();
                let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
                let y = g.conv2d(xv, kv, None, stride, padding).unwrap();
                let want = naive(&x, &k, stride, padding);
                assert!(g.value(y).max_abs_diff(&want) < 1e-13, "{padding:?} stride {stride}");
            }
        }
    }

    #[test]
    fn identity_kernel_and_constant_average() {
        let g = Graph::new();
        let x = pseudo(&[3, 5, 4], 3);
        let eye = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let y = g.conv2d(g.constant(x.clone()), g.constant(eye), None, 1, Padding::Zeros).unwrap();
        assert_eq!(*g.value(y), x);

        let cst = Tensor::full(&[1, 6, 6], 2.5);
        let avg = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
        let y = g.conv2d(g.constant(cst), g.constant(avg), None, 1, Padding::CircularSecond).unwrap();
        // rows at the top/bottom see zero padding; wrapped columns do not
        let v = g.value(y);
        for oy in 1..5 {
            for ox in 0..6 {
                assert!((v.data()[oy * 6 + ox] - 2.5).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4, 4]));
        let even = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(g.conv2d(x, even, None, 1, Padding::Zeros).is_err());
        let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(g.conv2d(x, k, None, 1, Padding::Zeros).is_err());
        let k = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(g.conv2d(x, k, None, 0, Padding::Zeros).is_err());
    }
}
