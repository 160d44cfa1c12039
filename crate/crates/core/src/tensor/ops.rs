use std::rc::Rc;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `y[i, :] = x[i, :] · w + b` for row-major `x: [m, cin]`, `w: [cin, cout]`.
pub(crate) fn matmul_rows(x: &[f64], w: &[f64], b: Option<&[f64]>, cin: usize, cout: usize) -> Vec<f64> {
    let m = if cin == 0 { 0 } else { x.len() / cin };
    let mut y = vec![0.0; m * cout];
    for (xr, yr) in x.chunks_exact(cin.max(1)).zip(y.chunks_exact_mut(cout.max(1))) {
        if let Some(b) = b {
            yr.copy_from_slice(b);
        }
        for (k, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wr = &w[k * cout..(k + 1) * cout];
            for (yv, wv) in yr.iter_mut().zip(wr) {
                *yv += xv * wv;
            }
        }
    }
    y
}

impl Graph {
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(&av, &bv, "add")?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.custom(
            out,
            &[a, b],
            Some(Box::new(|g, needs| {
                vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
            })),
        ))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(&av, &bv, "sub")?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.custom(
            out,
            &[a, b],
            Some(Box::new(|g, needs| {
                vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
            })),
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(&av, &bv, "mul")?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.custom(
            out,
            &[a, b],
            Some(Box::new(move |g, needs| {
                let prod = |o: &Tensor| {
                    let d = g.data().iter().zip(o.data()).map(|(x, y)| x * y).collect();
                    Tensor::new(g.shape().to_vec(), d).unwrap()
                };
                vec![needs[0].then(|| prod(&bv)), needs[1].then(|| prod(&av))]
            })),
        ))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.custom(out, &[a], Some(Box::new(move |g, _| vec![Some(g.map(|v| v * s))])))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self, a: Var) -> Var {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let out = Tensor::scalar(av.data().iter().sum());
        self.custom(
            out,
            &[a],
            Some(Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))])),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.map(|v| v.max(0.0));
        self.custom(
            out,
            &[a],
            Some(Box::new(move |g, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![Some(Tensor::new(g.shape().to_vec(), d).unwrap())]
            })),
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let orig = av.shape().to_vec();
        let out = (*av).clone().reshape(shape)?;
        Ok(self.custom(
            out,
            &[a],
            Some(Box::new(move |g, _| vec![Some(g.clone().reshape(&orig).unwrap())])),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let out = permute_tensor(&av, axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        Ok(self.custom(
            out,
            &[a],
            Some(Box::new(move |g, _| vec![Some(permute_tensor(g, &inverse).unwrap())])),
        ))
    }

    /// Affine map over the last axis: `x: [.., cin]`, `w: [cin, cout]`,
    /// `b: [cout]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rank() != 2 || xv.rank() == 0 {
            return Err(Error::shape(format!(
                "linear: x {:?}, weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (cin, cout) = (wv.shape()[0], wv.shape()[1]);
        if *xv.shape().last().unwrap() != cin {
            return Err(Error::shape(format!(
                "linear: input width {} vs weight {:?}",
                xv.shape().last().unwrap(),
                wv.shape()
            )));
        }
        let bv = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [cout] {
                    return Err(Error::shape(format!(
                        "linear: bias {:?} for width {cout}",
                        bv.shape()
                    )));
                }
                Some(bv)
            }
            None => None,
        };
        let y = matmul_rows(xv.data(), wv.data(), bv.as_ref().map(|b| b.data()), cin, cout);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let out = Tensor::new(shape, y)?;
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let has_bias = b.is_some();
        Ok(self.custom(
            out,
            &parents,
            Some(Box::new(move |g, needs| linear_backward(g, &xv, &wv, has_bias, needs))),
        ))
    }
}

fn linear_backward(g: &Tensor, x: &Rc<Tensor>, w: &Rc<Tensor>, has_bias: bool, needs: &[bool]) -> Vec<Option<Tensor>> {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    let gd = g.data();
    let gx = needs[0].then(|| {
        let mut dx = vec![0.0; x.len()];
        for (dxr, gr) in dx.chunks_exact_mut(cin.max(1)).zip(gd.chunks_exact(cout.max(1))) {
            for (k, dv) in dxr.iter_mut().enumerate() {
                let wr = &w.data()[k * cout..(k + 1) * cout];
                *dv = wr.iter().zip(gr).map(|(a, b)| a * b).sum();
            }
        }
        Tensor::new(x.shape().to_vec(), dx).unwrap()
    });
    let gw = needs[1].then(|| {
        let mut dw = vec![0.0; cin * cout];
        for (xr, gr) in x.data().chunks_exact(cin.max(1)).zip(gd.chunks_exact(cout.max(1))) {
            for (k, &xv) in xr.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (d, gv) in dw[k * cout..(k + 1) * cout].iter_mut().zip(gr) {
                    *d += xv * gv;
                }
            }
        }
        Tensor::new(vec![cin, cout], dw).unwrap()
    });
    let mut out = vec![gx, gw];
    if has_bias {
        out.push(needs[2].then(|| {
            let mut db = vec![0.0; cout];
            for gr in gd.chunks_exact(cout.max(1)) {
                for (d, gv) in db.iter_mut().zip(gr) {
                    *d += gv;
                }
            }
            Tensor::new(vec![cout], db).unwrap()
        }));
    }
    out
}

pub(crate) fn permute_tensor(t: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = t.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::shape(format!(
            "permute: axes {axes:?} for shape {:?}",
            t.shape()
        )));
    }
    let in_shape = t.shape();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = t.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(t.data()[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity_and_zero_weight() {
        let g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap());
        let eye = g.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let zb = g.constant(Tensor::zeros(&[3]));
        let y = g.linear(x, eye, Some(zb)).unwrap();
        assert_eq!(*g.value(y), *g.value(x));

        let zw = g.constant(Tensor::zeros(&[3, 2]));
        let b = g.constant(Tensor::new(vec![2], vec![7.0, -1.0]).unwrap());
        let y = g.linear(x, zw, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[7.0, -1.0, 7.0, -1.0]);
    }

    #[test]
    fn linear_shape_errors() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let w = g.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(g.linear(x, w, None), Err(Error::Shape(_))));
        let w = g.constant(Tensor::zeros(&[3, 2]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(g.linear(x, w, Some(b)).is_err());
    }

    #[test]
    fn relu_values() {
        let g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let p = permute_tensor(&t, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        // p[c, a, b] = t[a, b, c]
        assert_eq!(p.data()[(2 + 1) * 3 + 2], t.data()[(3 + 2) * 4 + 1]);
        let back = permute_tensor(&p, &[1, 2, 0]).unwrap();
        assert_eq!(back, t);
        assert!(permute_tensor(&t, &[0, 0, 1]).is_err());
    }

    #[test]
    fn shared_input_accumulates() {
        let g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }
}
