use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub(crate) const GROUP_NORM_EPS: f64 = 1e-5;

impl Graph {
    /// Group normalization over `x: [c, ...]`: channels are split into
    /// `groups` contiguous groups, each normalized to zero mean and unit
    /// variance over its channels and all trailing axes, then scaled by
    /// `gamma[c]` and shifted by `beta[c]`.
    pub fn group_norm(&self, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        if xv.rank() < 2 {
            return Err(Error::shape(format!("group_norm: input {:?}", xv.shape())));
        }
        let c = xv.shape()[0];
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(format!("group_norm: {groups} groups for {c} channels")));
        }
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape(format!(
                "group_norm: gamma {:?} / beta {:?} for {c} channels",
                gv.shape(),
                bv.shape()
            )));
        }
        let spatial = xv.len() / c;
        let per_group = c / groups * spatial;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; groups];
        for (gi, (src, dst)) in xv.data().chunks_exact(per_group).zip(xhat.chunks_exact_mut(per_group)).enumerate() {
            let n = per_group as f64;
            let mean = src.iter().sum::<f64>() / n;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            inv_std[gi] = is;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
        }
        let mut y = vec![0.0; xv.len()];
        for ch in 0..c {
            let (ga, be) = (gv.data()[ch], bv.data()[ch]);
            for (d, s) in y[ch * spatial..(ch + 1) * spatial].iter_mut().zip(&xhat[ch * spatial..(ch + 1) * spatial]) {
                *d = ga * s + be;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), y)?;
        let shape = xv.shape().to_vec();
        Ok(self.custom(
            out,
            &[x, gamma, beta],
            Some(Box::new(move |g, needs| {
                let gd = g.data();
                let gx = needs[0].then(|| {
                    let mut dx = vec![0.0; gd.len()];
                    let cpg = c / groups;
                    for gi in 0..groups {
                        let lo = gi * per_group;
                        let n = per_group as f64;
                        let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                        for i in 0..per_group {
                            let ch = gi * cpg + i / spatial;
                            let dxh = gd[lo + i] * gv.data()[ch];
                            sum_d += dxh;
                            sum_dx += dxh * xhat[lo + i];
                        }
                        let is = inv_std[gi];
                        for i in 0..per_group {
                            let ch = gi * cpg + i / spatial;
                            let dxh = gd[lo + i] * gv.data()[ch];
                            dx[lo + i] = is / n * (n * dxh - sum_d - xhat[lo + i] * sum_dx);
                        }
                    }
                    Tensor::new(shape.clone(), dx).unwrap()
                });
                let ggamma = needs[1].then(|| {
                    let d = (0..c)
                        .map(|ch| {
                            let r = ch * spatial..(ch + 1) * spatial;
                            gd[r.clone()].iter().zip(&xhat[r]).map(|(a, b)| a * b).sum()
                        })
                        .collect();
                    Tensor::new(vec![c], d).unwrap()
                });
                let gbeta = needs[2].then(|| {
                    let d = gd.chunks_exact(spatial).map(|ch| ch.iter().sum()).collect();
                    Tensor::new(vec![c], d).unwrap()
                });
                vec![gx, ggamma, gbeta]
            })),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_yields_beta() {
        let g = Graph::new();
        let x = g.constant(Tensor::full(&[4, 3, 5], 7.25));
        let gamma = g.constant(Tensor::new(vec![4], vec![1.0, 2.0, -1.0, 0.5]).unwrap());
        let beta = g.constant(Tensor::new(vec![4], vec![0.1, -0.2, 0.3, 0.4]).unwrap());
        let y = g.group_norm(x, 2, gamma, beta).unwrap();
        let v = g.value(y);
        for ch in 0..4 {
            for s in 0..15 {
                assert_eq!(v.data()[ch * 15 + s], [0.1, -0.2, 0.3, 0.4][ch]);
            }
        }
    }

    #[test]
    fn normalizes_each_group() {
        let g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[4, 2, 3], |i| (i * i) as f64 * 0.37 - 3.0));
        let y = g
            .group_norm(x, 2, g.constant(Tensor::full(&[4], 1.0)), g.constant(Tensor::zeros(&[4])))
            .unwrap();
        for grp in g.value(y).data().chunks(12) {
            let mean: f64 = grp.iter().sum::<f64>() / 12.0;
            let var: f64 = grp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn groups_must_divide_channels() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[6, 2, 2]));
        let p = g.constant(Tensor::zeros(&[6]));
        assert!(g.group_norm(x, 4, p, p).is_err());
    }
}
