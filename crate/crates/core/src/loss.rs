//! Classification losses over row-wise logits `[m, classes]`.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Label value that marks a row as ignored when no row should be skipped.
pub const NO_IGNORE: usize = usize::MAX;

fn rows(g: &Graph, x: Var, labels: &[usize], ignore: usize, what: &str) -> Result<(usize, usize)> {
    let s = g.shape(x);
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape(format!("{what}: input {s:?} for {} labels", labels.len())));
    }
    if let Some(i) = labels.iter().position(|&l| l >= s[1] && l != ignore) {
        return Err(Error::Data(format!(
            "{what}: label {} at row {i} out of range for {} classes",
            labels[i], s[1]
        )));
    }
    Ok((s[0], s[1]))
}

/// Numerically stable softmax of one row into `out`.
pub fn softmax_row(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Row-wise softmax.
pub fn softmax(g: &Graph, x: Var) -> Result<Var> {
    let xv = g.value(x);
    if xv.rank() != 2 {
        return Err(Error::shape(format!("softmax: input {:?}", xv.shape())));
    }
    let c = xv.shape()[1].max(1);
    let mut p = vec![0.0; xv.len()];
    for (row, out) in xv.data().chunks_exact(c).zip(p.chunks_exact_mut(c)) {
        softmax_row(row, out);
    }
    let value = Tensor::new(xv.shape().to_vec(), p)?;
    let probs = value.clone();
    Ok(g.custom(
        value,
        &[x],
        Some(Box::new(move |gr, _| {
            let mut gx = vec![0.0; probs.len()];
            for ((pr, gy), gx) in probs
                .data()
                .chunks_exact(c)
                .zip(gr.data().chunks_exact(c))
                .zip(gx.chunks_exact_mut(c))
            {
                let dot: f64 = pr.iter().zip(gy).map(|(p, g)| p * g).sum();
                for ((o, p), g) in gx.iter_mut().zip(pr).zip(gy) {
                    *o = p * (g - dot);
                }
            }
            vec![Some(Tensor::new(probs.shape().to_vec(), gx).unwrap())]
        })),
    ))
}

/// Mean negative log-likelihood of the true class over rows whose label is
/// not `ignore`; 0 when every row is ignored.
pub fn cross_entropy(g: &Graph, logits: Var, labels: &[usize], ignore: usize) -> Result<Var> {
    let (m, c) = rows(g, logits, labels, ignore, "cross_entropy")?;
    let xv = g.value(logits);
    let valid = labels.iter().filter(|&&l| l != ignore).count();
    let mut loss = 0.0;
    let mut grad = vec![0.0; m * c];
    let mut p = vec![0.0; c];
    for (i, &l) in labels.iter().enumerate() {
        if l == ignore {
            continue;
        }
        let row = &xv.data()[i * c..(i + 1) * c];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        loss += lse - row[l];
        softmax_row(row, &mut p);
        let dst = &mut grad[i * c..(i + 1) * c];
        for (j, d) in dst.iter_mut().enumerate() {
            *d = (p[j] - if j == l { 1.0 } else { 0.0 }) / valid as f64;
        }
    }
    let loss = if valid == 0 { 0.0 } else { loss / valid as f64 };
    let shape = vec![m, c];
    Ok(g.custom(
        Tensor::scalar(loss),
        &[logits],
        Some(Box::new(move |gr, _| {
            let s = gr.item();
            vec![Some(Tensor::new(shape.clone(), grad.iter().map(|v| v * s).collect()).unwrap())]
        })),
    ))
}

/// Gradient of the Lovász extension of the Jaccard loss with respect to
/// errors sorted in decreasing order; `fg` is the foreground indicator in
/// that order.
pub fn lovasz_grad(fg: &[f64]) -> Vec<f64> {
    let gts: f64 = fg.iter().sum();
    let mut out = Vec::with_capacity(fg.len());
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &f in fg {
        cum_fg += f;
        cum_bg += 1.0 - f;
        let inter = gts - cum_fg;
        let union = gts + cum_bg;
        let jac = 1.0 - inter / union;
        out.push(jac - prev);
        prev = jac;
    }
    out
}

/// Lovász-softmax over `probs: [m, classes]`, averaged over classes that
/// occur among the non-ignored labels. 0 when no class is present.
pub fn lovasz_softmax(g: &Graph, probs: Var, labels: &[usize], ignore: usize) -> Result<Var> {
    let (m, c) = rows(g, probs, labels, ignore, "lovasz_softmax")?;
    let pv = g.value(probs);
    let keep: Vec<usize> = (0..m).filter(|&i| labels[i] != ignore).collect();
    let present: Vec<usize> = (0..c).filter(|&k| keep.iter().any(|&i| labels[i] == k)).collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; m * c];
    let np = present.len().max(1) as f64;
    for &k in &present {
        let mut errs: Vec<(f64, usize, f64)> = keep
            .iter()
            .map(|&i| {
                let fg = if labels[i] == k { 1.0 } else { 0.0 };
                ((fg - pv.data()[i * c + k]).abs(), i, fg)
            })
            .collect();
        errs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let fg: Vec<f64> = errs.iter().map(|e| e.2).collect();
        let lg = lovasz_grad(&fg);
        for ((e, i, f), w) in errs.into_iter().zip(lg) {
            loss += e * w / np;
            // d|fg - p| / dp = -1 for foreground rows, +1 otherwise
            let sign = if f == 1.0 { -1.0 } else { 1.0 };
            grad[i * c + k] += sign * w / np;
        }
    }
    let shape = vec![m, c];
    Ok(g.custom(
        Tensor::scalar(if present.is_empty() { 0.0 } else { loss }),
        &[probs],
        Some(Box::new(move |gr, _| {
            let s = gr.item();
            vec![Some(Tensor::new(shape.clone(), grad.iter().map(|v| v * s).collect()).unwrap())]
        })),
    ))
}

/// Cross-entropy on the logits plus Lovász-softmax on their softmax.
pub fn ce_lovasz(g: &Graph, logits: Var, labels: &[usize], ignore: usize) -> Result<(Var, Var)> {
    let ce = cross_entropy(g, logits, labels, ignore)?;
    let p = softmax(g, logits)?;
    let lz = lovasz_softmax(g, p, labels, ignore)?;
    Ok((ce, lz))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check, GradCheckOptions};

    fn ce(x: Tensor, labels: &[usize], ignore: usize) -> f64 {
        let g = Graph::new();
        let v = g.leaf(x);
        g.value(cross_entropy(&g, v, labels, ignore).unwrap()).item()
    }

    #[test]
    fn uniform_and_saturated() {
        assert!((ce(Tensor::zeros(&[3, 4]), &[0, 1, 3], NO_IGNORE) - 4f64.ln()).abs() < 1e-15);
        let mut x = Tensor::zeros(&[1, 5]);
        x.data_mut()[2] = 30.0;
        assert!(ce(x, &[2], NO_IGNORE) < 1e-9);
    }

    #[test]
    fn ignored_rows() {
        assert_eq!(ce(Tensor::zeros(&[2, 3]), &[7, 7], 7), 0.0);
        let g = Graph::new();
        let v = g.leaf(Tensor::zeros(&[1, 3]));
        assert!(matches!(cross_entropy(&g, v, &[3], NO_IGNORE), Err(Error::Data(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[3, 4], |i| i as f64 * 1.7 - 9.0));
        let p = g.value(softmax(&g, x).unwrap());
        for row in p.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    fn lovasz(p: Tensor, labels: &[usize]) -> f64 {
        let g = Graph::new();
        let v = g.leaf(p);
        g.value(lovasz_softmax(&g, v, labels, NO_IGNORE).unwrap()).item()
    }

    #[test]
    fn lovasz_cases() {
        let perfect = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(lovasz(perfect, &[0, 1, 0]), 0.0);
        let wrong = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(lovasz(wrong, &[0]), 1.0);
    }

    #[test]
    fn gradients() {
        let x = Tensor::from_fn(&[6, 4], |i| ((i * 37) % 11) as f64 * 0.23 - 1.1);
        let labels = [0, 3, 3, 1, 9, 0];
        let f = |g: &Graph, v: &[Var]| -> Result<Var> {
            let (a, b) = ce_lovasz(g, v[0], &labels, 9)?;
            g.add(a, b)
        };
        let r = finite_diff_check(f, &[x], &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
