use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Attention probabilities `softmax(q k^T / sqrt(d))` for a single head.
pub fn attention_probs(q: ArrayView2<f64>, k: ArrayView2<f64>) -> Array2<f64> {
    let scale = 1.0 / (k.ncols() as f64).sqrt();
    softmax_rows(&(q.dot(&k.t()) * scale))
}

/// `softmax(q k^T / sqrt(d)) v`: frame `i`'s queries against frame `j`'s keys
/// and values. `d` is the key width.
pub fn cross_frame_attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Result<Array2<f64>> {
    if q.ncols() != k.ncols() {
        return Err(Error::shape(&[q.nrows(), k.ncols()], q.shape()));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::shape(&[k.nrows(), v.ncols()], v.shape()));
    }
    Ok(attention_probs(q.view(), k.view()).dot(v))
}

/// Splits the feature axis into `heads` equal blocks, attends per block and
/// concatenates the results.
pub fn multi_head_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    heads: usize,
) -> Result<Array2<f64>> {
    check_heads(q, k, v, heads)?;
    let dh = q.ncols() / heads;
    let dv = v.ncols() / heads;
    let mut out = Array2::zeros((q.nrows(), v.ncols()));
    for h in 0..heads {
        let qh = q.slice(s![.., h * dh..(h + 1) * dh]).to_owned();
        let kh = k.slice(s![.., h * dh..(h + 1) * dh]).to_owned();
        let vh = v.slice(s![.., h * dv..(h + 1) * dv]).to_owned();
        let o = cross_frame_attention(&qh, &kh, &vh)?;
        out.slice_mut(s![.., h * dv..(h + 1) * dv]).assign(&o);
    }
    Ok(out)
}

/// Per-head probability maps, `(heads, queries, keys)`.
pub fn multi_head_probs(q: &Array2<f64>, k: &Array2<f64>, heads: usize) -> Vec<Array2<f64>> {
    let dh = q.ncols() / heads;
    (0..heads)
        .map(|h| {
            let qh = q.slice(s![.., h * dh..(h + 1) * dh]).to_owned();
            let kh = k.slice(s![.., h * dh..(h + 1) * dh]).to_owned();
            attention_probs(qh.view(), kh.view())
        })
        .collect()
}

fn check_heads(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>, heads: usize) -> Result<()> {
    if heads == 0 || !q.ncols().is_multiple_of(heads) || !v.ncols().is_multiple_of(heads) {
        return Err(Error::param("heads", format!("{heads} does not divide feature width")));
    }
    if q.ncols() != k.ncols() {
        return Err(Error::shape(&[k.nrows(), q.ncols()], k.shape()));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::shape(&[k.nrows(), v.ncols()], v.shape()));
    }
    Ok(())
}

/// Vector-Jacobian product of [`multi_head_attention`]: returns `(dq, dk, dv)`.
pub(crate) fn multi_head_attention_backward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    heads: usize,
    d_out: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let dh = q.ncols() / heads;
    let dv_w = v.ncols() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    for h in 0..heads {
        let qh = q.slice(s![.., h * dh..(h + 1) * dh]).to_owned();
        let kh = k.slice(s![.., h * dh..(h + 1) * dh]).to_owned();
        let vh = v.slice(s![.., h * dv_w..(h + 1) * dv_w]).to_owned();
        let doh = d_out.slice(s![.., h * dv_w..(h + 1) * dv_w]).to_owned();
        let p = attention_probs(qh.view(), kh.view());
        dv.slice_mut(s![.., h * dv_w..(h + 1) * dv_w]).assign(&p.t().dot(&doh));
        let dp = doh.dot(&vh.t());
        // softmax backward: ds = p * (dp - rowsum(dp * p))
        let mut ds = &dp * &p;
        let rows = ds.sum_axis(Axis(1));
        for (mut row, (prow, r)) in ds.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0)).zip(rows.iter())) {
            row.zip_mut_with(&prow, |d, &pv| *d -= pv * r);
        }
        let ds = ds * scale;
        dq.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&ds.dot(&kh));
        dk.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&ds.t().dot(&qh));
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(rng))
    }

    #[test]
    fn singleton_softmax_returns_value() {
        let q = Array2::from_elem((1, 3), 0.7);
        let k = Array2::from_elem((1, 3), -1.2);
        let v = Array2::from_shape_vec((1, 2), vec![3.0, -4.0]).unwrap();
        assert_eq!(cross_frame_attention(&q, &k, &v).unwrap(), v);
    }

    #[test]
    fn rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = attention_probs(randn(&mut rng, 6, 4).view(), randn(&mut rng, 9, 4).view());
        for row in p.axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn shape_errors() {
        let a = Array2::zeros((3, 4));
        let b = Array2::zeros((3, 5));
        assert!(cross_frame_attention(&a, &b, &a).is_err());
        assert!(multi_head_attention(&a, &a, &a, 3).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (q, k, v) = (randn(&mut rng, 5, 4), randn(&mut rng, 6, 4), randn(&mut rng, 6, 4));
        let w = randn(&mut rng, 5, 4);
        let loss = |q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>| {
            (multi_head_attention(q, k, v, 2).unwrap() * &w).sum()
        };
        let (dq, dk, dv) = multi_head_attention_backward(&q, &k, &v, 2, &w);
        let h = 1e-5;
        for (which, grad) in [(0, &dq), (1, &dk), (2, &dv)] {
            for idx in [(0, 0), (2, 3), (4, 1)] {
                let mut plus = [q.clone(), k.clone(), v.clone()];
                let mut minus = [q.clone(), k.clone(), v.clone()];
                plus[which][idx] += h;
                minus[which][idx] -= h;
                let fd = (loss(&plus[0], &plus[1], &plus[2]) - loss(&minus[0], &minus[1], &minus[2])) / (2.0 * h);
                assert!((fd - grad[idx]).abs() < 1e-7, "input {which} {idx:?}: {fd} vs {}", grad[idx]);
            }
        }
    }
}
