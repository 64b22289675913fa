//! Diagonal Gaussian posteriors and the closed forms used on them.

use crate::error::{shape_err, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Mat, Real};

/// Per-row mean and log-variance of a diagonal Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior<T> {
    pub mean: Mat<T>,
    pub log_variance: Mat<T>,
}

impl<T: Real> GaussianPosterior<T> {
    pub fn new(mean: Mat<T>, log_variance: Mat<T>) -> Result<Self> {
        if mean.shape() != log_variance.shape() {
            return Err(shape_err(format!(
                "posterior mean {:?} vs log-variance {:?}",
                mean.shape(),
                log_variance.shape()
            )));
        }
        Ok(GaussianPosterior { mean, log_variance })
    }

    pub fn batch(&self) -> usize {
        self.mean.rows()
    }

    pub fn dim(&self) -> usize {
        self.mean.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.all_finite() && self.log_variance.all_finite()
    }
}

/// `mean + exp(log_variance / 2) * noise`.
pub fn reparameterize<T: Real>(post: &GaussianPosterior<T>, noise: &Mat<T>) -> Result<Mat<T>> {
    if noise.shape() != post.mean.shape() {
        return Err(shape_err(format!("noise {:?} vs posterior {:?}", noise.shape(), post.mean.shape())));
    }
    let half = T::of(0.5);
    let mut z = post.mean.clone();
    for ((zi, &lv), &e) in z.data_mut().iter_mut().zip(post.log_variance.data()).zip(noise.data()) {
        *zi += (lv * half).exp() * e;
    }
    Ok(z)
}

/// Graph version of [`reparameterize`] with constant noise.
pub fn reparameterize_node<T: Real>(g: &mut Graph<'_, T>, mean: NodeId, log_var: NodeId, noise: Mat<T>) -> Result<NodeId> {
    let half = g.scale(log_var, 0.5);
    let std = g.exp(half);
    let eps = g.constant(noise);
    let spread = g.mul(std, eps)?;
    g.add(mean, spread)
}

/// `KL(N(mean, exp(log_variance)) || N(0, I))` per row, summed over dimensions.
pub fn kl_to_standard_normal<T: Real>(post: &GaussianPosterior<T>) -> Vec<T> {
    let half = T::of(0.5);
    (0..post.batch())
        .map(|i| {
            post.mean
                .row(i)
                .iter()
                .zip(post.log_variance.row(i))
                .map(|(&m, &lv)| half * (m * m + lv.exp() - T::one() - lv))
                .sum()
        })
        .collect()
}

/// Graph version of [`kl_to_standard_normal`], averaged over the batch.
pub fn mean_kl_node<T: Real>(g: &mut Graph<'_, T>, mean: NodeId, log_var: NodeId) -> Result<NodeId> {
    let rows = g.value(mean).rows().max(1);
    let m2 = g.square(mean);
    let ev = g.exp(log_var);
    let a = g.add(m2, ev)?;
    let b = g.sub(a, log_var)?;
    let c = g.add_scalar(b, -1.0);
    let s = g.sum_all(c);
    Ok(g.scale(s, 0.5 / rows as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn post(mean: &[f64], lv: &[f64]) -> GaussianPosterior<f64> {
        GaussianPosterior::new(
            Mat::from_vec(1, mean.len(), mean.to_vec()).unwrap(),
            Mat::from_vec(1, lv.len(), lv.to_vec()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn reparameterize_cases() {
        let p = post(&[0.3, -1.2], &[0.7, -0.4]);
        assert_eq!(reparameterize(&p, &Mat::zeros(1, 2)).unwrap(), p.mean);
        let n = Mat::from_vec(1, 2, vec![0.5, -2.0]).unwrap();
        assert_eq!(reparameterize(&post(&[0.0, 0.0], &[0.0, 0.0]), &n).unwrap(), n);
        let z = reparameterize(&post(&[1.0], &[2.0 * 2f64.ln()]), &Mat::scalar(1.0)).unwrap();
        assert!((z.item() - 3.0).abs() < 1e-12);
        assert!(reparameterize(&p, &Mat::zeros(1, 3)).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_to_standard_normal(&post(&[0.0], &[0.0]))[0], 0.0);
        assert!((kl_to_standard_normal(&post(&[1.0], &[0.0]))[0] - 0.5).abs() < 1e-12);
        let want = 0.5 * (2.0 - 1.0 - 2f64.ln());
        assert!((kl_to_standard_normal(&post(&[0.0], &[2f64.ln()]))[0] - want).abs() < 1e-12);
        assert!((want - 0.1534).abs() < 1e-4);
    }

    #[test]
    fn kl_node_matches_closed_form() {
        let p = GaussianPosterior::new(
            Mat::from_vec(2, 2, vec![0.1, 0.2, -0.3, 0.4]).unwrap(),
            Mat::from_vec(2, 2, vec![-0.5, 0.1, 0.3, 0.0]).unwrap(),
        )
        .unwrap();
        let want: f64 = kl_to_standard_normal(&p).iter().sum::<f64>() / 2.0;
        let mut g = Graph::detached();
        let m = g.constant(p.mean.clone());
        let l = g.constant(p.log_variance.clone());
        let k = mean_kl_node(&mut g, m, l).unwrap();
        assert!((g.value(k).item() - want).abs() < 1e-12);
    }

    #[test]
    fn mismatched_posterior_rejected() {
        assert!(GaussianPosterior::new(Mat::<f32>::zeros(1, 2), Mat::zeros(1, 3)).is_err());
    }
}
