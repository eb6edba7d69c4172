use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Offset of the cosine schedule; keeps the first betas away from zero.
const COSINE_S: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Forward-process coefficients for `T` training steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f32>,
    pub alphas: Vec<f32>,
    pub alpha_bars: Vec<f32>,
}

/// Cosine schedule: `alpha_bar(t) = f(t) / f(0)` with
/// `f(t) = cos^2(((t / T) + s) / (1 + s) * pi / 2)`, betas clipped at 0.999.
pub fn make_schedule(t_train: usize) -> Result<NoiseSchedule> {
    if t_train < 2 {
        return Err(Error::contract(format!("T_train must be >= 2, got {t_train}")));
    }
    let f = |t: f64| (((t / t_train as f64) + COSINE_S) / (1.0 + COSINE_S) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let mut betas = Vec::with_capacity(t_train);
    let mut alphas = Vec::with_capacity(t_train);
    let mut alpha_bars = Vec::with_capacity(t_train);
    let mut running = 1.0f64;
    for k in 0..t_train {
        let beta = (1.0 - f(k as f64 + 1.0) / f(k as f64)).clamp(1e-8, MAX_BETA) as f32;
        let alpha = 1.0 - beta;
        running *= alpha as f64;
        betas.push(beta);
        alphas.push(alpha);
        alpha_bars.push(running as f32);
    }
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `sqrt(alpha_bar_k) * a + sqrt(1 - alpha_bar_k) * eps`, row-wise with
    /// one step per row.
    pub fn add_noise(&self, chunks: &Tensor, eps: &Tensor, ks: &[usize]) -> Result<Tensor> {
        if chunks.shape() != eps.shape() {
            return Err(Error::dim("add_noise", format!("{:?}", chunks.shape()), format!("{:?}", eps.shape())));
        }
        if ks.len() != chunks.rows() {
            return Err(Error::dim("add_noise steps", chunks.rows(), ks.len()));
        }
        let mut out = chunks.clone();
        let c = chunks.cols();
        for (r, &k) in ks.iter().enumerate() {
            let ab = *self
                .alpha_bars
                .get(k)
                .ok_or_else(|| Error::contract(format!("diffusion step {k} outside [0, {})", self.len())))?;
            let row = &mut out.data_mut()[r * c..(r + 1) * c];
            add_noise_row(row, &eps.data()[r * c..(r + 1) * c], ab);
        }
        Ok(out)
    }
}

/// In-place closed form for one row at cumulative coefficient `alpha_bar`.
pub fn add_noise_row(a: &mut [f32], eps: &[f32], alpha_bar: f32) {
    let (s, n) = (alpha_bar.sqrt(), (1.0 - alpha_bar).max(0.0).sqrt());
    a.iter_mut().zip(eps).for_each(|(a, e)| *a = s * *a + n * e);
}

/// Descending subset of training steps visited by the sampler.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceSchedule {
    pub steps: Vec<usize>,
}

impl InferenceSchedule {
    /// `n` steps `floor(i * T / n)` for `i = n-1 .. 0`.
    pub fn strided(t_train: usize, n: usize) -> Result<Self> {
        if n == 0 || n > t_train {
            return Err(Error::contract(format!("inference steps {n} not in [1, {t_train}]")));
        }
        Ok(Self {
            steps: (0..n).rev().map(|i| i * t_train / n).collect(),
        })
    }

    /// The step visited after `k`, or `None` after the final one.
    pub fn next(&self, k: usize) -> Result<Option<usize>> {
        let pos = self
            .steps
            .iter()
            .position(|&s| s == k)
            .ok_or_else(|| Error::contract(format!("step {k} is not in the inference schedule")))?;
        Ok(self.steps.get(pos + 1).copied())
    }
}

/// Deterministic (`eta = 0`) strided reverse update of one row given the
/// predicted noise. The clean-sample estimate is clipped to `[-1, 1]`; on
/// the final step it is returned directly.
pub fn ddim_update(a_k: &[f32], eps_hat: &[f32], ab: f32, ab_prev: Option<f32>) -> Vec<f32> {
    let (s, n) = (ab.sqrt(), (1.0 - ab).max(0.0).sqrt());
    let x0: Vec<f32> = a_k
        .iter()
        .zip(eps_hat)
        .map(|(a, e)| ((a - n * e) / s).clamp(-1.0, 1.0))
        .collect();
    match ab_prev {
        None => x0,
        Some(abp) => {
            let (sp, np) = (abp.sqrt(), (1.0 - abp).max(0.0).sqrt());
            x0.iter().zip(eps_hat).map(|(x, e)| sp * x + np * e).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifty_steps_decrease_from_near_one() {
        let s = make_schedule(50).unwrap();
        assert_eq!(s.len(), 50);
        assert!(s.alpha_bars[0] > 0.99);
        assert!(s.alpha_bars[49] < 0.05);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn two_steps_have_valid_betas() {
        let s = make_schedule(2).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.betas.iter().all(|&b| b > 0.0 && b < 1.0));
        assert!(make_schedule(1).is_err());
    }

    #[test]
    fn alphas_complement_betas() {
        for t in [2, 7, 50, 100] {
            let s = make_schedule(t).unwrap();
            assert!(s.alphas.iter().zip(&s.betas).all(|(a, b)| a + b == 1.0));
        }
    }

    #[test]
    fn add_noise_closed_form() {
        let mut a = vec![1.0, 0.0];
        add_noise_row(&mut a, &[0.0, 1.0], 0.25);
        assert!((a[0] - 0.5).abs() < 1e-6 && (a[1] - 0.866_025_4).abs() < 1e-6);
        let mut a = vec![0.3, -0.2];
        add_noise_row(&mut a, &[0.9, 0.1], 1.0);
        assert_eq!(a, vec![0.3, -0.2]);
        add_noise_row(&mut a, &[0.9, 0.1], 0.0);
        assert_eq!(a, vec![0.9, 0.1]);
    }

    #[test]
    fn add_noise_checks_shapes() {
        let s = make_schedule(10).unwrap();
        let a = Tensor::zeros(&[2, 3]);
        assert!(s.add_noise(&a, &Tensor::zeros(&[2, 2]), &[0, 1]).is_err());
        assert!(s.add_noise(&a, &Tensor::zeros(&[2, 3]), &[0]).is_err());
        assert!(s.add_noise(&a, &Tensor::zeros(&[2, 3]), &[0, 10]).is_err());
    }

    #[test]
    fn sixteen_of_fifty_is_a_stride_subsample() {
        let s = InferenceSchedule::strided(50, 16).unwrap();
        assert_eq!(s.steps.len(), 16);
        assert_eq!(s.steps[15], 0);
        assert!(s.steps.windows(2).all(|w| w[0] > w[1] && w[0] - w[1] <= 4));
        assert!(s.steps.iter().all(|&k| k < 50));
        assert_eq!(s.next(0).unwrap(), None);
        assert!(s.next(1).is_err());
    }

    #[test]
    fn oracle_noise_single_step_inverts_exactly() {
        let ab = 0.3f32;
        let a0 = [0.5f32, -0.25, 0.75];
        let eps = [0.1f32, -1.2, 0.4];
        let mut ak = a0.to_vec();
        add_noise_row(&mut ak, &eps, ab);
        let rec = ddim_update(&ak, &eps, ab, None);
        let expect: Vec<f32> = ak
            .iter()
            .zip(&eps)
            .map(|(a, e)| (a - (1.0 - ab).sqrt() * e) / ab.sqrt())
            .collect();
        assert_eq!(rec, expect);
        for (r, a) in rec.iter().zip(a0) {
            assert!((r - a).abs() < 1e-6);
        }
    }
}
