//! Categorical and diagonal-Gaussian action distributions with the closed-form
//! derivatives the trainers need.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{EspError, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub fn logsumexp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Categorical {
    log_probs: Vec<f64>,
}

impl Categorical {
    pub fn new(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() || logits.iter().any(|l| !l.is_finite()) {
            return Err(EspError::Numerical(format!("non-finite or empty logits {logits:?}")));
        }
        let lse = logsumexp(logits);
        Ok(Categorical { log_probs: logits.iter().map(|l| l - lse).collect() })
    }

    /// The distribution `q(a) = p(perm[a])`, with log-probabilities moved
    /// rather than renormalized.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.len() || perm.iter().any(|&p| p >= self.len()) {
            return Err(EspError::invalid(format!("{perm:?} is not a permutation of {} actions", self.len())));
        }
        Ok(Categorical { log_probs: perm.iter().map(|&p| self.log_probs[p]).collect() })
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }

    pub fn log_prob(&self, action: usize) -> Result<f64> {
        self.log_probs
            .get(action)
            .copied()
            .ok_or_else(|| EspError::invalid(format!("action {action} out of range for {} choices", self.len())))
    }

    pub fn entropy(&self) -> f64 {
        -self.log_probs.iter().map(|l| l.exp() * l).sum::<f64>()
    }

    /// KL(self ‖ other).
    pub fn kl(&self, other: &Categorical) -> Result<f64> {
        self.check_same(other)?;
        Ok(self.log_probs.iter().zip(&other.log_probs).map(|(lp, lq)| lp.exp() * (lp - lq)).sum())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, l) in self.log_probs.iter().enumerate() {
            acc += l.exp();
            if u < acc {
                return a;
            }
        }
        self.len() - 1
    }

    /// Most probable action, lowest index on ties.
    pub fn mode(&self) -> usize {
        let mut best = 0;
        for (a, l) in self.log_probs.iter().enumerate() {
            if *l > self.log_probs[best] {
                best = a;
            }
        }
        best
    }

    /// ∂ log p(a) / ∂ logits = e_a − p.
    pub fn grad_log_prob(&self, action: usize) -> Result<Vec<f64>> {
        self.log_prob(action)?;
        Ok(self.log_probs.iter().enumerate().map(|(j, l)| if j == action { 1.0 } else { 0.0 } - l.exp()).collect())
    }

    /// ∂H / ∂ logits_j = −p_j (log p_j + H).
    pub fn grad_entropy(&self) -> Vec<f64> {
        let h = self.entropy();
        self.log_probs.iter().map(|l| -l.exp() * (l + h)).collect()
    }

    /// Gradients of KL(self ‖ other) w.r.t. (self logits, other logits).
    pub fn grad_kl(&self, other: &Categorical) -> Result<(Vec<f64>, Vec<f64>)> {
        let kl = self.kl(other)?;
        let d_self = self.log_probs.iter().zip(&other.log_probs).map(|(lp, lq)| lp.exp() * (lp - lq - kl)).collect();
        let d_other = self.log_probs.iter().zip(&other.log_probs).map(|(lp, lq)| lq.exp() - lp.exp()).collect();
        Ok((d_self, d_other))
    }

    fn check_same(&self, other: &Categorical) -> Result<()> {
        if self.len() != other.len() {
            return Err(EspError::invalid(format!("distributions over {} and {} actions", self.len(), other.len())));
        }
        Ok(())
    }
}

/// Diagonal Gaussian; log-std values are clamped to [`LOG_STD_MIN`, `LOG_STD_MAX`].
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_std: Vec<f64>,
}

/// Gradients w.r.t. the mean and log-std of a Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrad {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: &[f64], log_std: &[f64]) -> Result<Self> {
        if mean.len() != log_std.len() || mean.is_empty() {
            return Err(EspError::invalid("mean and log-std must have equal non-zero length"));
        }
        if mean.iter().chain(log_std).any(|v| !v.is_finite()) {
            return Err(EspError::Numerical("non-finite Gaussian parameters".into()));
        }
        Ok(DiagGaussian {
            mean: mean.to_vec(),
            log_std: log_std.iter().map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len())?;
        Ok(self
            .mean
            .iter()
            .zip(&self.log_std)
            .zip(x)
            .map(|((m, l), x)| {
                let z = (x - m) / l.exp();
                -0.5 * z * z - l - 0.5 * LN_2PI
            })
            .sum())
    }

    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|l| l + 0.5 * (1.0 + LN_2PI)).sum()
    }

    /// Closed-form KL(self ‖ other).
    pub fn kl(&self, other: &DiagGaussian) -> Result<f64> {
        self.check_dim(other.dim())?;
        Ok((0..self.dim())
            .map(|k| {
                let (l1, l2) = (self.log_std[k], other.log_std[k]);
                let d = self.mean[k] - other.mean[k];
                l2 - l1 + ((2.0 * l1).exp() + d * d) / (2.0 * (2.0 * l2).exp()) - 0.5
            })
            .sum())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mean.iter().zip(&self.log_std).map(|(m, l)| m + l.exp() * rng.sample::<f64, _>(StandardNormal)).collect()
    }

    pub fn grad_log_prob(&self, x: &[f64]) -> Result<GaussianGrad> {
        self.check_dim(x.len())?;
        let mut g = GaussianGrad { mean: vec![0.0; self.dim()], log_std: vec![0.0; self.dim()] };
        for k in 0..self.dim() {
            let s = self.log_std[k].exp();
            let z = (x[k] - self.mean[k]) / s;
            g.mean[k] = z / s;
            g.log_std[k] = z * z - 1.0;
        }
        Ok(g)
    }

    pub fn grad_entropy(&self) -> GaussianGrad {
        GaussianGrad { mean: vec![0.0; self.dim()], log_std: vec![1.0; self.dim()] }
    }

    /// Gradients of KL(self ‖ other) w.r.t. (self, other) parameters.
    pub fn grad_kl(&self, other: &DiagGaussian) -> Result<(GaussianGrad, GaussianGrad)> {
        self.check_dim(other.dim())?;
        let n = self.dim();
        let mut gs = GaussianGrad { mean: vec![0.0; n], log_std: vec![0.0; n] };
        let mut go = gs.clone();
        for k in 0..n {
            let (l1, l2) = (self.log_std[k], other.log_std[k]);
            let d = self.mean[k] - other.mean[k];
            let v2 = (2.0 * l2).exp();
            gs.mean[k] = d / v2;
            go.mean[k] = -d / v2;
            gs.log_std[k] = -1.0 + (2.0 * l1).exp() / v2;
            go.log_std[k] = 1.0 - ((2.0 * l1).exp() + d * d) / v2;
        }
        Ok((gs, go))
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.dim() {
            return Err(EspError::invalid(format!("expected {} dimensions, got {n}", self.dim())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|k| {
                let mut a = x.to_vec();
                let mut b = x.to_vec();
                a[k] += h;
                b[k] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn uniform_logits() {
        let c = Categorical::new(&[0.3; 5]).unwrap();
        for a in 0..5 {
            assert!((c.log_prob(a).unwrap() + 5f64.ln()).abs() < 1e-15);
        }
        assert!(c.log_prob(5).is_err());
        assert!(Categorical::new(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn kl_matches_direct_sum() {
        let p = [0.5, 0.3, 0.2];
        let q = [0.2, 0.2, 0.6];
        let lp: Vec<f64> = p.iter().map(|v: &f64| v.ln()).collect();
        let lq: Vec<f64> = q.iter().map(|v: &f64| v.ln()).collect();
        let expected = 0.5 * (0.5f64 / 0.2).ln() + 0.3 * (0.3f64 / 0.2).ln() + 0.2 * (0.2f64 / 0.6).ln();
        let kl = Categorical::new(&lp).unwrap().kl(&Categorical::new(&lq).unwrap()).unwrap();
        assert!((kl - expected).abs() < 1e-14);
        let c = Categorical::new(&lp).unwrap();
        assert_eq!(c.kl(&c).unwrap(), 0.0);
        assert!(c.kl(&Categorical::new(&[0.0; 4]).unwrap()).is_err());
    }

    #[test]
    fn kl_gradient_vanishes_at_equal_arguments() {
        let c = Categorical::new(&[0.4, -1.2, 2.0, 0.1, 0.0]).unwrap();
        let (ds, dq) = c.grad_kl(&c).unwrap();
        // Shared logits receive the sum of both branch gradients.
        for (a, b) in ds.iter().zip(&dq) {
            assert!((a + b).abs() < 1e-15);
        }
    }

    #[test]
    fn categorical_gradients_match_finite_differences() {
        let x = [0.4, -1.2, 2.0, 0.1, 0.0];
        let y = [-0.3, 0.8, 0.5, -1.0, 1.1];
        let c = Categorical::new(&x).unwrap();
        let o = Categorical::new(&y).unwrap();
        close(&c.grad_log_prob(2).unwrap(), &fd(|v| Categorical::new(v).unwrap().log_prob(2).unwrap(), &x), 1e-8);
        close(&c.grad_entropy(), &fd(|v| Categorical::new(v).unwrap().entropy(), &x), 1e-8);
        let (ds, dq) = c.grad_kl(&o).unwrap();
        close(&ds, &fd(|v| Categorical::new(v).unwrap().kl(&o).unwrap(), &x), 1e-8);
        close(&dq, &fd(|v| c.kl(&Categorical::new(v).unwrap()).unwrap(), &y), 1e-8);
    }

    #[test]
    fn gaussian_closed_forms() {
        let std_normal = DiagGaussian::new(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(std_normal.kl(&std_normal).unwrap(), 0.0);
        assert!((std_normal.log_prob(&[0.0, 0.0]).unwrap() + LN_2PI).abs() < 1e-15);
        let shifted = DiagGaussian::new(&[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!((shifted.kl(&std_normal).unwrap() - 1.0).abs() < 1e-15);
        let one = DiagGaussian::new(&[1.0], &[0.0]).unwrap();
        assert!((one.kl(&DiagGaussian::new(&[0.0], &[0.0]).unwrap()).unwrap() - 0.5).abs() < 1e-15);
        let clamped = DiagGaussian::new(&[0.0], &[9.0]).unwrap();
        assert_eq!(clamped.log_std(), &[LOG_STD_MAX]);
        assert!(DiagGaussian::new(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn gaussian_gradients_match_finite_differences() {
        let m = [0.3, -0.7];
        let l = [-0.2, 0.4];
        let x = [0.9, -0.1];
        let g = DiagGaussian::new(&m, &l).unwrap();
        let o = DiagGaussian::new(&[-0.5, 0.2], &[0.1, -0.6]).unwrap();
        let lp = g.grad_log_prob(&x).unwrap();
        close(&lp.mean, &fd(|v| DiagGaussian::new(v, &l).unwrap().log_prob(&x).unwrap(), &m), 1e-8);
        close(&lp.log_std, &fd(|v| DiagGaussian::new(&m, v).unwrap().log_prob(&x).unwrap(), &l), 1e-8);
        let (gs, go) = g.grad_kl(&o).unwrap();
        close(&gs.mean, &fd(|v| DiagGaussian::new(v, &l).unwrap().kl(&o).unwrap(), &m), 1e-8);
        close(&gs.log_std, &fd(|v| DiagGaussian::new(&m, v).unwrap().kl(&o).unwrap(), &l), 1e-8);
        close(&go.mean, &fd(|v| g.kl(&DiagGaussian::new(v, o.log_std()).unwrap()).unwrap(), o.mean()), 1e-8);
        close(&go.log_std, &fd(|v| g.kl(&DiagGaussian::new(o.mean(), v).unwrap()).unwrap(), o.log_std()), 1e-8);
        close(&g.grad_entropy().log_std, &fd(|v| DiagGaussian::new(&m, v).unwrap().entropy(), &l), 1e-8);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let c = Categorical::new(&[0.1, 0.5, -0.3]).unwrap();
        let g = DiagGaussian::new(&[0.0, 1.0], &[-1.0, 0.0]).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| (c.sample(&mut rng), g.sample(&mut rng))).collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(p in prop::collection::vec(-4.0f64..4.0, 5), q in prop::collection::vec(-4.0f64..4.0, 5)) {
            let kl = Categorical::new(&p).unwrap().kl(&Categorical::new(&q).unwrap()).unwrap();
            prop_assert!(kl >= -1e-12);
            let probs: f64 = Categorical::new(&p).unwrap().probs().iter().sum();
            prop_assert!((probs - 1.0).abs() < 1e-9);
        }

        #[test]
        fn gaussian_kl_is_non_negative(m in prop::collection::vec(-3.0f64..3.0, 4), l in prop::collection::vec(-5.0f64..2.0, 4)) {
            let a = DiagGaussian::new(&m[..2], &l[..2]).unwrap();
            let b = DiagGaussian::new(&m[2..], &l[2..]).unwrap();
            prop_assert!(a.kl(&b).unwrap() >= -1e-12);
        }
    }
}
