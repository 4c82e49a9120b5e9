//! Linear-beta noise schedule, forward noising, the noise-prediction loss and
//! the combined objective.

use rand::Rng;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 2e-2).expect("valid defaults")
    }
}

impl DiffusionSchedule {
    /// `steps` betas evenly spaced over `[beta_min, beta_max]`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 || !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Parameter(format!(
                "need steps > 0 and 0 < beta_min <= beta_max < 1, got {steps}, {beta_min}, {beta_max}"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    /// Cumulative product `ᾱ_t = Π_{s≤t} (1 − β_s)`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::Parameter(format!("timestep {t} outside [0, {})", self.steps())));
        }
        Ok(())
    }

    /// Sample `t` uniformly from `[0, T)`.
    pub fn sample_t(&self, rng: &mut impl Rng) -> usize {
        rng.gen_range(0..self.steps())
    }
}

/// `√ᾱ·z0 + √(1−ᾱ)·ε` for an explicit `ᾱ`.
pub fn add_noise_with<T: Scalar>(z0: &Tensor<T>, noise: &Tensor<T>, alpha_bar: f64) -> Result<Tensor<T>> {
    let a = T::lit(alpha_bar.sqrt());
    let b = T::lit((1.0 - alpha_bar).max(0.0).sqrt());
    z0.zip_map(noise, "add_noise", |z, e| a * z + b * e)
}

pub fn add_noise<T: Scalar>(z0: &Tensor<T>, t: usize, noise: &Tensor<T>, schedule: &DiffusionSchedule) -> Result<Tensor<T>> {
    schedule.check_t(t)?;
    add_noise_with(z0, noise, schedule.alpha_bar(t))
}

/// Mean squared error between predicted and true noise, on the tape.
pub fn diffusion_loss_on<T: Scalar>(tape: &mut Tape<T>, predicted: Var, noise: &Tensor<T>) -> Result<Var> {
    if tape.shape(predicted) != noise.shape() {
        return dim_err("diffusion_loss", tape.shape(predicted), noise.shape());
    }
    let e = tape.constant(noise.clone());
    let d = tape.sub(predicted, e)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

pub fn diffusion_loss<T: Scalar>(predicted: &Tensor<T>, noise: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(predicted.clone());
    let l = diffusion_loss_on(&mut tape, p, noise)?;
    Ok(tape.value(l).item()?.to_f64())
}

/// `l_diffusion + λ·l_leffa`.
pub fn combined_loss(l_diffusion: f64, l_leffa: f64, lambda_leffa: f64) -> Result<f64> {
    if !(lambda_leffa >= 0.0) {
        return Err(Error::Parameter(format!("lambda_leffa must be >= 0, got {lambda_leffa}")));
    }
    Ok(if lambda_leffa == 0.0 { l_diffusion } else { l_diffusion + lambda_leffa * l_leffa })
}

/// Tape form of [`combined_loss`]; a missing or zero-weighted flow term
/// leaves the diffusion loss node untouched.
pub fn combined_loss_on<T: Scalar>(tape: &mut Tape<T>, l_diffusion: Var, l_leffa: Option<Var>, lambda_leffa: f64) -> Result<Var> {
    match l_leffa {
        Some(l) if lambda_leffa > 0.0 => {
            let w = tape.scale(l, T::lit(lambda_leffa));
            tape.add(l_diffusion, w)
        }
        _ => Ok(l_diffusion),
    }
}

/// Ancestral DDPM sampling from pure noise with a noise-prediction closure.
pub fn sample<F>(schedule: &DiffusionSchedule, shape: &[usize], rng: &mut impl Rng, mut predict: F) -> Result<Tensor<f32>>
where
    F: FnMut(&Tensor<f32>, usize) -> Result<Tensor<f32>>,
{
    let mut x = Tensor::<f32>::randn(shape.to_vec(), 1.0, rng);
    for t in (0..schedule.steps()).rev() {
        let eps = predict(&x, t)?;
        let beta = schedule.beta(t);
        let ab = schedule.alpha_bar(t);
        let coef = beta / (1.0 - ab).sqrt();
        let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
        let mean = x.zip_map(&eps, "sample", |xv, ev| {
            ((xv as f64 - coef * ev as f64) * inv_sqrt_alpha) as f32
        })?;
        x = if t > 0 {
            let sigma = beta.sqrt();
            let z = Tensor::<f32>::randn(shape.to_vec(), 1.0, rng);
            mean.zip_map(&z, "sample", |m, zv| m + (sigma as f32) * zv)?
        } else {
            mean
        };
        if !x.is_finite() {
            return Err(Error::Numerical(format!("sampler diverged at t = {t}")));
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_is_monotone_and_unit_norm() {
        let s = DiffusionSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert!((s.beta(0) - 1e-4).abs() < 1e-15 && (s.beta(999) - 2e-2).abs() < 1e-15);
        for t in 1..s.steps() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        for t in 0..s.steps() {
            let a = s.alpha_bar(t).sqrt();
            let b = (1.0 - s.alpha_bar(t)).sqrt();
            assert!((a * a + b * b - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn add_noise_limits_and_hand_case() {
        let z0 = Tensor::<f64>::ones(vec![4]);
        let eps = Tensor::<f64>::full(vec![4], -2.0);
        assert_eq!(add_noise_with(&z0, &eps, 1.0).unwrap(), z0);
        assert_eq!(add_noise_with(&z0, &eps, 0.0).unwrap(), eps);
        let z = add_noise_with(&z0, &Tensor::zeros(vec![4]), 0.25).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn add_noise_rejects_bad_t() {
        let s = DiffusionSchedule::default();
        let z = Tensor::<f32>::zeros(vec![2]);
        assert!(matches!(add_noise(&z, 1000, &z, &s), Err(Error::Parameter(_))));
        assert!(add_noise(&z, 999, &z, &s).is_ok());
    }

    #[test]
    fn add_noise_is_linear() {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::randn(vec![5], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![5], 1.0, &mut rng);
        let e1 = Tensor::<f64>::randn(vec![5], 1.0, &mut rng);
        let e2 = Tensor::<f64>::randn(vec![5], 1.0, &mut rng);
        let sum = |x: &Tensor<f64>, y: &Tensor<f64>| x.zip_map(y, "t", |p, q| p + q).unwrap();
        let lhs = add_noise(&sum(&a, &b), 321, &sum(&e1, &e2), &s).unwrap();
        let rhs = sum(&add_noise(&a, 321, &e1, &s).unwrap(), &add_noise(&b, 321, &e2, &s).unwrap());
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn mse_cases() {
        let e = Tensor::<f64>::new(vec![2], vec![1.0, 3.0]).unwrap();
        assert_eq!(diffusion_loss(&e, &e).unwrap(), 0.0);
        assert_eq!(diffusion_loss(&e.map(|v| v + 1.0), &e).unwrap(), 1.0);
        assert_eq!(diffusion_loss(&Tensor::zeros(vec![2]), &e).unwrap(), 5.0);
        assert!(diffusion_loss(&Tensor::<f64>::zeros(vec![3]), &e).is_err());
    }

    #[test]
    fn combined_cases() {
        assert_eq!(combined_loss(0.7, 123.0, 0.0).unwrap(), 0.7);
        assert!((combined_loss(0.5, 2.0, 1e-3).unwrap() - 0.502).abs() < 1e-15);
        assert!(combined_loss(0.5, 2.0, -1.0).is_err());
    }

    #[test]
    fn sampler_runs_with_zero_predictor() {
        let s = DiffusionSchedule::linear(50, 1e-4, 2e-2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = sample(&s, &[3, 4, 4], &mut rng, |x, _| Ok(Tensor::zeros(x.shape().to_vec()))).unwrap();
        assert!(x.is_finite());
    }
}
