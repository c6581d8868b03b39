//! EDM noise ladder, preconditioning, first-order sampler, classifier-free
//! guidance and the target-only training loss.

use ndarray::{Array, ArrayView, Dimension, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::LatentGrid;
use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;

/// `c_noise` reported for `σ = 0`, where `ln σ / 4` is undefined.
pub const C_NOISE_AT_ZERO: f64 = -20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EdmConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub sigma_data: f64,
    pub shift: f64,
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for EdmConfig {
    fn default() -> Self {
        Self {
            sigma_min: 0.02,
            sigma_max: 80.0,
            rho: 7.0,
            sigma_data: 0.5,
            shift: 2.4,
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

/// Inference settings of the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            cfg_scale: 1.2,
        }
    }
}

/// Descending noise ladder `σ_T > … > σ_1 > σ_0 = 0`, already shifted.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule<T> {
    pub sigmas: Vec<T>,
    pub sigma_min: T,
    pub sigma_max: T,
    pub rho: T,
    pub sigma_data: T,
    pub shift: T,
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn from_config(n_steps: usize, cfg: &EdmConfig) -> Result<Self> {
        let mut s = karras_schedule(
            n_steps,
            T::lit(cfg.sigma_min),
            T::lit(cfg.sigma_max),
            T::lit(cfg.rho),
            T::lit(cfg.shift),
        )?;
        s.sigma_data = T::lit(cfg.sigma_data);
        Ok(s)
    }

    /// Number of Euler steps (ladder length minus the trailing zero).
    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigma_start(&self) -> T {
        self.sigmas[0]
    }
}

pub fn karras_schedule<T: Scalar>(
    n_steps: usize,
    sigma_min: T,
    sigma_max: T,
    rho: T,
    shift: T,
) -> Result<NoiseSchedule<T>> {
    ensure!(n_steps >= 1, "n_steps must be at least 1");
    ensure!(
        sigma_min > T::zero() && sigma_min < sigma_max,
        "need 0 < sigma_min < sigma_max, got {sigma_min}, {sigma_max}"
    );
    ensure!(rho > T::zero(), "rho must be positive");
    ensure!(shift > T::zero(), "shift must be positive");
    let inv_rho = T::one() / rho;
    let (hi, lo) = (sigma_max.powf(inv_rho), sigma_min.powf(inv_rho));
    let mut sigmas: Vec<T> = if n_steps == 1 {
        vec![sigma_max]
    } else {
        let last = T::lit((n_steps - 1) as f64);
        (0..n_steps)
            .map(|i| {
                if i == 0 {
                    sigma_max
                } else if i == n_steps - 1 {
                    sigma_min
                } else {
                    (hi + T::lit(i as f64) / last * (lo - hi)).powf(rho)
                }
            })
            .collect()
    };
    sigmas.iter_mut().for_each(|s| *s = shift_sigma(*s, shift));
    sigmas.push(T::zero());
    Ok(NoiseSchedule {
        sigmas,
        sigma_min,
        sigma_max,
        rho,
        sigma_data: T::lit(0.5),
        shift,
    })
}

/// SNR shift: `σ ↦ shift·σ`, lowering log-SNR by `2 ln shift`.
pub fn shift_sigma<T: Scalar>(sigma: T, shift: T) -> T {
    shift * sigma
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreconditionCoeffs<T> {
    pub c_skip: T,
    pub c_in: T,
    pub c_out: T,
    pub c_noise: T,
}

pub fn precondition<T: Scalar>(sigma: T, sigma_data: T) -> PreconditionCoeffs<T> {
    let s2 = sigma * sigma;
    let d2 = sigma_data * sigma_data;
    let total = s2 + d2;
    PreconditionCoeffs {
        c_skip: d2 / total,
        c_in: T::one() / total.sqrt(),
        c_out: sigma * sigma_data / total.sqrt(),
        c_noise: if sigma > T::zero() {
            sigma.ln() / T::lit(4.0)
        } else {
            T::lit(C_NOISE_AT_ZERO)
        },
    }
}

/// Forward noising `y + σ·ε`.
pub fn add_noise<T: Scalar>(y: &LatentGrid<T>, sigma: T, eps: &LatentGrid<T>) -> Result<LatentGrid<T>> {
    ensure!(y.same_shape(eps), "noise shape does not match latent shape");
    let mut data = y.data.clone();
    data.zip_mut_with(&eps.data, |a, &e| *a += sigma * e);
    Ok(LatentGrid { data, patch: y.patch })
}

/// Which branch of classifier-free guidance a network call belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Conditional,
    /// Condition tokens replaced by the learned null token.
    Unconditional,
}

/// Raw network `F(c_in·x, c_noise)`; conditioning inputs are bound inside
/// the implementor.
pub trait RawNetwork<T: Scalar> {
    fn raw(&self, x_scaled: &LatentGrid<T>, c_noise: T, branch: Branch) -> Result<LatentGrid<T>>;
}

impl<T: Scalar, F> RawNetwork<T> for F
where
    F: Fn(&LatentGrid<T>, T, Branch) -> Result<LatentGrid<T>>,
{
    fn raw(&self, x_scaled: &LatentGrid<T>, c_noise: T, branch: Branch) -> Result<LatentGrid<T>> {
        self(x_scaled, c_noise, branch)
    }
}

/// Assembly of `D` from `F`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserForm {
    /// `D = c_skip·x + c_out·F`; `D(x, 0) = x`.
    #[default]
    Standard,
    /// `D = x − (c_skip·x + c_out·F)`, kept for side-by-side inspection
    /// only: it maps `D(x, 0)` to zero.
    Complement,
}

pub fn denoised<T: Scalar, N: RawNetwork<T> + ?Sized>(
    net: &N,
    x: &LatentGrid<T>,
    sigma: T,
    sigma_data: T,
    branch: Branch,
    form: DenoiserForm,
) -> Result<LatentGrid<T>> {
    let k = precondition(sigma, sigma_data);
    let scaled = LatentGrid {
        data: x.data.mapv(|v| v * k.c_in),
        patch: x.patch,
    };
    let f = net.raw(&scaled, k.c_noise, branch)?;
    ensure!(f.same_shape(x), "network output shape does not match its input");
    let mut d = x.data.clone();
    Zip::from(&mut d).and(&f.data).for_each(|xv, &fv| {
        let standard = k.c_skip * *xv + k.c_out * fv;
        *xv = match form {
            DenoiserForm::Standard => standard,
            DenoiserForm::Complement => *xv - standard,
        };
    });
    Ok(LatentGrid { data: d, patch: x.patch })
}

/// One first-order step from level `sigma_next` down to `sigma_t`.
pub fn euler_step<T: Scalar>(
    x_next: &LatentGrid<T>,
    sigma_t: T,
    sigma_next: T,
    d_value: &LatentGrid<T>,
) -> Result<LatentGrid<T>> {
    ensure!(sigma_next > T::zero(), "euler_step needs sigma_next > 0");
    ensure!(
        sigma_t >= T::zero() && sigma_t <= sigma_next,
        "euler_step needs 0 <= sigma_t <= sigma_next (got {sigma_t}, {sigma_next})"
    );
    ensure!(x_next.same_shape(d_value), "denoised value shape mismatch");
    let ratio = (sigma_t - sigma_next) / sigma_next;
    let mut data = x_next.data.clone();
    data.zip_mut_with(&d_value.data, |x, &d| *x = *x + ratio * (*x - d));
    Ok(LatentGrid { data, patch: x_next.patch })
}

pub fn cfg_combine<T: Scalar>(
    cond_out: &LatentGrid<T>,
    uncond_out: &LatentGrid<T>,
    scale: T,
) -> Result<LatentGrid<T>> {
    ensure!(cond_out.same_shape(uncond_out), "guidance branch shape mismatch");
    let mut data = uncond_out.data.clone();
    data.zip_mut_with(&cond_out.data, |u, &c| *u = *u + scale * (c - *u));
    Ok(LatentGrid { data, patch: cond_out.patch })
}

/// Guided `D(x, σ)`; at scale 1 only the conditional branch runs.
pub fn guided_denoised<T: Scalar, N: RawNetwork<T> + ?Sized>(
    net: &N,
    x: &LatentGrid<T>,
    sigma: T,
    sigma_data: T,
    cfg_scale: T,
) -> Result<LatentGrid<T>> {
    let cond = denoised(net, x, sigma, sigma_data, Branch::Conditional, DenoiserForm::Standard)?;
    if cfg_scale == T::one() {
        return Ok(cond);
    }
    let uncond = denoised(net, x, sigma, sigma_data, Branch::Unconditional, DenoiserForm::Standard)?;
    cfg_combine(&cond, &uncond, cfg_scale)
}

/// Run Euler steps along `sigmas` (descending, last entry may be 0)
/// starting from `x` at level `sigmas[0]`.
pub fn run_ladder<T: Scalar, N: RawNetwork<T> + ?Sized>(
    net: &N,
    mut x: LatentGrid<T>,
    sigmas: &[T],
    sigma_data: T,
    cfg_scale: T,
) -> Result<LatentGrid<T>> {
    for (step, pair) in sigmas.windows(2).enumerate() {
        let (sigma_next, sigma_t) = (pair[0], pair[1]);
        let d = guided_denoised(net, &x, sigma_next, sigma_data, cfg_scale)?;
        x = euler_step(&x, sigma_t, sigma_next, &d)?;
        if !x.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite latent after sampler step {} (sigma {} -> {})",
                step + 1,
                sigma_next,
                sigma_t
            )));
        }
    }
    Ok(x)
}

pub fn standard_normal_latent<T: Scalar>(
    template: &LatentGrid<T>,
    rng: &mut impl Rng,
) -> LatentGrid<T> {
    LatentGrid {
        data: template
            .data
            .mapv(|_| T::lit(rng.sample::<f64, _>(StandardNormal))),
        patch: template.patch,
    }
}

/// Full sampler: start from `σ_T·N(0, I)` drawn from `seed` and walk the
/// whole ladder. `template` fixes the target latent shape.
pub fn sample<T: Scalar, N: RawNetwork<T> + ?Sized>(
    net: &N,
    template: &LatentGrid<T>,
    schedule: &NoiseSchedule<T>,
    cfg_scale: T,
    seed: u64,
) -> Result<LatentGrid<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = standard_normal_latent(template, &mut rng);
    let s0 = schedule.sigma_start();
    x.data.mapv_inplace(|v| v * s0);
    run_ladder(net, x, &schedule.sigmas, schedule.sigma_data, cfg_scale)
}

/// Log-normal training noise level, shifted: `shift · exp(P_mean + P_std·z)`.
pub fn training_sigma<T: Scalar>(rng: &mut impl Rng, cfg: &EdmConfig) -> T {
    let z: f64 = rng.sample(StandardNormal);
    T::lit(sigma_from_normal(z, cfg))
}

pub fn sigma_from_normal(z: f64, cfg: &EdmConfig) -> f64 {
    shift_sigma((cfg.p_mean + cfg.p_std * z).exp(), cfg.shift)
}

/// Loss value and its gradient with respect to the prediction.
#[derive(Debug, Clone)]
pub struct MaskedLoss<T, D: Dimension> {
    pub value: T,
    pub grad: Array<T, D>,
}

/// Eps-weighted x0 MSE averaged over masked positions only:
/// `mean_{mask} (pred − y)² / σ²`. Unmasked positions contribute nothing to
/// the value and receive exactly zero gradient.
pub fn masked_loss<T: Scalar, D: Dimension>(
    pred_x0: ArrayView<T, D>,
    y_true: ArrayView<T, D>,
    sigma: T,
    mask: ArrayView<bool, D>,
) -> Result<MaskedLoss<T, D>> {
    ensure!(
        pred_x0.shape() == y_true.shape() && pred_x0.shape() == mask.shape(),
        "loss operands have mismatched shapes"
    );
    ensure!(sigma > T::zero(), "loss weighting needs sigma > 0");
    let count = mask.iter().filter(|&&m| m).count();
    ensure!(count > 0, "loss mask selects no positions");
    let weight = T::one() / (sigma * sigma * T::lit(count as f64));
    let mut value = T::zero();
    let mut grad = Array::zeros(pred_x0.raw_dim());
    Zip::from(&mut grad)
        .and(&pred_x0)
        .and(&y_true)
        .and(&mask)
        .for_each(|g, &p, &y, &m| {
            if m {
                let r = p - y;
                value += r * r * weight;
                *g = T::lit(2.0) * r * weight;
            }
        });
    Ok(MaskedLoss { value, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array4};

    fn grid(vals: &[f64]) -> LatentGrid<f64> {
        LatentGrid {
            data: Array4::from_shape_vec((1, 3, 1, vals.len() / 3), vals.to_vec()).unwrap(),
            patch: 1,
        }
    }

    #[test]
    fn two_step_ladder_hits_endpoints() {
        let s = karras_schedule(2, 0.02, 80.0, 7.0, 1.0).unwrap();
        assert_eq!(s.sigmas, vec![80.0, 0.02, 0.0]);
        let s = karras_schedule(1, 0.02, 80.0, 7.0, 1.0).unwrap();
        assert_eq!(s.sigmas, vec![80.0, 0.0]);
    }

    #[test]
    fn rho_one_is_linear() {
        let s = karras_schedule(5, 1.0, 9.0, 1.0, 1.0).unwrap();
        let want = [9.0f64, 7.0, 5.0, 3.0, 1.0, 0.0];
        for (a, b) in s.sigmas.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn karras_ladder_matches_frozen_values() {
        // Frozen from an independent script:
        // [(80**(1/7) + i/9*(0.02**(1/7) - 80**(1/7)))**7 for i in range(10)]
        let want: [f64; 10] = [
            80.0,
            45.60980348104143,
            24.757927768909408,
            12.675830426264854,
            6.0459517987107025,
            2.6417074053790532,
            1.032750896216158,
            0.34895715635580876,
            0.09657513797178488,
            0.02,
        ];
        let s = karras_schedule(10, 0.02, 80.0, 7.0, 1.0).unwrap();
        assert_eq!(s.sigmas.len(), 11);
        for (a, b) in s.sigmas.iter().zip(want) {
            assert!((a - b).abs() <= 1e-9 * b.max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn ladder_is_shifted_and_strictly_decreasing() {
        let s = NoiseSchedule::<f64>::from_config(50, &EdmConfig::default()).unwrap();
        assert_eq!(s.sigmas.len(), 51);
        assert!((s.sigmas[0] - 192.0).abs() < 1e-9);
        assert_eq!(*s.sigmas.last().unwrap(), 0.0);
        assert!(s.sigmas.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn invalid_ladder_bounds() {
        assert!(karras_schedule(10, 0.0, 80.0, 7.0, 1.0).is_err());
        assert!(karras_schedule(10, 90.0, 80.0, 7.0, 1.0).is_err());
        assert!(karras_schedule::<f64>(0, 0.02, 80.0, 7.0, 1.0).is_err());
    }

    #[test]
    fn shift_lowers_log_snr() {
        assert_eq!(shift_sigma(0.0, 2.4), 0.0);
        assert_eq!(shift_sigma(3.7, 1.0), 3.7);
        let shifted: f64 = shift_sigma(1.0, 2.4);
        assert_eq!(shifted, 2.4);
        // logSNR = -2 ln σ (unit signal variance)
        let drop = -2.0 * 1.0f64.ln() - (-2.0 * shifted.ln());
        assert!((drop - 2.0 * 2.4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn precondition_reference_points() {
        let k = precondition(0.0, 0.5);
        assert_eq!((k.c_skip, k.c_out, k.c_in, k.c_noise), (1.0, 0.0, 2.0, -20.0));
        assert_eq!(precondition(0.5, 0.5).c_skip, 0.5);
        let k = precondition(1.0f64, 0.5);
        assert!((k.c_skip - 0.2).abs() < 1e-15);
        assert!((k.c_out - 1.0 / 5f64.sqrt()).abs() < 1e-15);
        assert!((k.c_in - 1.0 / (0.5 * 5f64.sqrt())).abs() < 1e-15);
        assert!((k.c_noise - 0.0).abs() < 1e-15);
    }

    #[test]
    fn add_noise_edge_cases() {
        let y = grid(&[1.0, -2.0, 0.5]);
        let eps = grid(&[0.3, 0.1, -1.0]);
        assert_eq!(add_noise(&y, 0.0, &eps).unwrap(), y);
        let zero = grid(&[0.0; 3]);
        assert_eq!(add_noise(&zero, 1.0, &eps).unwrap(), eps);
        assert!(add_noise(&y, 1.0, &grid(&[0.0; 6])).is_err());
    }

    #[test]
    fn euler_hand_arithmetic() {
        let x = grid(&[3.0, 3.0, 3.0]);
        let d = grid(&[1.0, 1.0, 1.0]);
        let out = euler_step(&x, 1.0, 2.0, &d).unwrap();
        assert!(out.data.iter().all(|&v| v == 2.0));
        assert_eq!(euler_step(&x, 1.0, 2.0, &x).unwrap(), x);
        assert_eq!(euler_step(&x, 2.0, 2.0, &d).unwrap(), x);
        assert!(euler_step(&x, 0.0, 0.0, &d).is_err());
    }

    #[test]
    fn cfg_algebra() {
        let c = grid(&[1.0, 2.0, 3.0]);
        let u = grid(&[0.0, 0.0, 0.0]);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        let g = cfg_combine(&c, &u, 1.2).unwrap();
        assert!((g.data[[0, 0, 0, 0]] - 1.2).abs() < 1e-15);
        assert!(cfg_combine(&c, &grid(&[0.0; 6]), 1.0).is_err());
    }

    #[test]
    fn complement_form_breaks_the_noiseless_fixed_point() {
        let x = grid(&[0.4, -0.2, 0.9]);
        let f = |z: &LatentGrid<f64>, _: f64, _: Branch| Ok(z.clone());
        let std = denoised(&f, &x, 0.0, 0.5, Branch::Conditional, DenoiserForm::Standard).unwrap();
        assert_eq!(std, x);
        let complement = denoised(&f, &x, 0.0, 0.5, Branch::Conditional, DenoiserForm::Complement).unwrap();
        assert!(complement.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_hand_arithmetic_and_masking() {
        let pred = arr1(&[0.2f64, 5.0]);
        let y = arr1(&[0.0, -3.0]);
        let mask = arr1(&[true, false]);
        let l = masked_loss(pred.view(), y.view(), 2.0, mask.view()).unwrap();
        assert!((l.value - 0.01).abs() < 1e-15);
        assert_eq!(l.grad[1], 0.0);
        let none = arr1(&[false, false]);
        assert!(masked_loss(pred.view(), y.view(), 2.0, none.view()).is_err());
    }
}
