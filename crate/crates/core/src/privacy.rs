//! Differential-privacy mechanisms and Rényi accounting.
//!
//! Client updates are clipped to L2 norm `C`, so replacing one client's data
//! moves its update by at most `2C`. Noise multipliers are expressed relative
//! to that sensitivity: a Gaussian release with multiplier `z` has standard
//! deviation `z * 2C` and Rényi divergence `alpha / (2 z^2)` at order `alpha`.

use rand::RngCore;

use crate::error::{Error, Result};
use crate::model::ParameterVector;
use crate::personalization::PersonalizationMask;
use crate::rng::Normal;

/// Lower end of the noise-multiplier search grid.
pub const Z_MIN: f64 = 0.3;
/// Upper end of the noise-multiplier search grid.
pub const Z_MAX: f64 = 64.0;
/// Number of geometrically spaced grid points.
pub const Z_GRID_POINTS: usize = 200;

/// Laplace scale `b = sensitivity / epsilon`.
pub fn laplace_scale(sensitivity_l1: f64, epsilon: f64) -> Result<f64> {
    if !(sensitivity_l1 > 0.0 && sensitivity_l1.is_finite()) {
        return Err(Error::Argument(format!(
            "L1 sensitivity {sensitivity_l1} must be positive (zero means a constant query)"
        )));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Argument(format!("epsilon {epsilon} must be positive")));
    }
    Ok(sensitivity_l1 / epsilon)
}

/// Classic Gaussian-mechanism standard deviation
/// `sensitivity * sqrt(2 ln(1.25 / delta)) / epsilon`.
pub fn gaussian_sigma(sensitivity_l2: f64, epsilon: f64, delta: f64) -> Result<f64> {
    if !(sensitivity_l2 > 0.0 && sensitivity_l2.is_finite()) {
        return Err(Error::Argument(format!(
            "L2 sensitivity {sensitivity_l2} must be positive"
        )));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Argument(format!("epsilon {epsilon} must be positive")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Argument(format!("delta {delta} must be in (0, 1)")));
    }
    Ok(sensitivity_l2 * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon)
}

/// Scales `update` by `min(1, C / ||update||)`. Updates already inside the
/// ball are returned unchanged.
pub fn clip_update(update: &ParameterVector, clip_c: f64) -> Result<ParameterVector> {
    if !(clip_c > 0.0 && clip_c.is_finite()) {
        return Err(Error::Argument(format!("clip norm {clip_c} must be positive")));
    }
    let norm = update.l2_norm();
    if norm <= clip_c {
        return Ok(update.clone());
    }
    let scale = clip_c / norm;
    Ok(update.with_values(update.values().iter().map(|v| v * scale).collect()))
}

/// Adds `N(0, sigma_u^2)` to personalized coordinates and `N(0, sigma_v^2)`
/// to shared ones. One standard normal is drawn per coordinate, in order,
/// from `rng`, whatever group the coordinate belongs to.
pub fn adaptive_noise<R: RngCore>(
    update: &ParameterVector,
    mask: &PersonalizationMask,
    sigma_u: f64,
    sigma_v: f64,
    rng: R,
) -> Result<ParameterVector> {
    if !(sigma_u >= 0.0 && sigma_v >= 0.0 && sigma_u.is_finite() && sigma_v.is_finite()) {
        return Err(Error::Argument("noise scales must be finite and non-negative".into()));
    }
    if sigma_u > sigma_v {
        return Err(Error::Argument(format!(
            "personalized noise {sigma_u} exceeds shared noise {sigma_v}"
        )));
    }
    if mask.len() != update.len() {
        return Err(Error::Config("mask length does not match update".into()));
    }
    let mut normal = Normal::new(rng);
    let values = update
        .values()
        .iter()
        .zip(mask.bits())
        .map(|(&x, &personalized)| {
            let n = normal.sample();
            let sigma = if personalized { sigma_u } else { sigma_v };
            if sigma == 0.0 {
                x
            } else {
                x + sigma * n
            }
        })
        .collect();
    Ok(update.with_values(values))
}

/// Privacy parameters of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct PrivacySpec {
    pub epsilon_target: f64,
    pub delta: f64,
    pub clip_c: f64,
    /// Ratio `sigma_v / sigma_u`.
    pub noise_split_rho: f64,
    pub rounds: u32,
}

impl PrivacySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_target > 0.0 && self.epsilon_target.is_finite()) {
            return Err(Error::Argument(format!(
                "epsilon {} must be positive",
                self.epsilon_target
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Argument(format!("delta {} must be in (0, 1)", self.delta)));
        }
        if !(self.clip_c > 0.0 && self.clip_c.is_finite()) {
            return Err(Error::Argument(format!("clip norm {} must be positive", self.clip_c)));
        }
        if !(self.noise_split_rho >= 1.0 && self.noise_split_rho.is_finite()) {
            return Err(Error::Argument(format!(
                "noise split {} must be at least 1",
                self.noise_split_rho
            )));
        }
        Ok(())
    }

    /// L2 sensitivity of a clipped update under replace-one neighbours.
    pub fn sensitivity(&self) -> f64 {
        2.0 * self.clip_c
    }
}

/// Result of noise calibration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseCalibration {
    /// Noise multiplier relative to the update sensitivity.
    pub z: f64,
    pub sigma_u: f64,
    pub sigma_v: f64,
}

/// Rényi DP of one Gaussian release with multiplier `z` at order `alpha`.
pub fn rdp_of_gaussian(noise_multiplier: f64, alpha: f64) -> Result<f64> {
    if !(noise_multiplier > 0.0 && noise_multiplier.is_finite()) {
        return Err(Error::Argument(format!(
            "noise multiplier {noise_multiplier} must be positive"
        )));
    }
    if !(alpha > 1.0 && alpha.is_finite()) {
        return Err(Error::Argument(format!("Rényi order {alpha} must exceed 1")));
    }
    Ok(alpha / (2.0 * noise_multiplier * noise_multiplier))
}

/// Orders `{1.25, 1.5, 1.75, 2, 3, .., 64, 128, 256}`.
pub fn default_alpha_grid() -> Vec<f64> {
    let mut grid = vec![1.25, 1.5, 1.75];
    grid.extend((2..=64).map(f64::from));
    grid.extend([128.0, 256.0]);
    grid
}

/// Running RDP curve over a fixed order grid.
///
/// Releases are stored as `(multiplier, count)` pairs and the curve is
/// `sum count * rdp(z, alpha)`, so T identical releases give exactly T times
/// the single-release curve.
#[derive(Clone, Debug, PartialEq)]
pub struct AccountantState {
    alpha_grid: Vec<f64>,
    history: Vec<(f64, u64)>,
    releases: u64,
}

impl Default for AccountantState {
    fn default() -> Self {
        Self::new(default_alpha_grid()).expect("default grid is valid")
    }
}

impl AccountantState {
    pub fn new(alpha_grid: Vec<f64>) -> Result<Self> {
        if alpha_grid.is_empty() || alpha_grid.iter().any(|a| !(*a > 1.0 && a.is_finite())) {
            return Err(Error::Argument("Rényi orders must be finite and exceed 1".into()));
        }
        if alpha_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument("Rényi orders must be strictly increasing".into()));
        }
        Ok(Self {
            alpha_grid,
            history: Vec::new(),
            releases: 0,
        })
    }

    pub fn alpha_grid(&self) -> &[f64] {
        &self.alpha_grid
    }

    pub fn releases(&self) -> u64 {
        self.releases
    }

    /// Charges `count` Gaussian releases at multiplier `z`.
    pub fn compose_gaussian(&mut self, noise_multiplier: f64, count: u64) -> Result<()> {
        rdp_of_gaussian(noise_multiplier, self.alpha_grid[0])?;
        if count == 0 {
            return Ok(());
        }
        match self
            .history
            .iter_mut()
            .find(|(z, _)| z.to_bits() == noise_multiplier.to_bits())
        {
            Some((_, n)) => *n += count,
            None => self.history.push((noise_multiplier, count)),
        }
        self.releases += count;
        Ok(())
    }

    /// Accumulated RDP at every grid order.
    pub fn accumulated_rdp(&self) -> Vec<f64> {
        self.alpha_grid
            .iter()
            .map(|&a| self.history.iter().map(|&(z, n)| n as f64 * (a / (2.0 * z * z))).sum())
            .collect()
    }
}

/// Best `(epsilon, alpha)` over the grid for
/// `epsilon(alpha) = rdp(alpha) + ln(1/delta) / (alpha - 1)`.
pub fn rdp_to_dp(state: &AccountantState, delta: f64) -> Result<(f64, f64)> {
    if state.releases() == 0 {
        return Err(Error::Usage("accountant has no releases".into()));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Argument(format!("delta {delta} must be in (0, 1)")));
    }
    let log_inv_delta = (1.0 / delta).ln();
    let mut best = (f64::INFINITY, f64::NAN);
    for (&alpha, rdp) in state.alpha_grid().iter().zip(state.accumulated_rdp()) {
        let eps = rdp + log_inv_delta / (alpha - 1.0);
        if eps < best.0 {
            best = (eps, alpha);
        }
    }
    Ok(best)
}

/// Epsilon after `releases` Gaussian releases at multiplier `z` on the
/// default grid.
pub fn epsilon_after(noise_multiplier: f64, releases: u64, delta: f64) -> Result<f64> {
    let mut state = AccountantState::default();
    state.compose_gaussian(noise_multiplier, releases)?;
    Ok(rdp_to_dp(&state, delta)?.0)
}

/// Geometric grid of `Z_GRID_POINTS` multipliers from `Z_MIN` to `Z_MAX`.
pub fn noise_multiplier_grid() -> Vec<f64> {
    let ratio = Z_MAX / Z_MIN;
    let last = (Z_GRID_POINTS - 1) as f64;
    (0..Z_GRID_POINTS)
        .map(|i| match i {
            0 => Z_MIN,
            i if i == Z_GRID_POINTS - 1 => Z_MAX,
            i => Z_MIN * ratio.powf(i as f64 / last),
        })
        .collect()
}

/// Smallest grid multiplier whose `rounds`-fold composition stays within the
/// target epsilon, and the two noise scales it implies.
pub fn calibrate_noise(spec: &PrivacySpec) -> Result<NoiseCalibration> {
    spec.validate()?;
    let releases = u64::from(spec.rounds.max(1));
    for z in noise_multiplier_grid() {
        if epsilon_after(z, releases, spec.delta)? <= spec.epsilon_target {
            let sigma_u = z * spec.sensitivity();
            return Ok(NoiseCalibration {
                z,
                sigma_u,
                sigma_v: spec.noise_split_rho * sigma_u,
            });
        }
    }
    Err(Error::InfeasibleBudget {
        epsilon: spec.epsilon_target,
        delta: spec.delta,
        releases: spec.rounds,
        min: Z_MIN,
        max: Z_MAX,
    })
}
