//! Deterministic equivalents of the spurious correlation and the test loss of
//! ridge regression.
//!
//! Every quantity is a function of the effective regularization `τ(λ)`, the
//! unique positive root of
//!
//! ```text
//! 1 − λ/τ = (1/n) tr((Σ + τI)⁻¹ Σ).
//! ```
//!
//! [`DetEquiv`] precomputes the projections of the signal onto the eigenbasis
//! of `Σ`, after which each grid point costs `O(d)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covmodel::CovarianceModel;
use crate::error::{Error, Result};
use crate::linalg;

/// Tolerance on the fixed-point residual returned by [`solve_tau`].
pub const TAU_RESIDUAL_TOL: f64 = 1e-12;
/// Smallest admissible denominator of the test-loss equivalent.
pub const DENOMINATOR_TOL: f64 = 1e-10;
/// `‖Σxx − I‖op` above which the `λ_C` threshold carries a validity warning.
pub const IDENTITY_XX_TOL: f64 = 1e-10;

/// Signal `θ*_x` (unit norm) and label-noise variance. The full parameter is
/// `θ* = [θ*_x; 0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    theta_star_x: DVector<f64>,
    sigma2: f64,
}

impl GroundTruth {
    pub fn new(theta_star_x: DVector<f64>, sigma2: f64) -> Result<Self> {
        if theta_star_x.is_empty() {
            return Err(Error::Dimension("empty θ*_x".into()));
        }
        let norm = theta_star_x.norm();
        if !((norm - 1.0).abs() <= 1e-12) {
            return Err(Error::ParameterRange(format!("‖θ*_x‖ = {norm} must be 1")));
        }
        if !(sigma2 >= 0.0 && sigma2.is_finite()) {
            return Err(Error::ParameterRange(format!("σ² = {sigma2} must be nonnegative")));
        }
        Ok(Self { theta_star_x, sigma2 })
    }

    /// Rescale an arbitrary nonzero direction to unit norm.
    pub fn normalized(direction: DVector<f64>, sigma2: f64) -> Result<Self> {
        let norm = direction.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::ParameterRange("θ*_x direction must be nonzero".into()));
        }
        Self::new(direction / norm, sigma2)
    }

    /// `θ*_x = e₁`.
    pub fn first_basis(d: usize, sigma2: f64) -> Result<Self> {
        let mut e = DVector::zeros(d);
        if d > 0 {
            e[0] = 1.0;
        }
        Self::new(e, sigma2)
    }

    pub fn d(&self) -> usize {
        self.theta_star_x.len()
    }

    pub fn theta_star_x(&self) -> &DVector<f64> {
        &self.theta_star_x
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// `θ* = [θ*_x; 0]`.
    pub fn theta_star(&self) -> DVector<f64> {
        let d = self.d();
        let mut t = DVector::zeros(2 * d);
        t.rows_mut(0, d).copy_from(&self.theta_star_x);
        t
    }

    pub(crate) fn check_model(&self, model: &CovarianceModel) -> Result<()> {
        if self.d() != model.d() {
            return Err(Error::Dimension(format!(
                "θ*_x has dimension {} but the model has d = {}",
                self.d(),
                model.d()
            )));
        }
        Ok(())
    }
}

/// Deterministic equivalents at one regularization strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeterministicPoint {
    pub lambda: f64,
    pub tau: f64,
    pub c_sigma: f64,
    pub l_sigma: f64,
    pub bounds: [f64; 3],
}

impl DeterministicPoint {
    pub fn min_bound(&self) -> f64 {
        self.bounds.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffThresholds {
    pub lambda_l: f64,
    pub lambda_c: f64,
    pub tau_l: f64,
    pub tau_c: f64,
    /// Whether the shape ratio `2d/n` is small enough for the window result.
    pub condition_holds: bool,
    /// Set when `Σxx ≠ I`, where `λ_C` is computed but not backed by the
    /// monotonicity result.
    pub xx_not_identity: bool,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::ParameterRange(format!("λ = {lambda} must be positive and finite")));
    }
    Ok(())
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::ParameterRange("n must be positive".into()));
    }
    Ok(())
}

/// `(1/n) Σₖ λₖ/(λₖ + τ)`.
fn trace_term(eigs: &[f64], n: usize, tau: f64) -> f64 {
    eigs.iter().map(|&l| l / (l + tau)).sum::<f64>() / n as f64
}

/// `h(τ) = 1 − λ/τ − (1/n) tr((Σ+τI)⁻¹Σ)`, strictly increasing in `τ`.
fn residual(eigs: &[f64], n: usize, lambda: f64, tau: f64) -> f64 {
    1.0 - lambda / tau - trace_term(eigs, n, tau)
}

/// Bisection for `τ(λ)` on the spectrum of `Σ`.
pub fn solve_tau_spectrum(eigs: &[f64], n: usize, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    check_n(n)?;
    let lmax = eigs.iter().copied().fold(0.0f64, f64::max);
    let mut lo = lambda;
    let mut hi = lambda + eigs.len() as f64 / n as f64 * lmax;
    let h_lo = residual(eigs, n, lambda, lo);
    let h_hi = residual(eigs, n, lambda, hi);
    if h_lo > 0.0 || h_hi < 0.0 {
        return Err(Error::NonConvergence(format!(
            "bracket [{lo}, {hi}] gives residuals {h_lo}, {h_hi}"
        )));
    }
    if h_hi == 0.0 {
        return Ok(hi);
    }
    // Run to floating-point resolution rather than stopping at the residual
    // tolerance, so that τ is accurate in relative terms even near zero.
    for _ in 0..4096 {
        let mid = if hi > 4.0 * lo { (lo * hi).sqrt() } else { 0.5 * (lo + hi) };
        if mid <= lo || mid >= hi {
            break;
        }
        let h = residual(eigs, n, lambda, mid);
        if h == 0.0 {
            return Ok(mid);
        }
        if h < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (rl, rh) = (residual(eigs, n, lambda, lo).abs(), residual(eigs, n, lambda, hi).abs());
    let (tau, r) = if rl <= rh { (lo, rl) } else { (hi, rh) };
    if r > TAU_RESIDUAL_TOL {
        return Err(Error::NonConvergence(format!("residual {r} at τ = {tau}")));
    }
    Ok(tau)
}

/// `τ(λ)` for the model at sample size `n`.
pub fn solve_tau(model: &CovarianceModel, n: usize, lambda: f64) -> Result<f64> {
    solve_tau_spectrum(model.spectrum().values.as_slice(), n, lambda)
}

/// Fixed-point residual `1 − λ/τ − (1/n) tr((Σ+τI)⁻¹Σ)`.
pub fn tau_residual(model: &CovarianceModel, n: usize, lambda: f64, tau: f64) -> f64 {
    residual(model.spectrum().values.as_slice(), n, lambda, tau)
}

/// Inverse of [`solve_tau`]: `λ = τ (1 − (1/n) tr((Σ+τI)⁻¹Σ))`.
pub fn lambda_from_tau(model: &CovarianceModel, n: usize, tau: f64) -> Result<f64> {
    check_n(n)?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::ParameterRange(format!("τ = {tau} must be positive and finite")));
    }
    let lambda = tau * (1.0 - trace_term(model.spectrum().values.as_slice(), n, tau));
    if !(lambda > 0.0) {
        return Err(Error::OutOfRange(format!("τ = {tau} is below the ridgeless limit (λ = {lambda})")));
    }
    Ok(lambda)
}

/// `2 − 2√(1 − c²)`, the lower bound on the OOD loss of a normalized predictor
/// with spurious correlation `c`.
pub fn ood_lower_bound(c: f64) -> Result<f64> {
    if !(c.abs() <= 1.0) {
        return Err(Error::Domain(format!("|c| = {} exceeds 1", c.abs())));
    }
    Ok(2.0 - 2.0 * (1.0 - c * c).sqrt())
}

/// Shape-ratio condition under which the trade-off window result applies:
/// `2d/n ≤ λmin/4 · min(1, (2λmax/σ²) / (λmax/λmin + 1)²)`.
pub fn shape_ratio_condition(shape: f64, lambda_min: f64, lambda_max: f64, sigma2: f64) -> bool {
    let kappa = lambda_max / lambda_min;
    let noise_term = if sigma2 > 0.0 {
        (2.0 * lambda_max / sigma2) / ((kappa + 1.0) * (kappa + 1.0))
    } else {
        f64::INFINITY
    };
    shape <= lambda_min / 4.0 * noise_term.min(1.0)
}

/// Evaluator for one `(model, ground truth, n)` triple.
#[derive(Debug, Clone)]
pub struct DetEquiv<'a> {
    model: &'a CovarianceModel,
    gt: &'a GroundTruth,
    n: usize,
    /// `Uᵀθ*`.
    a: DVector<f64>,
    /// `Uᵀ P_y Σ θ*`.
    b: DVector<f64>,
    bound_consts: BoundConstants,
}

#[derive(Debug, Clone, Copy)]
struct BoundConstants {
    yx_op: f64,
    lmax_sq: f64,
    /// `√(θ*_xᵀΣxxθ*_x) (λmax(Σyy) − λmin(S)) / (λmin(S) √λmin(Σxx))`.
    third_scale: f64,
}

impl<'a> DetEquiv<'a> {
    pub fn new(model: &'a CovarianceModel, gt: &'a GroundTruth, n: usize) -> Result<Self> {
        gt.check_model(model)?;
        check_n(n)?;
        let d = model.d();
        let eig = model.spectrum();
        let theta = gt.theta_star();
        let a = eig.project(&theta);
        // P_y Σ θ* = [0; Σyx θ*_x]
        let mut py = DVector::zeros(2 * d);
        py.rows_mut(d, d).copy_from(&(model.sigma_yx() * gt.theta_star_x()));
        let b = eig.project(&py);

        let s_min = model.schur_spectrum()?.min();
        let signal = (gt.theta_star_x().transpose() * model.sigma_xx() * gt.theta_star_x())[(0, 0)];
        let third_scale = signal.max(0.0).sqrt() * (model.spectrum_yy().max() - s_min)
            / (s_min * model.spectrum_xx().min().sqrt());
        let bound_consts = BoundConstants {
            yx_op: linalg::op_norm(&model.sigma_yx().into_owned()),
            lmax_sq: eig.max() * eig.max(),
            third_scale,
        };
        Ok(Self { model, gt, n, a, b, bound_consts })
    }

    pub fn model(&self) -> &CovarianceModel {
        self.model
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn eigs(&self) -> &[f64] {
        self.model.spectrum().values.as_slice()
    }

    pub fn tau(&self, lambda: f64) -> Result<f64> {
        solve_tau_spectrum(self.eigs(), self.n, lambda)
    }

    /// `C^Σ` at a given `τ`. Uses `θ*ᵀΣ(Σ+τI)⁻¹P_yΣθ* = −τ θ*ᵀ(Σ+τI)⁻¹P_yΣθ*`,
    /// which holds because `θ*ᵀ P_y = 0` and avoids cancellation.
    pub fn c_sigma_at_tau(&self, tau: f64) -> f64 {
        let s: f64 = self
            .eigs()
            .iter()
            .zip(self.a.iter().zip(self.b.iter()))
            .map(|(&l, (&a, &b))| a * b / (l + tau))
            .sum();
        -tau * s
    }

    /// `L^Σ` at a given `τ`.
    pub fn l_sigma_at_tau(&self, tau: f64) -> Result<f64> {
        let mut bias = 0.0;
        let mut tr2 = 0.0;
        for (&l, &a) in self.eigs().iter().zip(self.a.iter()) {
            let r = 1.0 / (l + tau);
            bias += l * a * a * r * r;
            tr2 += l * l * r * r;
        }
        let denom = 1.0 - tr2 / self.n as f64;
        if denom <= DENOMINATOR_TOL {
            return Err(Error::DegenerateDenominator(denom));
        }
        Ok((self.gt.sigma2() + tau * tau * bias) / denom)
    }

    pub fn bounds_at_tau(&self, tau: f64) -> [f64; 3] {
        let k = self.bound_consts;
        [k.yx_op, k.lmax_sq / tau, tau * k.third_scale]
    }

    pub fn c_sigma(&self, lambda: f64) -> Result<f64> {
        Ok(self.c_sigma_at_tau(self.tau(lambda)?))
    }

    pub fn l_sigma(&self, lambda: f64) -> Result<f64> {
        self.l_sigma_at_tau(self.tau(lambda)?)
    }

    pub fn c_bounds(&self, lambda: f64) -> Result<[f64; 3]> {
        Ok(self.bounds_at_tau(self.tau(lambda)?))
    }

    pub fn evaluate(&self, lambda: f64) -> Result<DeterministicPoint> {
        let tau = self.tau(lambda)?;
        Ok(DeterministicPoint {
            lambda,
            tau,
            c_sigma: self.c_sigma_at_tau(tau),
            l_sigma: self.l_sigma_at_tau(tau)?,
            bounds: self.bounds_at_tau(tau),
        })
    }

    pub fn thresholds(&self) -> Result<TradeoffThresholds> {
        let d = self.model.d();
        if 2 * d >= self.n {
            return Err(Error::ParameterRange(format!(
                "thresholds need 2d < n, got 2d = {} and n = {}",
                2 * d,
                self.n
            )));
        }
        let eig = self.model.spectrum();
        let tau_c = self.model.schur_spectrum()?.min().sqrt();
        let tau_l = eig.min();
        let lambda_c = lambda_from_tau(self.model, self.n, tau_c)?;
        let lambda_l = lambda_from_tau(self.model, self.n, tau_l)?;
        let shape = 2.0 * d as f64 / self.n as f64;
        let condition_holds = shape_ratio_condition(shape, eig.min(), eig.max(), self.gt.sigma2());
        let xx_dev = self.model.sigma_xx().into_owned() - DMatrix::identity(d, d);
        let xx_not_identity = linalg::op_norm(&xx_dev) > IDENTITY_XX_TOL;
        Ok(TradeoffThresholds { lambda_l, lambda_c, tau_l, tau_c, condition_holds, xx_not_identity })
    }
}

/// Precomputed pieces of the Schur-complement form of `C^Σ`, which only uses
/// the spectrum of `Σxx` and never the full `2d × 2d` decomposition.
#[derive(Debug, Clone)]
pub struct SchurPath {
    /// Eigenvalues of `Σxx`.
    mu: DVector<f64>,
    /// `Wᵀ` with `W = U_xxᵀ Σxy`.
    w: DMatrix<f64>,
    /// `U_xxᵀ θ*_x`.
    q: DVector<f64>,
    yy: DMatrix<f64>,
}

impl SchurPath {
    pub fn new(model: &CovarianceModel, gt: &GroundTruth) -> Result<Self> {
        gt.check_model(model)?;
        let xx = model.spectrum_xx();
        let w = linalg::mul_tn(&xx.vectors, &model.sigma_xy().into_owned());
        Ok(Self {
            mu: xx.values.clone(),
            w,
            q: xx.project(gt.theta_star_x()),
            yy: model.sigma_yy().into_owned(),
        })
    }

    /// `τ θ*_xᵀ(Σxx+τI)⁻¹Σxy (S^{Σ+τI})⁻¹ Σyxθ*_x` where `S^{Σ+τI}` is the Schur
    /// complement of `Σ + τI` with respect to its top-left block.
    pub fn c_sigma_at_tau(&self, tau: f64) -> Result<f64> {
        let d = self.mu.len();
        let inv: Vec<f64> = self.mu.iter().map(|&m| 1.0 / (m + tau)).collect();
        let mut scaled = self.w.clone();
        for (i, &s) in inv.iter().enumerate() {
            scaled.row_mut(i).scale_mut(s);
        }
        let mut schur = &self.yy - linalg::mul_tn(&self.w, &scaled);
        for i in 0..d {
            schur[(i, i)] += tau;
        }
        let schur = linalg::symmetrize(&schur);
        let left = scaled.tr_mul(&self.q);
        let right = self.w.tr_mul(&self.q);
        let chol = schur
            .cholesky()
            .ok_or_else(|| Error::Singular("shifted Schur complement is not positive definite".into()))?;
        let solved = chol.solve(&right);
        Ok(tau * left.dot(&solved))
    }
}

pub fn c_sigma(model: &CovarianceModel, gt: &GroundTruth, n: usize, lambda: f64) -> Result<f64> {
    DetEquiv::new(model, gt, n)?.c_sigma(lambda)
}

pub fn c_sigma_schur(model: &CovarianceModel, gt: &GroundTruth, n: usize, lambda: f64) -> Result<f64> {
    let tau = solve_tau(model, n, lambda)?;
    SchurPath::new(model, gt)?.c_sigma_at_tau(tau)
}

pub fn l_sigma(model: &CovarianceModel, gt: &GroundTruth, n: usize, lambda: f64) -> Result<f64> {
    DetEquiv::new(model, gt, n)?.l_sigma(lambda)
}

/// The three upper bounds on `|C^Σ(λ)|`:
/// `‖Σyx‖op`, `λmax(Σ)²/τ` and
/// `τ √(θ*_xᵀΣxxθ*_x) (λmax(Σyy) − λmin(S)) / (λmin(S) √λmin(Σxx))`.
pub fn c_bounds(model: &CovarianceModel, gt: &GroundTruth, n: usize, lambda: f64) -> Result<[f64; 3]> {
    DetEquiv::new(model, gt, n)?.c_bounds(lambda)
}

pub fn evaluate(model: &CovarianceModel, gt: &GroundTruth, n: usize, lambda: f64) -> Result<DeterministicPoint> {
    DetEquiv::new(model, gt, n)?.evaluate(lambda)
}

pub fn thresholds(model: &CovarianceModel, gt: &GroundTruth, n: usize) -> Result<TradeoffThresholds> {
    DetEquiv::new(model, gt, n)?.thresholds()
}

/// Geometric grid of `count` points from `min` to `max` inclusive.
pub fn geometric_grid(min: f64, max: f64, count: usize) -> Result<Vec<f64>> {
    if !(min > 0.0 && max >= min && max.is_finite()) || count == 0 {
        return Err(Error::ParameterRange(format!(
            "geometric grid needs 0 < min ≤ max and count ≥ 1, got ({min}, {max}, {count})"
        )));
    }
    if count == 1 {
        return Ok(vec![min]);
    }
    let (lmin, lmax) = (min.ln(), max.ln());
    let step = (lmax - lmin) / (count - 1) as f64;
    let mut grid: Vec<f64> = (0..count).map(|i| (lmin + step * i as f64).exp()).collect();
    grid[0] = min;
    grid[count - 1] = max;
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covmodel::SyntheticFamilyParams;
    use approx::assert_relative_eq;

    /// Positive root of `τ² + τ(1 − λ − γ) − λ = 0`, the isotropic form of the
    /// fixed point with `γ = 2d/n`.
    fn isotropic_tau(lambda: f64, gamma: f64) -> f64 {
        let b = 1.0 - lambda - gamma;
        let root = (b * b + 4.0 * lambda).sqrt();
        if b >= 0.0 {
            2.0 * lambda / (b + root)
        } else {
            0.5 * (root - b)
        }
    }

    fn corr2(alpha: f64) -> CovarianceModel {
        CovarianceModel::new(1, DMatrix::from_row_slice(2, 2, &[1.0, alpha, alpha, 1.0])).unwrap()
    }

    fn default_model() -> CovarianceModel {
        CovarianceModel::synthetic(&SyntheticFamilyParams::default_experiment()).unwrap()
    }

    #[test]
    fn tau_isotropic_examples() {
        let m = CovarianceModel::identity(1);
        let t1 = solve_tau(&m, 4, 1.0).unwrap();
        assert_relative_eq!(t1, (0.5 + 4.25f64.sqrt()) / 2.0, max_relative = 1e-12);
        assert_relative_eq!(t1, 1.280776, epsilon = 1e-6);
        // τ² + 0.49τ − 0.01 = 0
        let t2 = solve_tau(&m, 4, 0.01).unwrap();
        assert_relative_eq!(t2, isotropic_tau(0.01, 0.5), max_relative = 1e-12);
        assert_relative_eq!(t2, (-0.49 + (0.49f64 * 0.49 + 0.04).sqrt()) / 2.0, max_relative = 1e-12);
        assert_relative_eq!(t2, 0.019622, epsilon = 1e-6);
        assert!(tau_residual(&m, 4, 1.0, t1).abs() <= TAU_RESIDUAL_TOL);
    }

    #[test]
    fn tau_large_lambda_bracket() {
        let m = default_model();
        let lambda = 1e6;
        let tau = solve_tau(&m, 2000, lambda).unwrap();
        assert!(tau >= lambda);
        assert!(tau <= lambda * (1.0 + 800.0 * m.spectrum().max() / (2000.0 * lambda)));
    }

    #[test]
    fn tau_overparameterized_small_lambda() {
        // 2d > n: τ stays bounded away from zero as λ → 0
        let m = CovarianceModel::identity(5);
        for lambda in [1e-12, 1e-6, 1e-2] {
            let tau = solve_tau(&m, 4, lambda).unwrap();
            assert_relative_eq!(tau, isotropic_tau(lambda, 2.5), max_relative = 1e-10);
            assert!(tau_residual(&m, 4, lambda, tau).abs() <= TAU_RESIDUAL_TOL);
        }
    }

    #[test]
    fn lambda_zero_rejected() {
        let m = CovarianceModel::identity(1);
        assert!(matches!(solve_tau(&m, 4, 0.0), Err(Error::ParameterRange(_))));
        let gt = GroundTruth::first_basis(1, 0.0).unwrap();
        assert!(c_sigma(&m, &gt, 4, 0.0).is_err());
    }

    #[test]
    fn lambda_from_tau_inverts() {
        let m = CovarianceModel::identity(1);
        assert_relative_eq!(lambda_from_tau(&m, 4, 1.280776).unwrap(), 1.0, epsilon = 1e-5);
        assert_relative_eq!(lambda_from_tau(&m, 4, 0.0196224).unwrap(), 0.01, epsilon = 1e-6);
        let exact = (0.5 + 4.25f64.sqrt()) / 2.0;
        assert_relative_eq!(lambda_from_tau(&m, 4, exact).unwrap(), 1.0, max_relative = 1e-12);
        let dm = default_model();
        for tau in [0.01, 0.3, 2.0, 50.0] {
            let lam = lambda_from_tau(&dm, 2000, tau).unwrap();
            assert_relative_eq!(solve_tau(&dm, 2000, lam).unwrap(), tau, max_relative = 1e-10);
        }
    }

    #[test]
    fn lambda_from_tau_out_of_range() {
        // 2d/n = 2.5: the ridgeless limit is τ₀ = 1.5
        let m = CovarianceModel::identity(5);
        assert!(matches!(lambda_from_tau(&m, 4, 1.0), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn c_sigma_block_diagonal_is_zero() {
        let mut s = DMatrix::identity(4, 4);
        s[(2, 2)] = 1.4;
        s[(3, 3)] = 0.6;
        let m = CovarianceModel::new(2, s).unwrap();
        let gt = GroundTruth::normalized(DVector::from_vec(vec![0.6, 0.8]), 0.1).unwrap();
        for lambda in [0.01, 1.0, 100.0] {
            assert_eq!(c_sigma(&m, &gt, 10, lambda).unwrap().abs(), 0.0);
            assert_eq!(c_sigma_schur(&m, &gt, 10, lambda).unwrap(), 0.0);
            assert_eq!(c_bounds(&m, &gt, 10, lambda).unwrap()[0], 0.0);
        }
    }

    #[test]
    fn c_sigma_scalar_correlation() {
        let m = corr2(0.5);
        let gt = GroundTruth::first_basis(1, 0.0).unwrap();
        let n = 10;
        let lambda = lambda_from_tau(&m, n, 1.0).unwrap();
        let expect = 0.25 / 3.75;
        assert_relative_eq!(c_sigma(&m, &gt, n, lambda).unwrap(), expect, epsilon = 1e-12);
        assert_relative_eq!(c_sigma_schur(&m, &gt, n, lambda).unwrap(), expect, epsilon = 1e-12);
        let de = DetEquiv::new(&m, &gt, n).unwrap();
        assert_relative_eq!(de.c_sigma_at_tau(1.0), 0.066667, epsilon = 1e-6);
    }

    #[test]
    fn bounds_scalar_correlation() {
        let m = corr2(0.5);
        let gt = GroundTruth::first_basis(1, 0.0).unwrap();
        let de = DetEquiv::new(&m, &gt, 10).unwrap();
        let b = de.bounds_at_tau(1.0);
        assert_relative_eq!(b[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(b[1], 2.25, epsilon = 1e-12);
        assert_relative_eq!(b[2], 1.0 / 3.0, epsilon = 1e-12);
        assert!(b.iter().all(|&x| x >= de.c_sigma_at_tau(1.0)));
    }

    #[test]
    fn default_model_small_lambda_vanishes() {
        let m = default_model();
        let gt = GroundTruth::first_basis(400, 0.25).unwrap();
        let de = DetEquiv::new(&m, &gt, 2000).unwrap();
        assert!(de.c_sigma(1e-6).unwrap().abs() < 1e-4);
        assert!(de.c_sigma(1e-7).unwrap().abs() < 1e-3);
        assert!(de.c_sigma(1e7).unwrap().abs() < 1e-3);
        let sp = SchurPath::new(&m, &gt).unwrap();
        let tau = de.tau(1e-6).unwrap();
        assert!((sp.c_sigma_at_tau(tau).unwrap() - de.c_sigma_at_tau(tau)).abs() < 1e-9);
    }

    #[test]
    fn default_model_bounds_on_grid() {
        let m = default_model();
        let gt = GroundTruth::first_basis(400, 0.25).unwrap();
        let de = DetEquiv::new(&m, &gt, 2000).unwrap();
        for lambda in geometric_grid(0.01, 100.0, 25).unwrap() {
            let p = de.evaluate(lambda).unwrap();
            assert!(p.c_sigma.abs() <= p.min_bound(), "{p:?}");
            assert!(p.c_sigma >= -1e-12);
            assert!(p.tau >= lambda && p.tau - lambda <= 0.4 * m.spectrum().max() + 1e-12);
        }
    }

    #[test]
    fn l_sigma_isotropic_example() {
        let m = CovarianceModel::identity(1);
        let gt = GroundTruth::first_basis(1, 0.25).unwrap();
        let tau = (0.5 + 4.25f64.sqrt()) / 2.0;
        let expect = (0.25 + tau * tau / ((1.0 + tau) * (1.0 + tau))) / (1.0 - 0.5 / ((1.0 + tau) * (1.0 + tau)));
        let got = l_sigma(&m, &gt, 4, 1.0).unwrap();
        assert_relative_eq!(got, expect, max_relative = 1e-12);
        assert_relative_eq!(got, 0.625459, epsilon = 1e-6);
    }

    #[test]
    fn l_sigma_limits() {
        let m = default_model();
        let gt = GroundTruth::first_basis(400, 0.25).unwrap();
        let null_risk = 0.25 + 1.0;
        let far = l_sigma(&m, &gt, 2000, 1e8).unwrap();
        assert_relative_eq!(far, null_risk, max_relative = 1e-3);
        let quiet = GroundTruth::first_basis(400, 0.0).unwrap();
        assert!(l_sigma(&m, &quiet, 2000, 1e-8).unwrap() < 1e-4);
    }

    #[test]
    fn l_sigma_degenerate_denominator() {
        // 2d = n with λ → 0 drives the denominator to zero
        let m = CovarianceModel::identity(2);
        let gt = GroundTruth::first_basis(2, 0.1).unwrap();
        assert!(matches!(l_sigma(&m, &gt, 4, 1e-30), Err(Error::DegenerateDenominator(_))));
    }

    #[test]
    fn thresholds_identity() {
        let m = CovarianceModel::identity(3);
        let gt = GroundTruth::first_basis(3, 0.25).unwrap();
        let t = thresholds(&m, &gt, 100).unwrap();
        assert_relative_eq!(t.tau_c, 1.0, epsilon = 1e-12);
        assert_relative_eq!(t.tau_l, 1.0, epsilon = 1e-12);
        assert_relative_eq!(t.lambda_c, t.lambda_l, max_relative = 1e-12);
        assert!(!t.xx_not_identity);
    }

    #[test]
    fn thresholds_default_model() {
        let m = default_model();
        let gt = GroundTruth::first_basis(400, 0.25).unwrap();
        let t = thresholds(&m, &gt, 2000).unwrap();
        assert_relative_eq!(t.tau_c, 0.5f64.sqrt(), max_relative = 1e-12);
        assert_relative_eq!(t.tau_l, m.spectrum().min(), max_relative = 1e-12);
        assert!(t.lambda_c >= t.lambda_l);
        assert!(!t.condition_holds);
        assert!(!t.xx_not_identity);
        assert!(thresholds(&m, &gt, 800).is_err());
    }

    #[test]
    fn thresholds_flag_non_identity_xx() {
        let s = DMatrix::from_row_slice(2, 2, &[1.2, 0.3, 0.3, 0.8]);
        let m = CovarianceModel::new(1, s).unwrap();
        let gt = GroundTruth::first_basis(1, 0.25).unwrap();
        assert!(thresholds(&m, &gt, 100).unwrap().xx_not_identity);
    }

    #[test]
    fn shape_ratio_examples() {
        assert!(!shape_ratio_condition(0.8, 1.0, 2.0, 0.25));
        assert!(shape_ratio_condition(0.25, 1.0, 2.0, 0.25));
        assert!(!shape_ratio_condition(0.2501, 1.0, 2.0, 0.25));
        // noise-free: the min is 1
        assert!(shape_ratio_condition(0.25, 1.0, 100.0, 0.0));
    }

    #[test]
    fn ood_bound_values() {
        assert_eq!(ood_lower_bound(0.0).unwrap(), 0.0);
        assert_eq!(ood_lower_bound(1.0).unwrap(), 2.0);
        assert_relative_eq!(ood_lower_bound(0.6).unwrap(), 0.4, epsilon = 1e-15);
        assert_relative_eq!(ood_lower_bound(-0.6).unwrap(), 0.4, epsilon = 1e-15);
        assert!(matches!(ood_lower_bound(1.0 + 1e-9), Err(Error::Domain(_))));
        assert!(ood_lower_bound(f64::NAN).is_err());
    }

    #[test]
    fn ground_truth_checks() {
        assert!(GroundTruth::new(DVector::from_vec(vec![1.0, 1.0]), 0.0).is_err());
        assert!(GroundTruth::new(DVector::from_vec(vec![1.0, 0.0]), -1.0).is_err());
        let gt = GroundTruth::normalized(DVector::from_vec(vec![3.0, 4.0]), 0.5).unwrap();
        assert_relative_eq!(gt.theta_star(), DVector::from_vec(vec![0.6, 0.8, 0.0, 0.0]), epsilon = 1e-15);
        let m = CovarianceModel::identity(3);
        assert!(matches!(DetEquiv::new(&m, &gt, 10), Err(Error::Dimension(_))));
    }

    #[test]
    fn grid_endpoints() {
        let g = geometric_grid(1e-3, 1e3, 7).unwrap();
        assert_eq!(g.len(), 7);
        assert_eq!(g[0], 1e-3);
        assert_eq!(g[6], 1e3);
        assert_relative_eq!(g[3], 1.0, max_relative = 1e-12);
        assert!(geometric_grid(0.0, 1.0, 3).is_err());
    }
}
