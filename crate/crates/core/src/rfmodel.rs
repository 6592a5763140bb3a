//! Random features regression `f(θ, z) = φ(Vz)ᵀθ` and its linear equivalent.
//!
//! A random features predictor fitted with ridge `λ` behaves, for wide
//! layers, like linear ridge regression at the effective strength
//! `λ̃ = 2μ̃²d/(μ₁²n) + 2dλ/(μ₁²p)`, where `μ₁` and `μ̃²` are Hermite statistics
//! of the activation.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covmodel::CovarianceModel;
use crate::detequiv::GroundTruth;
use crate::empirical::{self, Dataset, McEstimate};
use crate::error::{Error, Result};
use crate::linalg::{self, SymEig};

/// Default number of Gauss–Hermite nodes.
pub const DEFAULT_NODES: usize = 200;
/// Default cap on the number of feature-matrix entries held at once.
pub const DEFAULT_FEATURE_BUDGET: usize = 200_000_000;
/// Working-set cap for prediction and Monte Carlo feature blocks.
const EVAL_BUDGET: usize = 1 << 24;
/// Rows per Monte Carlo block.
const MC_CHUNK: usize = 2048;
/// Ridgeless kernel solves are refused below this `λmin/λmax`.
pub const KERNEL_COND_TOL: f64 = 1e-12;

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// User-supplied odd activation, admitted only after a spot check of
/// `φ(−u) = −φ(u)`.
#[derive(Clone)]
pub struct CustomActivation {
    name: String,
    f: ScalarFn,
}

impl fmt::Debug for CustomActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomActivation").field("name", &self.name).finish()
    }
}

/// Odd pointwise activation.
#[derive(Debug, Clone)]
pub enum Activation {
    Tanh,
    /// `c₁h₁ + c₃h₃` in the orthonormal probabilists' Hermite basis,
    /// `h₁(u) = u`, `h₃(u) = (u³ − 3u)/√6`.
    HermiteMix { c1: f64, c3: f64 },
    Identity,
    Custom(CustomActivation),
}

const ODD_CHECK_POINTS: usize = 1000;
const ODD_CHECK_TOL: f64 = 1e-12;

impl Activation {
    /// Wraps `f` after checking oddness at 10³ pseudo-random points in `[−10, 10]`.
    pub fn custom(name: impl Into<String>, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Result<Self> {
        let act = Activation::Custom(CustomActivation { name: name.into(), f: Arc::new(f) });
        act.check_odd()?;
        Ok(act)
    }

    /// Largest `|φ(u) + φ(−u)| / max(1, |φ(u)|)` over the spot-check points.
    pub fn oddness_defect(&self) -> f64 {
        let mut r = empirical::rng(0x0dd);
        let mut worst = 0.0f64;
        for _ in 0..ODD_CHECK_POINTS {
            let u: f64 = r.gen_range(-10.0..10.0);
            let (a, b) = (self.eval(u), self.eval(-u));
            let defect = (a + b).abs() / a.abs().max(1.0);
            worst = if defect.is_nan() { f64::INFINITY } else { worst.max(defect) };
        }
        worst
    }

    pub fn check_odd(&self) -> Result<()> {
        let defect = self.oddness_defect();
        if defect > ODD_CHECK_TOL {
            return Err(Error::NotOdd(defect));
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        match self {
            Activation::Tanh => "tanh",
            Activation::HermiteMix { .. } => "hermite_mix",
            Activation::Identity => "identity",
            Activation::Custom(c) => &c.name,
        }
    }

    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        match self {
            Activation::Tanh => tanh(u),
            Activation::HermiteMix { c1, c3 } => c1 * u + c3 * (u * u * u - 3.0 * u) / 6f64.sqrt(),
            Activation::Identity => u,
            Activation::Custom(c) => (c.f)(u),
        }
    }

    /// Applies `φ` elementwise, in parallel over fixed-size chunks.
    pub fn apply_in_place(&self, data: &mut [f64]) {
        if let Activation::Identity = self {
            return;
        }
        data.par_chunks_mut(1 << 14).for_each(|chunk| {
            for v in chunk {
                *v = self.eval(*v);
            }
        });
    }
}

/// `tanh` to within a few ulps. The libm version is several times slower on
/// inputs with random signs and magnitudes.
#[inline]
pub fn tanh(u: f64) -> f64 {
    let a = u.abs();
    if !(a <= 20.0) {
        return if a.is_nan() { u } else { u.signum() };
    }
    let t = if a < 0.55 {
        let e = (-2.0 * a).exp_m1();
        -e / (2.0 + e)
    } else {
        let e = (-2.0 * a).exp();
        (1.0 - e) / (1.0 + e)
    };
    t.copysign(u)
}

/// Gauss–Hermite rule for the standard normal weight: `E[f(ρ)] ≈ Σ wᵢ f(xᵢ)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub–Welsch: nodes are the eigenvalues of the Jacobi matrix of the
    /// probabilists' Hermite recurrence, weights the squared first components
    /// of its normalized eigenvectors.
    pub fn new(n: usize) -> Self {
        let mut j = DMatrix::zeros(n, n);
        for k in 1..n {
            let b = (k as f64).sqrt();
            j[(k - 1, k)] = b;
            j[(k, k - 1)] = b;
        }
        let eig = SymEig::new(&j);
        let nodes = eig.values.iter().copied().collect();
        let weights = (0..n).map(|i| eig.vectors[(0, i)] * eig.vectors[(0, i)]).collect();
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// `μ̃²` values this close to zero are reported as exactly zero.
const MU_TILDE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HermiteStats {
    /// `E[ρφ(ρ)]`.
    pub mu1: f64,
    /// `Σ_{k≥2} μₖ² = E[φ(ρ)²] − μ₁²`.
    pub mu_tilde_sq: f64,
    /// `E[φ(ρ)²]`.
    pub l2_norm_sq: f64,
}

impl HermiteStats {
    pub fn ratio(&self) -> f64 {
        self.mu_tilde_sq / (self.mu1 * self.mu1)
    }

    fn from_rule(act: &Activation, rule: &GaussHermite) -> Result<Self> {
        let mu1 = rule.expect(|u| u * act.eval(u));
        let l2 = rule.expect(|u| {
            let v = act.eval(u);
            v * v
        });
        let rest = l2 - mu1 * mu1;
        if rest < -MU_TILDE_FLOOR {
            return Err(Error::QuadratureInstability(format!("E[φ²] − μ₁² = {rest} is negative")));
        }
        // a purely linear φ leaves only rounding noise here
        let mu_tilde_sq = if rest.abs() <= MU_TILDE_FLOOR { 0.0 } else { rest };
        Ok(Self { mu1, mu_tilde_sq, l2_norm_sq: l2 })
    }
}

/// `μ₁`, `μ̃²` and `E[φ²]` by Gauss–Hermite quadrature, cross-checked against a
/// rule with twice the nodes.
pub fn hermite_stats(act: &Activation, nodes: usize) -> Result<HermiteStats> {
    if nodes < 32 {
        return Err(Error::ParameterRange(format!("{nodes} quadrature nodes, need at least 32")));
    }
    let base = HermiteStats::from_rule(act, &GaussHermite::new(nodes))?;
    let fine = HermiteStats::from_rule(act, &GaussHermite::new(2 * nodes))?;
    let drift = [
        (base.mu1 - fine.mu1).abs(),
        (base.mu_tilde_sq - fine.mu_tilde_sq).abs(),
        (base.l2_norm_sq - fine.l2_norm_sq).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    if !(drift <= 1e-6) {
        return Err(Error::QuadratureInstability(format!(
            "doubling {nodes} nodes moved the statistics by {drift}"
        )));
    }
    Ok(base)
}

/// `λ̃ = 2μ̃²d/(μ₁²n) + 2dλ/(μ₁²p)`.
pub fn effective_lambda(stats: &HermiteStats, d: usize, n: usize, p: usize, lambda: f64) -> Result<f64> {
    if stats.mu1 == 0.0 || !stats.mu1.is_finite() {
        return Err(Error::ZeroMu1);
    }
    if n == 0 || p == 0 {
        return Err(Error::ParameterRange("n and p must be positive".into()));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::ParameterRange(format!("λ = {lambda} must be nonnegative")));
    }
    let m2 = stats.mu1 * stats.mu1;
    let d = d as f64;
    Ok(2.0 * stats.mu_tilde_sq * d / (m2 * n as f64) + 2.0 * d * lambda / (m2 * p as f64))
}

/// First-layer weights `V ∈ R^{p×2d}` with i.i.d. `N(0, 1/(2d))` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct RfConfig {
    p: usize,
    seed: u64,
    v: DMatrix<f64>,
}

impl RfConfig {
    pub fn sample(p: usize, dim: usize, seed: u64) -> Result<Self> {
        if p == 0 || dim == 0 {
            return Err(Error::ParameterRange("p and the input dimension must be positive".into()));
        }
        let mut r = empirical::rng(seed);
        let mut v = empirical::normal_matrix(&mut r, p, dim);
        v /= (dim as f64).sqrt();
        Ok(Self { p, seed, v })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn dim(&self) -> usize {
        self.v.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    /// Calls `visit(offset, Φ_b)` for consecutive feature blocks of
    /// `Φ = φ(Z Vᵀ)`, each holding at most `budget` entries.
    fn feature_blocks(
        &self,
        act: &Activation,
        z: &DMatrix<f64>,
        budget: usize,
        mut visit: impl FnMut(usize, &DMatrix<f64>),
    ) {
        let width = (budget / z.nrows().max(1)).clamp(1, self.p);
        let mut start = 0;
        while start < self.p {
            let cols = width.min(self.p - start);
            let mut block = linalg::mul_nt_rows(z, &self.v, start, cols);
            act.apply_in_place(block.as_mut_slice());
            visit(start, &block);
            start += cols;
        }
    }

    /// `φ(Z Vᵀ) θ` for every row of `z`.
    pub fn predict_batch(&self, act: &Activation, theta: &DVector<f64>, z: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check(theta, z.ncols())?;
        let mut out = DVector::zeros(z.nrows());
        self.feature_blocks(act, z, EVAL_BUDGET, |start, block| {
            out.gemv(1.0, block, &theta.rows(start, block.ncols()), 1.0);
        });
        Ok(out)
    }

    fn check(&self, theta: &DVector<f64>, dim: usize) -> Result<()> {
        if theta.len() != self.p || dim != self.dim() {
            return Err(Error::Dimension(format!(
                "θ has length {} and inputs have dimension {dim}; expected p = {} and {}",
                theta.len(),
                self.p,
                self.dim()
            )));
        }
        Ok(())
    }
}

/// `f_RF(θ, z) = φ(Vz)ᵀθ`.
pub fn rf_predict(theta: &DVector<f64>, config: &RfConfig, act: &Activation, z: &DVector<f64>) -> Result<f64> {
    config.check(theta, z.len())?;
    let pre = &config.v * z;
    Ok(pre.iter().zip(theta.iter()).map(|(&u, &t)| act.eval(u) * t).sum())
}

/// Kernel `ΦΦᵀ` of one dataset, accumulated once over feature blocks and
/// solved for many `λ`.
#[derive(Debug, Clone)]
pub struct RfRegression<'a> {
    data: &'a Dataset,
    config: &'a RfConfig,
    act: Activation,
    kernel: DMatrix<f64>,
    budget: usize,
}

impl<'a> RfRegression<'a> {
    pub fn new(data: &'a Dataset, config: &'a RfConfig, act: &Activation) -> Result<Self> {
        Self::with_budget(data, config, act, DEFAULT_FEATURE_BUDGET)
    }

    pub fn with_budget(data: &'a Dataset, config: &'a RfConfig, act: &Activation, budget: usize) -> Result<Self> {
        if data.dim() != config.dim() {
            return Err(Error::Dimension(format!(
                "dataset dimension {} differs from V's {}",
                data.dim(),
                config.dim()
            )));
        }
        let n = data.n();
        let mut kernel = DMatrix::zeros(n, n);
        config.feature_blocks(act, data.z(), budget.max(1), |_, block| {
            linalg::gram_rows_accumulate(&mut kernel, block);
        });
        Ok(Self { data, config, act: act.clone(), kernel, budget: budget.max(1) })
    }

    /// `ΦΦᵀ`.
    pub fn kernel(&self) -> &DMatrix<f64> {
        &self.kernel
    }

    /// `θ̂_RF = Φᵀ(ΦΦᵀ + nλI)⁻¹G`.
    pub fn fit(&self, lambda: f64) -> Result<DVector<f64>> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::ParameterRange(format!("λ = {lambda} must be nonnegative and finite")));
        }
        let g = self.data.g();
        let alpha = if lambda == 0.0 {
            let eig = SymEig::new(&self.kernel);
            let (lo, hi) = (eig.min(), eig.max());
            if !(hi > 0.0) || lo / hi < KERNEL_COND_TOL {
                return Err(Error::Singular(format!(
                    "feature kernel condition ratio {} below {KERNEL_COND_TOL}",
                    if hi > 0.0 { lo / hi } else { 0.0 }
                )));
            }
            let c = eig.project(g);
            let scaled = DVector::from_iterator(c.len(), c.iter().zip(eig.values.iter()).map(|(&c, &l)| c / l));
            eig.reconstruct(&scaled)
        } else {
            let mut a = self.kernel.clone();
            let shift = self.data.n() as f64 * lambda;
            for i in 0..a.nrows() {
                a[(i, i)] += shift;
            }
            a.cholesky()
                .ok_or_else(|| Error::Singular(format!("feature kernel system not positive definite at λ = {lambda}")))?
                .solve(g)
        };
        let mut theta = DVector::zeros(self.config.p());
        self.config.feature_blocks(&self.act, self.data.z(), self.budget, |start, block| {
            theta.rows_mut(start, block.ncols()).copy_from(&block.tr_mul(&alpha));
        });
        Ok(theta)
    }
}

pub fn rf_fit(data: &Dataset, config: &RfConfig, act: &Activation, lambda: f64) -> Result<DVector<f64>> {
    RfRegression::new(data, config, act)?.fit(lambda)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceGap {
    pub lambda: f64,
    pub lambda_tilde: f64,
    pub max_gap: f64,
    pub mean_gap: f64,
}

/// Compares the RF predictor at `λ` with linear ridge at `λ̃` on the rows of
/// `test_points`.
pub fn equivalence_gap(
    data: &Dataset,
    config: &RfConfig,
    act: &Activation,
    stats: &HermiteStats,
    lambda: f64,
    test_points: &DMatrix<f64>,
) -> Result<EquivalenceGap> {
    let reg = RfRegression::new(data, config, act)?;
    equivalence_gap_with(&reg, stats, lambda, test_points)
}

/// As [`equivalence_gap`], reusing an accumulated kernel.
pub fn equivalence_gap_with(
    reg: &RfRegression<'_>,
    stats: &HermiteStats,
    lambda: f64,
    test_points: &DMatrix<f64>,
) -> Result<EquivalenceGap> {
    if test_points.nrows() == 0 {
        return Err(Error::ParameterRange("no test points".into()));
    }
    let data = reg.data;
    let d = data.dim() / 2;
    let lambda_tilde = effective_lambda(stats, d, data.n(), reg.config.p(), lambda)?;
    let theta_rf = reg.fit(lambda)?;
    let theta_lr = empirical::ridge_fit(data, lambda_tilde)?.theta_hat;
    let f_rf = reg.config.predict_batch(&reg.act, &theta_rf, test_points)?;
    let f_lr = test_points * theta_lr;
    let gaps: Vec<f64> = f_rf.iter().zip(f_lr.iter()).map(|(a, b)| (a - b).abs()).collect();
    let max_gap = gaps.iter().copied().fold(0.0, f64::max);
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    Ok(EquivalenceGap { lambda, lambda_tilde, max_gap, mean_gap })
}

/// `n` i.i.d. draws from `N(0, Σ)` as rows.
pub fn sample_inputs(model: &CovarianceModel, n: usize, seed: u64) -> DMatrix<f64> {
    let mut r = empirical::rng(seed);
    let w = empirical::normal_matrix(&mut r, n, model.dim());
    linalg::mul(&w, model.sqrt_sigma())
}

fn check_rf(theta: &DVector<f64>, config: &RfConfig, model: &CovarianceModel, gt: &GroundTruth) -> Result<()> {
    gt.check_model(model)?;
    config.check(theta, model.dim())
}

/// Spurious covariance of the linear predictor `μ₁Vᵀθ`, i.e. the part of the
/// RF predictor carried by the first Hermite component.
pub fn rf_linearized_spurious_cov(
    theta: &DVector<f64>,
    config: &RfConfig,
    stats: &HermiteStats,
    model: &CovarianceModel,
    gt: &GroundTruth,
) -> Result<f64> {
    check_rf(theta, config, model, gt)?;
    let w = config.v().tr_mul(theta) * stats.mu1;
    empirical::spurious_cov_of(&w, model, gt)
}

/// Exact spurious covariance of the RF predictor under Gaussian data.
///
/// Feature `i` sees `uᵢ = vᵢᵀ[x̃; y] ~ N(0, sᵢ²)`, jointly Gaussian with the label
/// through `Cov(uᵢ, θ*_xᵀx) = v_{i,y}ᵀΣyxθ*_x`. Stein's lemma then gives
/// `Cov(φ(uᵢ), g) = v_{i,y}ᵀΣyxθ*_x · E[ρφ(sᵢρ)]/sᵢ`, and the expectation is a
/// one-dimensional Gauss–Hermite integral.
pub fn rf_spurious_cov_quadrature(
    theta: &DVector<f64>,
    config: &RfConfig,
    act: &Activation,
    model: &CovarianceModel,
    gt: &GroundTruth,
    nodes: usize,
) -> Result<f64> {
    check_rf(theta, config, model, gt)?;
    let d = model.d();
    let rule = GaussHermite::new(nodes);
    let v = config.v();
    let vx = v.columns(0, d).into_owned();
    let vy = v.columns(d, d).into_owned();
    let cross = model.sigma_yx() * gt.theta_star_x();
    let link = &vy * &cross;
    let qx = linalg::mul(&vx, &model.sigma_xx().into_owned());
    let qy = linalg::mul(&vy, &model.sigma_yy().into_owned());
    let total: f64 = (0..config.p())
        .into_par_iter()
        .map(|i| {
            let s2 = vx.row(i).dot(&qx.row(i)) + vy.row(i).dot(&qy.row(i));
            if s2 <= 0.0 || theta[i] == 0.0 {
                return 0.0;
            }
            let s = s2.sqrt();
            let slope = rule.expect(|r| r * act.eval(s * r)) / s;
            theta[i] * link[i] * slope
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    Ok(total)
}

/// Monte Carlo estimate of `Cov(φ(V[x̃; y])ᵀθ, g)` over `m` draws.
///
/// The linear component `μ₁(Vᵀθ)ᵀ[x̃; y]` has a known covariance with `g`; it
/// is used as a control variate, so only the residual non-linear part is
/// estimated by sampling.
pub fn rf_spurious_cov_mc(
    theta: &DVector<f64>,
    config: &RfConfig,
    act: &Activation,
    stats: &HermiteStats,
    model: &CovarianceModel,
    gt: &GroundTruth,
    m: usize,
    seed: u64,
) -> Result<McEstimate> {
    check_rf(theta, config, model, gt)?;
    if m < 2 {
        return Err(Error::ParameterRange(format!("m = {m} must be at least 2")));
    }
    let d = model.d();
    let w = config.v().tr_mul(theta) * stats.mu1;
    let linear_cov = empirical::spurious_cov_of(&w, model, gt)?;
    let s = gt.sigma2().sqrt();
    let mut r = empirical::rng(seed);
    let mut resid = Vec::with_capacity(m);
    let mut labels = Vec::with_capacity(m);
    let mut done = 0;
    while done < m {
        let b = MC_CHUNK.min(m - done);
        let joint = linalg::mul(&empirical::normal_matrix(&mut r, b, 2 * d), model.sqrt_sigma());
        let core = linalg::mul(&empirical::normal_matrix(&mut r, b, d), model.sqrt_sigma_xx());
        let mut ood = joint.clone();
        ood.columns_mut(0, d).copy_from(&core);
        let f = config.predict_batch(act, theta, &ood)?;
        let lin = &ood * &w;
        let g = joint.columns(0, d) * gt.theta_star_x();
        for i in 0..b {
            let eps = if s > 0.0 { s * r.sample::<f64, _>(StandardNormal) } else { 0.0 };
            resid.push(f[i] - lin[i]);
            labels.push(g[i] + eps);
        }
        done += b;
    }
    let rest = empirical::sample_covariance(&resid, &labels);
    Ok(McEstimate { mean: linear_cov + rest.mean, std_error: rest.std_error, m })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covmodel::SyntheticFamilyParams;
    use approx::assert_relative_eq;

    fn phi1() -> Activation {
        Activation::HermiteMix { c1: 1.0, c3: 0.1 }
    }

    #[test]
    fn quadrature_weights_and_moments() {
        let rule = GaussHermite::new(40);
        assert_relative_eq!(rule.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-13);
        assert_relative_eq!(rule.expect(|x| x * x), 1.0, epsilon = 1e-12);
        assert_relative_eq!(rule.expect(|x| x.powi(4)), 3.0, epsilon = 1e-11);
        assert_relative_eq!(rule.expect(|x| x.powi(6)), 15.0, epsilon = 1e-10);
        assert!(rule.expect(|x| x.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn identity_stats() {
        let s = hermite_stats(&Activation::Identity, DEFAULT_NODES).unwrap();
        assert_relative_eq!(s.mu1, 1.0, epsilon = 1e-12);
        assert_eq!(s.mu_tilde_sq, 0.0);
    }

    #[test]
    fn scaled_identity_stats() {
        let act = Activation::custom("3x", |u| 3.0 * u).unwrap();
        let s = hermite_stats(&act, 64).unwrap();
        assert_relative_eq!(s.mu1, 3.0, epsilon = 1e-12);
        assert!(s.mu_tilde_sq.abs() < 1e-11);
    }

    #[test]
    fn hermite_mix_ratio() {
        let s = hermite_stats(&phi1(), DEFAULT_NODES).unwrap();
        assert_relative_eq!(s.mu1, 1.0, epsilon = 1e-12);
        assert!((s.ratio() - 0.01).abs() <= 1e-8);
        let other = hermite_stats(&Activation::HermiteMix { c1: 0.5, c3: -0.3 }, 64).unwrap();
        assert_relative_eq!(other.mu_tilde_sq, 0.09, epsilon = 1e-12);
    }

    #[test]
    fn fast_tanh_matches_libm() {
        for i in -40_000..=40_000 {
            let u = i as f64 * 7.5e-4;
            let (a, b) = (tanh(u), u.tanh());
            assert!((a - b).abs() <= 1e-15 * b.abs(), "{u}: {a} vs {b}");
        }
        assert_eq!(tanh(0.0), 0.0);
        assert_eq!(tanh(-1e300), -1.0);
        assert_eq!(tanh(f64::INFINITY), 1.0);
        assert!(tanh(f64::NAN).is_nan());
        assert_eq!(tanh(1e-300), 1e-300);
    }

    #[test]
    fn tanh_stats_baseline() {
        let s = hermite_stats(&Activation::Tanh, DEFAULT_NODES).unwrap();
        let fine = hermite_stats(&Activation::Tanh, 2 * DEFAULT_NODES).unwrap();
        assert!((s.mu1 - fine.mu1).abs() < 1e-10);
        assert!((s.mu_tilde_sq - fine.mu_tilde_sq).abs() < 1e-10);
        assert_relative_eq!(s.mu1, 0.605706, epsilon = 1e-6);
        assert_relative_eq!(s.ratio(), 0.074726, epsilon = 1e-6);
    }

    #[test]
    fn too_few_nodes() {
        assert!(matches!(hermite_stats(&Activation::Tanh, 16), Err(Error::ParameterRange(_))));
    }

    #[test]
    fn unstable_quadrature_detected() {
        let act = Activation::custom("sign", |u: f64| if u == 0.0 { 0.0 } else { u.signum() }).unwrap();
        assert!(matches!(hermite_stats(&act, 32), Err(Error::QuadratureInstability(_))));
    }

    #[test]
    fn non_odd_rejected() {
        assert!(matches!(Activation::custom("relu", |u: f64| u.max(0.0)), Err(Error::NotOdd(_))));
        assert!(Activation::custom("sin", f64::sin).is_ok());
        assert_eq!(Activation::Tanh.oddness_defect(), 0.0);
    }

    #[test]
    fn effective_lambda_values() {
        let id = hermite_stats(&Activation::Identity, 64).unwrap();
        assert_eq!(effective_lambda(&id, 400, 2000, 1000, 0.0).unwrap(), 0.0);
        let mix = hermite_stats(&phi1(), DEFAULT_NODES).unwrap();
        assert_relative_eq!(effective_lambda(&mix, 400, 2000, 1000, 0.0).unwrap(), 0.004, epsilon = 1e-12);
        let lt = effective_lambda(&mix, 400, 2000, 1000, 1.0).unwrap();
        assert_relative_eq!(lt, 0.004 + 0.8, epsilon = 1e-12);
        let zero = HermiteStats { mu1: 0.0, mu_tilde_sq: 1.0, l2_norm_sq: 1.0 };
        assert!(matches!(effective_lambda(&zero, 4, 4, 4, 0.0), Err(Error::ZeroMu1)));
    }

    #[test]
    fn weight_variance() {
        let c = RfConfig::sample(500, 40, 3).unwrap();
        let var = c.v().iter().map(|x| x * x).sum::<f64>() / (500.0 * 40.0);
        assert!((var * 40.0 - 1.0).abs() < 0.05, "{var}");
    }

    fn setup(d: usize, n: usize, seed: u64) -> (CovarianceModel, GroundTruth, Dataset) {
        let m = CovarianceModel::synthetic(&SyntheticFamilyParams { d, ev_max_yy: 2.0, beta: 0.5 }).unwrap();
        let gt = GroundTruth::first_basis(d, 0.25).unwrap();
        let ds = Dataset::sample(&m, &gt, n, seed).unwrap();
        (m, gt, ds)
    }

    #[test]
    fn zero_labels_give_zero_weights() {
        let (_, _, ds) = setup(4, 10, 1);
        let zero = Dataset::from_design(ds.z().clone(), DVector::zeros(10)).unwrap();
        let c = RfConfig::sample(50, 8, 2).unwrap();
        assert_eq!(rf_fit(&zero, &c, &Activation::Tanh, 0.1).unwrap().amax(), 0.0);
    }

    #[test]
    fn huge_ridge_shrinks() {
        let (_, _, ds) = setup(4, 10, 1);
        let c = RfConfig::sample(50, 8, 2).unwrap();
        assert!(rf_fit(&ds, &c, &Activation::Tanh, 1e12).unwrap().norm() <= 1e-6);
    }

    #[test]
    fn blocked_kernel_matches_single_block() {
        let (_, _, ds) = setup(4, 12, 1);
        let c = RfConfig::sample(37, 8, 2).unwrap();
        let one = RfRegression::new(&ds, &c, &Activation::Tanh).unwrap();
        let many = RfRegression::with_budget(&ds, &c, &Activation::Tanh, 12 * 5).unwrap();
        assert_relative_eq!(one.kernel().clone(), many.kernel().clone(), epsilon = 1e-12);
        assert_relative_eq!(one.fit(0.1).unwrap(), many.fit(0.1).unwrap(), epsilon = 1e-12);
        let phi = (ds.z() * c.v().transpose()).map(f64::tanh);
        assert_relative_eq!(one.kernel().clone(), &phi * phi.transpose(), epsilon = 1e-10);
    }

    #[test]
    fn predict_examples() {
        let c = RfConfig::sample(30, 6, 5).unwrap();
        let theta = DVector::from_fn(30, |i, _| (i as f64 - 15.0) / 10.0);
        let z = DVector::from_vec(vec![0.3, -1.0, 0.5, 0.2, -0.4, 1.1]);
        assert_eq!(rf_predict(&DVector::zeros(30), &c, &Activation::Tanh, &z).unwrap(), 0.0);
        assert_eq!(rf_predict(&theta, &c, &Activation::Tanh, &DVector::zeros(6)).unwrap(), 0.0);
        let lin = rf_predict(&theta, &c, &Activation::Identity, &z).unwrap();
        assert_relative_eq!(lin, z.dot(&c.v().tr_mul(&theta)), epsilon = 1e-12);
        let batch = c.predict_batch(&Activation::Tanh, &theta, &DMatrix::from_row_slice(1, 6, z.as_slice())).unwrap();
        assert_relative_eq!(batch[0], rf_predict(&theta, &c, &Activation::Tanh, &z).unwrap(), epsilon = 1e-12);
        assert!(matches!(rf_predict(&theta, &c, &Activation::Tanh, &DVector::zeros(5)), Err(Error::Dimension(_))));
    }

    #[test]
    fn identity_interpolates_at_square_design() {
        // ΦΦᵀ = Z VᵀV Zᵀ has rank min(n, 2d), so the ridgeless identity case needs n = 2d
        let (m, _, ds) = setup(5, 10, 3);
        let c = RfConfig::sample(2000, 10, 4).unwrap();
        let theta = rf_fit(&ds, &c, &Activation::Identity, 0.0).unwrap();
        let fitted = c.predict_batch(&Activation::Identity, &theta, ds.z()).unwrap();
        assert!((fitted - ds.g()).amax() <= 1e-6);
        let stats = hermite_stats(&Activation::Identity, 64).unwrap();
        let test = sample_inputs(&m, 50, 99);
        let gap = equivalence_gap(&ds, &c, &Activation::Identity, &stats, 0.0, &test).unwrap();
        assert_eq!(gap.lambda_tilde, 0.0);
        assert!(gap.max_gap <= 1e-6, "{gap:?}");
    }

    #[test]
    fn singular_kernel_refused() {
        let (_, _, ds) = setup(3, 10, 3);
        let c = RfConfig::sample(100, 6, 4).unwrap();
        assert!(matches!(rf_fit(&ds, &c, &Activation::Identity, 0.0), Err(Error::Singular(_))));
    }

    #[test]
    fn kernel_concentration() {
        let (_, _, ds) = setup(50, 150, 7);
        let c = RfConfig::sample(20_000, 100, 8).unwrap();
        let act = Activation::Tanh;
        let stats = hermite_stats(&act, DEFAULT_NODES).unwrap();
        let reg = RfRegression::new(&ds, &c, &act).unwrap();
        let k = reg.kernel() / 20_000.0;
        let mut approx_k = linalg::mul_nt(ds.z(), ds.z()) * (stats.mu1 * stats.mu1 / 100.0);
        for i in 0..150 {
            approx_k[(i, i)] += stats.mu_tilde_sq;
        }
        let rel = linalg::op_norm(&(&k - approx_k)) / linalg::op_norm(&k);
        assert!(rel < 0.1, "{rel}");
        assert!(SymEig::new(reg.kernel()).min() > 0.0);
    }

    #[test]
    fn spurious_cov_paths_agree() {
        let (m, gt, ds) = setup(6, 60, 11);
        let c = RfConfig::sample(300, 12, 12).unwrap();
        let act = Activation::Tanh;
        let stats = hermite_stats(&act, DEFAULT_NODES).unwrap();
        let theta = rf_fit(&ds, &c, &act, 0.01).unwrap();
        let exact = rf_spurious_cov_quadrature(&theta, &c, &act, &m, &gt, DEFAULT_NODES).unwrap();
        let mc = rf_spurious_cov_mc(&theta, &c, &act, &stats, &m, &gt, 200_000, 13).unwrap();
        assert!((mc.mean - exact).abs() <= 4.0 * mc.std_error, "{mc:?} vs {exact}");
        // identity: all three coincide with the linear formula
        let lin_theta = rf_fit(&ds, &c, &Activation::Identity, 0.05).unwrap();
        let id_stats = hermite_stats(&Activation::Identity, 64).unwrap();
        let q = rf_spurious_cov_quadrature(&lin_theta, &c, &Activation::Identity, &m, &gt, 64).unwrap();
        let l = rf_linearized_spurious_cov(&lin_theta, &c, &id_stats, &m, &gt).unwrap();
        assert_relative_eq!(q, l, epsilon = 1e-12, max_relative = 1e-10);
    }
}
