//! Finite-sample experiments: seeded Gaussian data, ridge and gradient flow
//! estimators, and the exact and Monte Carlo versions of the spurious
//! covariance, the test loss and the out-of-distribution loss.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covmodel::CovarianceModel;
use crate::detequiv::GroundTruth;
use crate::error::{Error, Result};
use crate::linalg::{self, SymEig};

/// Ridgeless solves are refused when `λmin/λmax` of the Gram matrix is below this.
pub const RIDGELESS_COND_TOL: f64 = 1e-12;

/// Rows per block when drawing Monte Carlo samples.
const MC_CHUNK: usize = 2048;

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Matrix of i.i.d. standard normals, filled in storage (column-major) order.
pub(crate) fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for v in m.as_mut_slice() {
        *v = rng.sample(StandardNormal);
    }
    m
}

/// Design matrix `Z` (rows `zᵢ`), labels `G = Zθ* + ε` and the noise `ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    z: DMatrix<f64>,
    g: DVector<f64>,
    noise: DVector<f64>,
    /// `Zθ*`, kept so the noise can be redrawn on a fixed design.
    signal: DVector<f64>,
    seed: u64,
}

impl Dataset {
    /// `n` rows `zᵢ = Σ^{1/2}wᵢ` with `wᵢ` standard normal, then `εᵢ ~ N(0, σ²)`,
    /// all from one stream seeded by `seed`.
    pub fn sample(model: &CovarianceModel, gt: &GroundTruth, n: usize, seed: u64) -> Result<Self> {
        gt.check_model(model)?;
        if n == 0 {
            return Err(Error::ParameterRange("n must be positive".into()));
        }
        let mut r = rng(seed);
        let w = normal_matrix(&mut r, n, model.dim());
        let z = linalg::mul(&w, model.sqrt_sigma());
        let noise = draw_noise(&mut r, n, gt.sigma2());
        let signal = z.columns(0, model.d()) * gt.theta_star_x();
        let g = &signal + &noise;
        Ok(Self { z, g, noise, signal, seed })
    }

    /// Dataset with a given design and labels and no separate noise.
    pub fn from_design(z: DMatrix<f64>, g: DVector<f64>) -> Result<Self> {
        if z.nrows() != g.len() || z.nrows() == 0 {
            return Err(Error::Dimension(format!(
                "design has {} rows but {} labels",
                z.nrows(),
                g.len()
            )));
        }
        let noise = DVector::zeros(g.len());
        Ok(Self { signal: g.clone(), z, g, noise, seed: 0 })
    }

    /// Same design, fresh noise from `seed`.
    pub fn with_noise(&self, sigma2: f64, seed: u64) -> Self {
        let mut r = rng(seed);
        let noise = draw_noise(&mut r, self.n(), sigma2);
        Self {
            z: self.z.clone(),
            g: &self.signal + &noise,
            noise,
            signal: self.signal.clone(),
            seed,
        }
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn g(&self) -> &DVector<f64> {
        &self.g
    }

    pub fn noise(&self) -> &DVector<f64> {
        &self.noise
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    /// Number of features, `2d` for sampled datasets.
    pub fn dim(&self) -> usize {
        self.z.ncols()
    }
}

fn draw_noise(r: &mut ChaCha8Rng, n: usize, sigma2: f64) -> DVector<f64> {
    if sigma2 == 0.0 {
        return DVector::zeros(n);
    }
    let s = sigma2.sqrt();
    DVector::from_fn(n, |_, _| s * r.sample::<f64, _>(StandardNormal))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeEstimate {
    pub theta_hat: DVector<f64>,
    pub lambda: f64,
}

impl RidgeEstimate {
    pub fn new(theta_hat: DVector<f64>, lambda: f64) -> Self {
        Self { theta_hat, lambda }
    }
}

/// Gram matrix of one dataset, factored once and solved for many `λ`.
///
/// Uses `ZᵀZ` when `n ≥ 2d` and `ZZᵀ` otherwise, so the factored matrix is
/// always the smaller one.
#[derive(Debug, Clone)]
pub struct RidgeProblem<'a> {
    data: &'a Dataset,
    primal: bool,
    gram: DMatrix<f64>,
    /// `ZᵀG` in primal form, `G` in dual form.
    rhs: DVector<f64>,
}

impl<'a> RidgeProblem<'a> {
    pub fn new(data: &'a Dataset) -> Self {
        let (n, p) = data.z.shape();
        let primal = n >= p;
        let (gram, rhs) = if primal {
            (linalg::gram_cols(&data.z), data.z.tr_mul(&data.g))
        } else {
            let mut k = DMatrix::zeros(n, n);
            linalg::gram_rows_accumulate(&mut k, &data.z);
            (k, data.g.clone())
        };
        Self { data, primal, gram, rhs }
    }

    /// `θ̂ = (ZᵀZ + nλI)⁻¹ZᵀG = Zᵀ(ZZᵀ + nλI)⁻¹G`.
    pub fn solve(&self, lambda: f64) -> Result<RidgeEstimate> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::ParameterRange(format!("λ = {lambda} must be nonnegative and finite")));
        }
        let coef = if lambda == 0.0 {
            self.solve_ridgeless()?
        } else {
            let mut a = self.gram.clone();
            let shift = self.data.n() as f64 * lambda;
            for i in 0..a.nrows() {
                a[(i, i)] += shift;
            }
            match a.cholesky() {
                Some(c) => c.solve(&self.rhs),
                None => return Err(Error::Singular(format!("ridge system not positive definite at λ = {lambda}"))),
            }
        };
        let theta_hat = if self.primal { coef } else { self.data.z.tr_mul(&coef) };
        Ok(RidgeEstimate { theta_hat, lambda })
    }

    fn solve_ridgeless(&self) -> Result<DVector<f64>> {
        let eig = SymEig::new(&self.gram);
        let (lo, hi) = (eig.min(), eig.max());
        if !(hi > 0.0) || lo / hi < RIDGELESS_COND_TOL {
            return Err(Error::Singular(format!(
                "Gram matrix condition ratio {} below {RIDGELESS_COND_TOL}",
                if hi > 0.0 { lo / hi } else { 0.0 }
            )));
        }
        let c = eig.project(&self.rhs);
        let scaled = DVector::from_iterator(c.len(), c.iter().zip(eig.values.iter()).map(|(&c, &l)| c / l));
        Ok(eig.reconstruct(&scaled))
    }
}

pub fn ridge_fit(data: &Dataset, lambda: f64) -> Result<RidgeEstimate> {
    RidgeProblem::new(data).solve(lambda)
}

/// Eigendecomposition of `ZᵀZ/n`, serving ridge solutions and gradient flow
/// trajectories on a whole `(λ, t)` grid.
#[derive(Debug, Clone)]
pub struct RidgePath {
    eig: SymEig,
    /// `Uᵀ ZᵀG / n`.
    coords: DVector<f64>,
}

impl RidgePath {
    pub fn new(data: &Dataset) -> Self {
        let n = data.n() as f64;
        let mut gram = linalg::gram_cols(&data.z) / n;
        gram = linalg::symmetrize(&gram);
        let eig = SymEig::new(&gram);
        let coords = eig.project(&(data.z.tr_mul(&data.g) / n));
        Self { eig, coords }
    }

    fn ridge_coords(&self, lambda: f64) -> DVector<f64> {
        DVector::from_iterator(
            self.coords.len(),
            self.coords.iter().zip(self.eig.values.iter()).map(|(&c, &s)| c / (s.max(0.0) + lambda)),
        )
    }

    pub fn ridge(&self, lambda: f64) -> Result<RidgeEstimate> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::ParameterRange(format!("λ = {lambda} must be positive")));
        }
        Ok(RidgeEstimate { theta_hat: self.eig.reconstruct(&self.ridge_coords(lambda)), lambda })
    }

    /// `θ(t) = (I − exp(−2(ZᵀZ/n + λI)t)) θ̂(λ)`.
    pub fn flow(&self, lambda: f64, t: f64) -> Result<DVector<f64>> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::ParameterRange(format!("λ = {lambda} must be positive")));
        }
        if !(t >= 0.0) {
            return Err(Error::ParameterRange(format!("t = {t} must be nonnegative")));
        }
        Ok(self.eig.reconstruct(&self.flow_coords(lambda, t)))
    }

    /// Trajectory in the eigenbasis of `ZᵀZ/n`.
    pub fn flow_coords(&self, lambda: f64, t: f64) -> DVector<f64> {
        let mut c = self.ridge_coords(lambda);
        for (ck, &s) in c.iter_mut().zip(self.eig.values.iter()) {
            *ck *= -(-2.0 * (s.max(0.0) + lambda) * t).exp_m1();
        }
        c
    }

    pub fn eigen(&self) -> &SymEig {
        &self.eig
    }
}

/// Gradient flow on the ridge objective started at 0, evaluated at time `t`.
pub fn gradient_flow_estimate(data: &Dataset, lambda: f64, t: f64) -> Result<DVector<f64>> {
    RidgePath::new(data).flow(lambda, t)
}

fn check_theta(theta: &DVector<f64>, model: &CovarianceModel, gt: &GroundTruth) -> Result<()> {
    gt.check_model(model)?;
    if theta.len() != model.dim() {
        return Err(Error::Dimension(format!(
            "θ̂ has length {} but 2d = {}",
            theta.len(),
            model.dim()
        )));
    }
    Ok(())
}

/// `θᵀ P_y Σ θ* = θ_yᵀ Σyx θ*_x`, the spurious covariance of a linear predictor.
pub fn spurious_cov_of(theta: &DVector<f64>, model: &CovarianceModel, gt: &GroundTruth) -> Result<f64> {
    check_theta(theta, model, gt)?;
    let d = model.d();
    let cross = model.sigma_yx() * gt.theta_star_x();
    Ok(theta.rows(d, d).dot(&cross))
}

pub fn spurious_cov_exact(est: &RidgeEstimate, model: &CovarianceModel, gt: &GroundTruth) -> Result<f64> {
    spurious_cov_of(&est.theta_hat, model, gt)
}

/// `σ² + (θ − θ*)ᵀ Σ (θ − θ*)`.
pub fn test_loss_of(theta: &DVector<f64>, model: &CovarianceModel, gt: &GroundTruth) -> Result<f64> {
    check_theta(theta, model, gt)?;
    let diff = theta - gt.theta_star();
    Ok(gt.sigma2() + diff.dot(&(model.sigma() * &diff)))
}

pub fn test_loss_exact(est: &RidgeEstimate, model: &CovarianceModel, gt: &GroundTruth) -> Result<f64> {
    test_loss_of(&est.theta_hat, model, gt)
}

/// Variance of `f(θ, [x̃, y]) = θ_xᵀx̃ + θ_yᵀy`.
pub fn ood_predictor_variance(theta: &DVector<f64>, model: &CovarianceModel) -> f64 {
    let d = model.d();
    let (tx, ty) = (theta.rows(0, d), theta.rows(d, d));
    tx.dot(&(model.sigma_xx() * tx)) + ty.dot(&(model.sigma_yy() * ty))
}

/// Spurious covariance of a predictor and target both scaled to unit variance.
pub fn normalized_spurious_corr(theta: &DVector<f64>, model: &CovarianceModel, gt: &GroundTruth) -> Result<f64> {
    let c = spurious_cov_of(theta, model, gt)?;
    let vf = ood_predictor_variance(theta, model);
    let vt = gt.theta_star_x().dot(&(model.sigma_xx() * gt.theta_star_x()));
    if !(vf > 0.0 && vt > 0.0) {
        return Err(Error::Domain("predictor or target has zero variance".into()));
    }
    Ok(c / (vf * vt).sqrt())
}

/// Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub m: usize,
}

/// One Monte Carlo draw projected on the directions needed by the estimators.
struct Draw {
    /// `θ̂_xᵀx̃ + θ̂_yᵀy`.
    f: f64,
    /// `θ*_xᵀx`.
    core: f64,
    /// `θ*_xᵀx̃`.
    core_tilde: f64,
    eps: f64,
}

/// Draws `([x, y], x̃, ε)` with `[x, y] = Σ^{1/2}w`, `x̃ = Σxx^{1/2}w̃` and keeps
/// only the scalar projections, in blocks of [`MC_CHUNK`] samples.
fn draw_projections(
    theta: &DVector<f64>,
    model: &CovarianceModel,
    gt: &GroundTruth,
    m: usize,
    seed: u64,
    mut visit: impl FnMut(Draw),
) {
    let d = model.d();
    let mut full_dirs = DMatrix::zeros(2 * d, 2);
    full_dirs.view_mut((d, 0), (d, 1)).copy_from(&theta.rows(d, d));
    full_dirs.view_mut((0, 1), (d, 1)).copy_from(gt.theta_star_x());
    let full_dirs = linalg::mul(model.sqrt_sigma(), &full_dirs);
    let mut core_dirs = DMatrix::zeros(d, 2);
    core_dirs.set_column(0, &theta.rows(0, d));
    core_dirs.set_column(1, gt.theta_star_x());
    let core_dirs = linalg::mul(model.sqrt_sigma_xx(), &core_dirs);
    let s = gt.sigma2().sqrt();

    let mut r = rng(seed);
    let mut done = 0;
    while done < m {
        let b = MC_CHUNK.min(m - done);
        let w = normal_matrix(&mut r, b, 2 * d);
        let wt = normal_matrix(&mut r, b, d);
        let pf = linalg::mul(&w, &full_dirs);
        let pc = linalg::mul(&wt, &core_dirs);
        for i in 0..b {
            let eps = if s > 0.0 { s * r.sample::<f64, _>(StandardNormal) } else { 0.0 };
            visit(Draw { f: pc[(i, 0)] + pf[(i, 0)], core: pf[(i, 1)], core_tilde: pc[(i, 1)], eps });
        }
        done += b;
    }
}

fn check_m(m: usize) -> Result<()> {
    if m < 2 {
        return Err(Error::ParameterRange(format!("m = {m} must be at least 2")));
    }
    Ok(())
}

/// Sample covariance of two series with a standard error from the spread of
/// the centred products.
pub fn sample_covariance(a: &[f64], b: &[f64]) -> McEstimate {
    let m = a.len();
    assert_eq!(m, b.len());
    assert!(m >= 2);
    let mf = m as f64;
    let ma = a.iter().sum::<f64>() / mf;
    let mb = b.iter().sum::<f64>() / mf;
    let prods: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| (x - ma) * (y - mb)).collect();
    let mean_p = prods.iter().sum::<f64>() / mf;
    let var_p = prods.iter().map(|p| (p - mean_p) * (p - mean_p)).sum::<f64>() / (mf - 1.0);
    McEstimate { mean: prods.iter().sum::<f64>() / (mf - 1.0), std_error: (var_p / mf).sqrt(), m }
}

/// Sample mean with its standard error.
pub fn sample_mean(a: &[f64]) -> McEstimate {
    let m = a.len();
    assert!(m >= 2);
    let mf = m as f64;
    let mean = a.iter().sum::<f64>() / mf;
    let var = a.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (mf - 1.0);
    McEstimate { mean, std_error: (var / mf).sqrt(), m }
}

/// Sample covariance of `f(θ̂, [x̃, y])` and `g = θ*_xᵀx + ε` over `m` draws.
pub fn monte_carlo_spurious_cov(
    est: &RidgeEstimate,
    model: &CovarianceModel,
    gt: &GroundTruth,
    m: usize,
    seed: u64,
) -> Result<McEstimate> {
    check_theta(&est.theta_hat, model, gt)?;
    check_m(m)?;
    let mut f = Vec::with_capacity(m);
    let mut g = Vec::with_capacity(m);
    draw_projections(&est.theta_hat, model, gt, m, seed, |dr| {
        f.push(dr.f);
        g.push(dr.core + dr.eps);
    });
    Ok(sample_covariance(&f, &g))
}

/// How the predictor and target enter the out-of-distribution loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodScaling {
    /// `E[(f(θ̂, [x̃, y]) − θ*_xᵀx̃)²]`.
    #[default]
    Raw,
    /// Predictor and target divided by their population standard deviations.
    Normalized,
}

/// Monte Carlo out-of-distribution loss with `x̃` independent of `(x, y)`.
pub fn ood_loss_empirical(
    est: &RidgeEstimate,
    model: &CovarianceModel,
    gt: &GroundTruth,
    m: usize,
    seed: u64,
    scaling: OodScaling,
) -> Result<McEstimate> {
    check_theta(&est.theta_hat, model, gt)?;
    check_m(m)?;
    let (sf, st) = match scaling {
        OodScaling::Raw => (1.0, 1.0),
        OodScaling::Normalized => {
            let vf = ood_predictor_variance(&est.theta_hat, model);
            let vt = gt.theta_star_x().dot(&(model.sigma_xx() * gt.theta_star_x()));
            if !(vf > 0.0 && vt > 0.0) {
                return Err(Error::Domain("predictor or target has zero variance".into()));
            }
            (1.0 / vf.sqrt(), 1.0 / vt.sqrt())
        }
    };
    let mut losses = Vec::with_capacity(m);
    draw_projections(&est.theta_hat, model, gt, m, seed, |dr| {
        let e = sf * dr.f - st * dr.core_tilde;
        losses.push(e * e);
    });
    Ok(sample_mean(&losses))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub lambda: f64,
    pub seed: u64,
    pub c_emp: f64,
    pub l_emp: f64,
}

/// Mean and sample standard deviation across seeds at one `λ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub lambda: f64,
    pub c_mean: f64,
    pub c_std: f64,
    pub l_mean: f64,
    pub l_std: f64,
    pub n_seeds: usize,
}

impl AggregateRow {
    pub fn c_std_error(&self) -> f64 {
        self.c_std / (self.n_seeds as f64).sqrt()
    }

    pub fn l_std_error(&self) -> f64 {
        self.l_std / (self.n_seeds as f64).sqrt()
    }
}

/// Seeds `base, base + 1, …, base + count − 1` (wrapping).
pub fn seed_range(base: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| base.wrapping_add(i)).collect()
}

/// Runs sample → fit → exact `C` and `L` for every `(λ, seed)` cell.
///
/// Seeds run in parallel; the output is ordered by `λ` index, then by seed in
/// the order given.
pub fn trial_sweep(
    model: &CovarianceModel,
    gt: &GroundTruth,
    n: usize,
    lambdas: &[f64],
    seeds: &[u64],
) -> Result<Vec<TrialSummary>> {
    if lambdas.is_empty() || seeds.is_empty() {
        return Err(Error::ParameterRange("trial sweep needs a nonempty grid and seed list".into()));
    }
    let per_seed: Vec<Vec<TrialSummary>> = seeds
        .par_iter()
        .map(|&seed| {
            let data = Dataset::sample(model, gt, n, seed)?;
            let problem = RidgeProblem::new(&data);
            lambdas
                .iter()
                .map(|&lambda| {
                    let est = problem.solve(lambda)?;
                    Ok(TrialSummary {
                        lambda,
                        seed,
                        c_emp: spurious_cov_exact(&est, model, gt)?,
                        l_emp: test_loss_exact(&est, model, gt)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(lambdas.len() * seeds.len());
    for li in 0..lambdas.len() {
        for row in &per_seed {
            out.push(row[li]);
        }
    }
    Ok(out)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let k = v.len() as f64;
    let mean = v.iter().sum::<f64>() / k;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (k - 1.0);
    (mean, var.sqrt())
}

/// Groups summaries by `λ` (in order of first appearance) and reduces each
/// group sequentially in ascending seed order.
pub fn aggregate(trials: &[TrialSummary]) -> Vec<AggregateRow> {
    let mut lambdas: Vec<f64> = Vec::new();
    for t in trials {
        if !lambdas.iter().any(|&l| l.to_bits() == t.lambda.to_bits()) {
            lambdas.push(t.lambda);
        }
    }
    lambdas
        .into_iter()
        .map(|lambda| {
            let mut group: Vec<&TrialSummary> = trials.iter().filter(|t| t.lambda.to_bits() == lambda.to_bits()).collect();
            group.sort_by_key(|t| t.seed);
            let c: Vec<f64> = group.iter().map(|t| t.c_emp).collect();
            let l: Vec<f64> = group.iter().map(|t| t.l_emp).collect();
            let (c_mean, c_std) = mean_std(&c);
            let (l_mean, l_std) = mean_std(&l);
            AggregateRow { lambda, c_mean, c_std, l_mean, l_std, n_seeds: group.len() }
        })
        .collect()
}
