//! Block covariance models `Σ = [[Σxx, Σxy], [Σyx, Σyy]]` over a core feature
//! `x` and a spurious feature `y`, both `d`-dimensional.
//!
//! A [`CovarianceModel`] is immutable once built. Its spectral data (the
//! eigendecompositions of `Σ`, `Σxx`, `Σyy` and of the Schur complement
//! `S_x = Σyy − Σyx Σxx⁻¹ Σxy`) is computed lazily and at most once, so a model
//! can be shared freely between threads evaluating a regularization grid.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DMatrixView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{self, SymEig};

/// Relative tolerance on `max|Σij − Σji| / max|Σij|`.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Relative tolerance on `tr(Σ) = 2d`.
pub const TRACE_TOL: f64 = 1e-9;
/// Smallest admissible eigenvalue of `Σxx` before the Schur complement is refused.
pub const SINGULAR_BLOCK_TOL: f64 = 1e-12;

/// Parameters of the synthetic Gaussian family with `Σxx = I`, diagonal `Σyy`
/// and `Σxy = Σyx = (Σyy − βI)^{1/2}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFamilyParams {
    pub d: usize,
    /// Target largest eigenvalue of `Σyy`.
    pub ev_max_yy: f64,
    /// Target smallest eigenvalue of the Schur complement.
    pub beta: f64,
}

impl SyntheticFamilyParams {
    /// Default experiment: `d = 400`, `λmax(Σyy) = 2`, `β = 0.5`.
    pub fn default_experiment() -> Self {
        Self { d: 400, ev_max_yy: 2.0, beta: 0.5 }
    }

    /// Common value of the remaining diagonal entries of `Σyy`.
    pub fn bulk_yy(&self) -> f64 {
        (self.d as f64 - self.ev_max_yy) / (self.d as f64 - 1.0)
    }

    pub fn check(&self) -> Result<()> {
        let d = self.d as f64;
        if self.d < 2 {
            return Err(Error::ParameterRange(format!("d = {} must be at least 2", self.d)));
        }
        if !(self.ev_max_yy.is_finite() && self.beta.is_finite()) {
            return Err(Error::ParameterRange("non-finite synthetic parameter".into()));
        }
        if !(1.0..d).contains(&self.ev_max_yy) {
            return Err(Error::ParameterRange(format!(
                "ev_max_yy = {} must lie in [1, d) = [1, {d})",
                self.ev_max_yy
            )));
        }
        let bulk = self.bulk_yy();
        if !(self.beta > 0.0 && self.beta <= bulk) {
            return Err(Error::ParameterRange(format!(
                "beta = {} must lie in (0, (d - ev_max_yy)/(d - 1)] = (0, {bulk}]",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Construction options for general models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelOptions {
    /// Reject models whose trace is not `2d`. When disabled, such models are
    /// accepted and flagged through [`CovarianceModel::trace_warning`].
    pub require_trace_normalized: bool,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self { require_trace_normalized: true }
    }
}

#[derive(Debug, Clone, Default)]
struct SpectralCache {
    full: OnceLock<SymEig>,
    xx: OnceLock<SymEig>,
    yy: OnceLock<SymEig>,
    schur: OnceLock<Result<(DMatrix<f64>, SymEig)>>,
    sqrt_full: OnceLock<DMatrix<f64>>,
    sqrt_xx: OnceLock<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct CovarianceModel {
    d: usize,
    sigma: DMatrix<f64>,
    trace_warning: bool,
    cache: SpectralCache,
}

impl CovarianceModel {
    /// Build from a full `2d × 2d` matrix, requiring `tr(Σ) = 2d`.
    pub fn new(d: usize, sigma: DMatrix<f64>) -> Result<Self> {
        Self::with_options(d, sigma, ModelOptions::default())
    }

    pub fn with_options(d: usize, sigma: DMatrix<f64>, opts: ModelOptions) -> Result<Self> {
        if d == 0 || sigma.shape() != (2 * d, 2 * d) {
            return Err(Error::Dimension(format!(
                "expected a {0}x{0} matrix for d = {d}, got {1}x{2}",
                2 * d,
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("covariance has non-finite entries".into()));
        }
        let defect = linalg::symmetry_defect(&sigma);
        if defect > SYMMETRY_TOL {
            return Err(Error::Asymmetric(defect));
        }
        let sigma = linalg::symmetrize(&sigma);
        let expected = 2.0 * d as f64;
        let trace = sigma.trace();
        let trace_off = (trace - expected).abs() > TRACE_TOL * expected;
        if trace_off && opts.require_trace_normalized {
            return Err(Error::TraceMismatch { trace, expected });
        }
        let model = Self { d, sigma, trace_warning: trace_off, cache: SpectralCache::default() };
        let lmin = model.spectrum().min();
        if !(lmin > 0.0) {
            return Err(Error::NotPositiveDefinite(lmin));
        }
        Ok(model)
    }

    /// Synthetic family: `Σxx = I`, `Σyy = diag(ev_max_yy, b, …, b)` with
    /// `b = (d − ev_max_yy)/(d − 1)`, and `Σxy = Σyx = (Σyy − βI)^{1/2}`.
    pub fn synthetic(params: &SyntheticFamilyParams) -> Result<Self> {
        params.check()?;
        let d = params.d;
        let mut yy = DMatrix::zeros(d, d);
        yy[(0, 0)] = params.ev_max_yy;
        let bulk = params.bulk_yy();
        for i in 1..d {
            yy[(i, i)] = bulk;
        }
        let shifted = &yy - DMatrix::identity(d, d) * params.beta;
        for i in 0..d {
            if shifted[(i, i)] < 0.0 {
                return Err(Error::ParameterRange(format!(
                    "Σyy − βI has negative entry {} at {i}",
                    shifted[(i, i)]
                )));
            }
        }
        let cross = linalg::sym_sqrt(&shifted)?;
        let mut sigma = DMatrix::zeros(2 * d, 2 * d);
        sigma.view_mut((0, 0), (d, d)).fill_with_identity();
        sigma.view_mut((d, d), (d, d)).copy_from(&yy);
        sigma.view_mut((0, d), (d, d)).copy_from(&cross);
        sigma.view_mut((d, 0), (d, d)).copy_from(&cross.transpose());
        let model = Self {
            d,
            sigma,
            trace_warning: false,
            cache: SpectralCache::default(),
        };
        let lmin = model.spectrum().min();
        if !(lmin > 0.0) {
            return Err(Error::NotPositiveDefinite(lmin));
        }
        Ok(model)
    }

    /// Random trace-normalized model `Σ ∝ AAᵀ/(2d) + δI` with Gaussian `A`
    /// and `δ` drawn from `[0.05, 0.5)`, so that `λmin(Σ)` stays away from 0.
    pub fn random(d: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 2 * d;
        let a = DMatrix::from_fn(k, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let ridge = rng.gen_range(0.05..0.5);
        let mut sigma = linalg::mul_nt(&a, &a) / k as f64;
        for i in 0..k {
            sigma[(i, i)] += ridge;
        }
        let sigma = linalg::symmetrize(&sigma);
        let scale = k as f64 / sigma.trace();
        Self::new(d, sigma * scale)
    }

    /// `Σ = I_{2d}`.
    pub fn identity(d: usize) -> Self {
        Self {
            d,
            sigma: DMatrix::identity(2 * d, 2 * d),
            trace_warning: false,
            cache: SpectralCache::default(),
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn dim(&self) -> usize {
        2 * self.d
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// True when the model was accepted with `tr(Σ) ≠ 2d`.
    pub fn trace_warning(&self) -> bool {
        self.trace_warning
    }

    pub fn sigma_xx(&self) -> DMatrixView<'_, f64> {
        self.sigma.view((0, 0), (self.d, self.d))
    }

    pub fn sigma_xy(&self) -> DMatrixView<'_, f64> {
        self.sigma.view((0, self.d), (self.d, self.d))
    }

    pub fn sigma_yx(&self) -> DMatrixView<'_, f64> {
        self.sigma.view((self.d, 0), (self.d, self.d))
    }

    pub fn sigma_yy(&self) -> DMatrixView<'_, f64> {
        self.sigma.view((self.d, self.d), (self.d, self.d))
    }

    /// Eigendecomposition of `Σ`.
    pub fn spectrum(&self) -> &SymEig {
        self.cache.full.get_or_init(|| SymEig::new(&self.sigma))
    }

    pub fn spectrum_xx(&self) -> &SymEig {
        self.cache.xx.get_or_init(|| SymEig::new(&self.sigma_xx().into_owned()))
    }

    pub fn spectrum_yy(&self) -> &SymEig {
        self.cache.yy.get_or_init(|| SymEig::new(&self.sigma_yy().into_owned()))
    }

    /// Symmetric square root `Σ^{1/2}`.
    pub fn sqrt_sigma(&self) -> &DMatrix<f64> {
        self.cache.sqrt_full.get_or_init(|| {
            linalg::sqrt_from_eig(self.spectrum()).expect("model is positive definite")
        })
    }

    /// Symmetric square root `Σxx^{1/2}`.
    pub fn sqrt_sigma_xx(&self) -> &DMatrix<f64> {
        self.cache.sqrt_xx.get_or_init(|| {
            linalg::sqrt_from_eig(self.spectrum_xx()).expect("diagonal block of a PD matrix")
        })
    }

    fn schur_entry(&self) -> &Result<(DMatrix<f64>, SymEig)> {
        self.cache.schur.get_or_init(|| {
            let xx = self.spectrum_xx();
            if xx.min() < SINGULAR_BLOCK_TOL {
                return Err(Error::SingularBlock(xx.min()));
            }
            // Σyx Σxx⁻¹ Σxy = (Σxx^{-1/2} Σxy)ᵀ (Σxx^{-1/2} Σxy)
            let inv_sqrt = xx.map(|l| 1.0 / l.sqrt());
            let half = linalg::mul(&inv_sqrt, &self.sigma_xy().into_owned());
            let s = self.sigma_yy().into_owned() - linalg::gram_cols(&half);
            let s = linalg::symmetrize(&s);
            let eig = SymEig::new(&s);
            Ok((s, eig))
        })
    }

    /// Schur complement `S_x = Σyy − Σyx Σxx⁻¹ Σxy`.
    pub fn schur_complement(&self) -> Result<&DMatrix<f64>> {
        self.schur_entry().as_ref().map(|(s, _)| s).map_err(Clone::clone)
    }

    pub fn schur_spectrum(&self) -> Result<&SymEig> {
        self.schur_entry().as_ref().map(|(_, e)| e).map_err(Clone::clone)
    }

    pub fn validate(&self) -> Diagnostics {
        Diagnostics::inspect(self.d, &self.sigma)
    }

    /// Stable SHA-256 digest of `d` and the row-major entries of `Σ`.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.d as u64).to_le_bytes());
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                h.update(self.sigma[(i, j)].to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Raw row-major serialization of this model.
    pub fn to_spec(&self) -> ModelSpec {
        let n = self.dim();
        let mut sigma = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                sigma.push(self.sigma[(i, j)]);
            }
        }
        ModelSpec::Raw { d: self.d, sigma }
    }
}

/// Result of [`CovarianceModel::validate`] / [`Diagnostics::inspect`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub d: usize,
    pub symmetry_defect: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub trace: f64,
    /// `|tr(Σ) − 2d| / 2d`.
    pub trace_defect: f64,
    pub xx_psd: bool,
    pub yy_psd: bool,
    /// `max|Σxy − Σyxᵀ|`.
    pub cross_block_defect: f64,
}

impl Diagnostics {
    /// Inspect an arbitrary `2d × 2d` matrix. Spectral checks use its
    /// symmetric part.
    pub fn inspect(d: usize, sigma: &DMatrix<f64>) -> Self {
        assert_eq!(sigma.shape(), (2 * d, 2 * d), "diagnostics: wrong shape");
        let sym = linalg::symmetrize(sigma);
        let full = SymEig::new(&sym);
        let block_min = |r: usize| SymEig::new(&sym.view((r, r), (d, d)).into_owned()).min();
        let psd_tol = 1e-12 * full.max().abs().max(1.0);
        let expected = 2.0 * d as f64;
        let trace = sigma.trace();
        let xy = sigma.view((0, d), (d, d));
        let yx = sigma.view((d, 0), (d, d));
        Self {
            d,
            symmetry_defect: linalg::symmetry_defect(sigma),
            lambda_min: full.min(),
            lambda_max: full.max(),
            trace,
            trace_defect: (trace - expected).abs() / expected,
            xx_psd: block_min(0) >= -psd_tol,
            yy_psd: block_min(d) >= -psd_tol,
            cross_block_defect: (xy - yx.transpose()).amax(),
        }
    }

    pub fn symmetric_ok(&self) -> bool {
        self.symmetry_defect <= SYMMETRY_TOL
    }

    pub fn positive_definite(&self) -> bool {
        self.lambda_min > 0.0
    }

    pub fn trace_ok(&self) -> bool {
        self.trace_defect <= TRACE_TOL
    }

    pub fn passes(&self) -> bool {
        self.symmetric_ok() && self.positive_definite() && self.trace_ok() && self.xx_psd && self.yy_psd
    }
}

/// JSON form of a model: either the raw row-major matrix
/// `{"d": …, "sigma": [...]}` or the synthetic shorthand
/// `{"d": …, "ev_max_yy": …, "beta": …}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Synthetic { d: usize, ev_max_yy: f64, beta: f64 },
    Raw { d: usize, sigma: Vec<f64> },
}

impl ModelSpec {
    pub fn build(&self) -> Result<CovarianceModel> {
        self.build_with(ModelOptions::default())
    }

    pub fn build_with(&self, opts: ModelOptions) -> Result<CovarianceModel> {
        match *self {
            ModelSpec::Synthetic { d, ev_max_yy, beta } => {
                CovarianceModel::synthetic(&SyntheticFamilyParams { d, ev_max_yy, beta })
            }
            ModelSpec::Raw { d, ref sigma } => {
                let n = 2 * d;
                if sigma.len() != n * n {
                    return Err(Error::Dimension(format!(
                        "sigma has {} entries, expected 4d² = {}",
                        sigma.len(),
                        n * n
                    )));
                }
                let m = DMatrix::from_row_slice(n, n, sigma);
                CovarianceModel::with_options(d, m, opts)
            }
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

impl From<SyntheticFamilyParams> for ModelSpec {
    fn from(p: SyntheticFamilyParams) -> Self {
        ModelSpec::Synthetic { d: p.d, ev_max_yy: p.ev_max_yy, beta: p.beta }
    }
}
