//! Fixtures shared by the benchmarks.

use spurious_core::{CovarianceModel, Dataset, GroundTruth, SyntheticFamilyParams};

/// Synthetic model with `λmax(Σyy) = 2`, `β = 0.5` and `θ*_x = e₁`, `σ² = 0.25`.
pub fn synthetic(d: usize) -> (CovarianceModel, GroundTruth) {
    let model = CovarianceModel::synthetic(&SyntheticFamilyParams { d, ev_max_yy: 2.0, beta: 0.5 })
        .expect("valid synthetic parameters");
    let gt = GroundTruth::first_basis(d, 0.25).expect("unit vector");
    (model, gt)
}

pub fn dataset(d: usize, n: usize, seed: u64) -> (CovarianceModel, GroundTruth, Dataset) {
    let (model, gt) = synthetic(d);
    let data = Dataset::sample(&model, &gt, n, seed).expect("valid sample");
    (model, gt, data)
}

#[cfg(test)]
mod tests {
    #[test]
    fn fixtures_build() {
        let (m, gt, data) = super::dataset(10, 30, 1);
        assert_eq!(m.d(), 10);
        assert_eq!(gt.d(), 10);
        assert_eq!(data.z().shape(), (30, 20));
    }
}
