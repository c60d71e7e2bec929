//! Batch (stacked) estimators used as independent checks on the recursive
//! filter, and the MMSE comparison between sensor sets with and without the
//! road-selector row.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::estimation::InitialEstimate;
use crate::linalg::symmetrize;
use crate::vehicle::DiscreteAugmentedModel;
use crate::{Error, Result};

/// Largest information-matrix condition number the oracle accepts.
pub const MAX_CONDITION: f64 = 1e12;

/// Stacked measurement model `y_{0:k} = O z + v` with
/// `z = [x(0); eta(1); ...; eta(k)]` and `x(i) = L_i z`.
#[derive(Debug, Clone)]
pub struct ObservabilityStack {
    pub horizon: usize,
    /// `L_0 ... L_k`, each `n x n(k+1)`.
    pub blocks: Vec<DMatrix<f64>>,
    /// `[C L_0; C L_1; ...; C L_k]`.
    pub stacked: DMatrix<f64>,
}

impl ObservabilityStack {
    pub fn new(a: &DMatrix<f64>, c: &DMatrix<f64>, horizon: usize) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || c.ncols() != n {
            return Err(Error::Dimension(format!("A {:?}, C {:?}", a.shape(), c.shape())));
        }
        let r = c.nrows();
        let width = n * (horizon + 1);
        let mut powers = vec![DMatrix::identity(n, n)];
        for i in 1..=horizon {
            let next = a * &powers[i - 1];
            powers.push(next);
        }
        let mut blocks = Vec::with_capacity(horizon + 1);
        let mut stacked = DMatrix::zeros(r * (horizon + 1), width);
        for i in 0..=horizon {
            let mut l = DMatrix::zeros(n, width);
            for j in 0..=i {
                l.view_mut((0, j * n), (n, n)).copy_from(&powers[i - j]);
            }
            stacked.view_mut((i * r, 0), (r, width)).copy_from(&(c * &l));
            blocks.push(l);
        }
        Ok(Self {
            horizon,
            blocks,
            stacked,
        })
    }
}

fn check_selector_rows(c: &DMatrix<f64>) -> Result<()> {
    for i in 0..c.nrows() {
        let row = c.row(i);
        let ones = row.iter().filter(|v| **v == 1.0).count();
        let zeros = row.iter().filter(|v| **v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::param(
                "sensor rows",
                "every row must have exactly one entry equal to 1 and zeros elsewhere",
            ));
        }
    }
    Ok(())
}

fn posterior_covariance(
    stack: &ObservabilityStack,
    process_std: f64,
    measurement_std: f64,
) -> Result<DMatrix<f64>> {
    if !(process_std > 0.0 && measurement_std > 0.0) {
        return Err(Error::param("noise std", "must be positive"));
    }
    let width = stack.stacked.ncols();
    let mut info = DMatrix::identity(width, width) / (process_std * process_std)
        + stack.stacked.transpose() * &stack.stacked / (measurement_std * measurement_std);
    symmetrize(&mut info);
    let eig = SymmetricEigen::new(info.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(cond <= MAX_CONDITION) {
        return Err(Error::IllConditioned(cond));
    }
    let chol = info.cholesky().ok_or(Error::IllConditioned(cond))?;
    Ok(chol.inverse())
}

/// `tr(L_k' Sigma L_k'^T)` for every `k'` in `0..=horizon`, with
/// `Sigma = (sigma_eta^-2 I + sigma_v^-2 O^T O)^-1`.
///
/// `sensors` must be a 0/1 selector matrix (one unit entry per row); the
/// noises are isotropic.
pub fn mmse_profile(
    a: &DMatrix<f64>,
    sensors: &DMatrix<f64>,
    horizon: usize,
    process_std: f64,
    measurement_std: f64,
) -> Result<Vec<f64>> {
    check_selector_rows(sensors)?;
    let stack = ObservabilityStack::new(a, sensors, horizon)?;
    let sigma = posterior_covariance(&stack, process_std, measurement_std)?;
    Ok(stack
        .blocks
        .iter()
        .map(|l| (l * &sigma * l.transpose()).trace())
        .collect())
}

/// MMSE of the optimal estimate of `x(query)` given measurements `0..=horizon`.
pub fn mmse_oracle(
    a: &DMatrix<f64>,
    sensors: &DMatrix<f64>,
    horizon: usize,
    process_std: f64,
    measurement_std: f64,
    query: usize,
) -> Result<f64> {
    if query > horizon {
        return Err(Error::param("query", format!("must be in [0, {horizon}]")));
    }
    Ok(mmse_profile(a, sensors, horizon, process_std, measurement_std)?[query])
}

/// `sensors` with the road selector `[0 .. 0 1]` appended.
pub fn with_road_selector(sensors: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, n) = sensors.shape();
    let mut out = DMatrix::zeros(r + 1, n);
    out.view_mut((0, 0), (r, n)).copy_from(sensors);
    out[(r, n - 1)] = 1.0;
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorSetReport {
    pub mmse_without: Vec<f64>,
    pub mmse_with: Vec<f64>,
    /// `min_k' (without - with) / without`.
    pub min_relative_margin: f64,
}

impl SensorSetReport {
    pub fn holds(&self, tolerance: f64) -> bool {
        self.min_relative_margin >= tolerance
    }
}

/// Compare the MMSE profile of `sensors` against `sensors` plus the road selector.
pub fn compare_sensor_sets(
    a: &DMatrix<f64>,
    sensors: &DMatrix<f64>,
    horizon: usize,
    process_std: f64,
    measurement_std: f64,
) -> Result<SensorSetReport> {
    let without = mmse_profile(a, sensors, horizon, process_std, measurement_std)?;
    let with = mmse_profile(a, &with_road_selector(sensors), horizon, process_std, measurement_std)?;
    let min_relative_margin = without
        .iter()
        .zip(&with)
        .map(|(r, r1)| (r - r1) / r)
        .fold(f64::INFINITY, f64::min);
    Ok(SensorSetReport {
        mmse_without: without,
        mmse_with: with,
        min_relative_margin,
    })
}

/// Draw a random system for the MMSE comparison: `n` states with spectral
/// radius below one and `r < n` selector rows over the non-road states.
pub fn random_selector_system<R: Rng>(rng: &mut R, n: usize, r: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    assert!(n >= 2 && r >= 1 && r < n);
    let mut a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let rho = crate::linalg::spectral_radius(&a);
    if rho > 0.0 {
        let target = rng.random_range(0.3..0.98);
        a *= target / rho;
    }
    let mut candidates: Vec<usize> = (0..n - 1).collect();
    let mut c = DMatrix::zeros(r, n);
    for row in 0..r {
        let pick = rng.random_range(0..candidates.len());
        let col = candidates.swap_remove(pick);
        c[(row, col)] = 1.0;
    }
    (a, c)
}

/// Filtered estimates `x(k|k)` for every `k`, each obtained by solving the
/// stacked least-squares problem over `y(0..=k)` in information form.
/// Requires `Q` and `P0` positive definite.
pub fn batch_filtered_estimates(
    model: &DiscreteAugmentedModel,
    measurements: &[DVector<f64>],
    init: &InitialEstimate,
) -> Result<Vec<DVector<f64>>> {
    let n = model.state_dim();
    let q_inv = model
        .q
        .clone()
        .cholesky()
        .ok_or_else(|| Error::param("Q", "batch oracle needs positive definite Q"))?
        .inverse();
    let p0_inv = init
        .covariance
        .clone()
        .cholesky()
        .ok_or_else(|| Error::param("P0", "must be positive definite"))?
        .inverse();
    let r_inv = model
        .r
        .clone()
        .cholesky()
        .ok_or_else(|| Error::param("R", "must be positive definite"))?
        .inverse();

    let mut out = Vec::with_capacity(measurements.len());
    for k in 0..measurements.len() {
        let stack = ObservabilityStack::new(&model.a, &model.c, k)?;
        let width = n * (k + 1);
        let mut prior_info = DMatrix::zeros(width, width);
        prior_info.view_mut((0, 0), (n, n)).copy_from(&p0_inv);
        for j in 1..=k {
            prior_info.view_mut((j * n, j * n), (n, n)).copy_from(&q_inv);
        }
        let mut prior_mean = DVector::zeros(width);
        prior_mean.rows_mut(0, n).copy_from(&init.state);

        let r = model.output_dim();
        let mut weighted = DMatrix::zeros(r * (k + 1), width);
        let mut y = DVector::zeros(r * (k + 1));
        for i in 0..=k {
            let rows = stack.stacked.view((i * r, 0), (r, width));
            weighted.view_mut((i * r, 0), (r, width)).copy_from(&(&r_inv * rows));
            y.rows_mut(i * r, r).copy_from(&measurements[i]);
        }
        let mut info = &prior_info + stack.stacked.transpose() * &weighted;
        symmetrize(&mut info);
        let rhs = &prior_info * prior_mean + weighted.transpose() * y;
        let z = info
            .cholesky()
            .ok_or(Error::IllConditioned(f64::INFINITY))?
            .solve(&rhs);
        out.push(&stack.blocks[k] * z);
    }
    Ok(out)
}
