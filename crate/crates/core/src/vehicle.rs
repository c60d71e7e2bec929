//! Quarter-car vehicle dynamics and the road model.
//!
//! The continuous model has state `[x1 x2 x3 x4]` = sprung displacement,
//! sprung velocity, unsprung displacement, unsprung velocity, and outputs
//! `y1 = x1` (body displacement) and `y2 = x1 - x3` (suspension deflection).
//! The road elevation `w` enters through the tire spring. Augmenting `w` as a
//! fifth state driven by the first-order road model `w' = a w + b e` gives the
//! discrete system every estimator in this crate works with.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::linalg::{self, ensure_finite, min_eigenvalue};
use crate::{Error, Result};

/// Physical parameters of one vehicle, SI units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuarterCarParams {
    /// kg
    pub sprung_mass: f64,
    /// kg
    pub unsprung_mass: f64,
    /// N/m
    pub spring_stiffness: f64,
    /// N/m
    pub tire_stiffness: f64,
    /// N·s/m
    pub suspension_damping: f64,
    /// N·s/m, zero for the simulation fleet.
    #[serde(default)]
    pub tire_damping: f64,
}

impl QuarterCarParams {
    pub fn new(
        sprung_mass: f64,
        unsprung_mass: f64,
        spring_stiffness: f64,
        tire_stiffness: f64,
        suspension_damping: f64,
    ) -> Result<Self> {
        let p = Self {
            sprung_mass,
            unsprung_mass,
            spring_stiffness,
            tire_stiffness,
            suspension_damping,
            tire_damping: 0.0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_tire_damping(mut self, tire_damping: f64) -> Result<Self> {
        self.tire_damping = tire_damping;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sprung_mass", self.sprung_mass),
            ("unsprung_mass", self.unsprung_mass),
            ("spring_stiffness", self.spring_stiffness),
            ("tire_stiffness", self.tire_stiffness),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::param(name, format!("must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("suspension_damping", self.suspension_damping),
            ("tire_damping", self.tire_damping),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::param(name, format!("must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Road roughness description the first-order model can be derived from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadSpectrum {
    /// Road-roughness coefficient `G_r`.
    pub roughness: f64,
    /// Nominal speed, m/s.
    pub speed: f64,
    /// Cut-off frequency, rad/s.
    pub cutoff: f64,
}

/// First-order road model `w' = pole * w + gain * e`, `e` unit-intensity white noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadModelParams {
    pub pole: f64,
    pub gain: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<RoadSpectrum>,
}

impl RoadModelParams {
    pub fn new(pole: f64, gain: f64) -> Result<Self> {
        let p = Self {
            pole,
            gain,
            spectrum: None,
        };
        p.validate()?;
        Ok(p)
    }

    /// `a = -w0`, `b = sqrt(2 pi G_r V)` from the low-pass road filter.
    pub fn from_spectrum(spectrum: RoadSpectrum) -> Result<Self> {
        let RoadSpectrum {
            roughness,
            speed,
            cutoff,
        } = spectrum;
        if !(roughness >= 0.0 && speed > 0.0 && cutoff > 0.0) {
            return Err(Error::param(
                "spectrum",
                "roughness must be >= 0, speed and cutoff > 0",
            ));
        }
        let p = Self {
            pole: -cutoff,
            gain: (2.0 * std::f64::consts::PI * roughness * speed).sqrt(),
            spectrum: Some(spectrum),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pole.is_finite() && self.pole < 0.0) {
            return Err(Error::param(
                "pole",
                format!("road pole must be negative, got {}", self.pole),
            ));
        }
        if !(self.gain.is_finite() && self.gain >= 0.0) {
            return Err(Error::param(
                "gain",
                format!("must be non-negative, got {}", self.gain),
            ));
        }
        if let Some(s) = self.spectrum {
            let derived_pole = -s.cutoff;
            let derived_gain = (2.0 * std::f64::consts::PI * s.roughness * s.speed).sqrt();
            let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(f64::MIN_POSITIVE);
            if !close(derived_pole, self.pole) || !close(derived_gain, self.gain) {
                return Err(Error::param(
                    "spectrum",
                    "stored (pole, gain) disagree with the road spectrum",
                ));
            }
        }
        Ok(())
    }

    /// Discrete road recursion `w(k+1) = a_d w(k) + b_d e(k)` at sample time `ts`,
    /// with `b_d` the standard deviation of the exactly integrated noise.
    pub fn discretize(&self, ts: f64) -> (f64, f64) {
        let a_d = (self.pole * ts).exp();
        let var = self.gain * self.gain * (1.0 - a_d * a_d) / (-2.0 * self.pole);
        (a_d, var.sqrt())
    }

    /// Stationary variance `b^2 / (2|a|)` of the road signal.
    pub fn stationary_variance(&self) -> f64 {
        self.gain * self.gain / (-2.0 * self.pole)
    }
}

/// Continuous-time physical model `x' = A x + B_w w`, `y = C x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousModel {
    pub a: DMatrix<f64>,
    /// Road-input column.
    pub road_input: DVector<f64>,
    /// Road-rate input column (non-zero only with tire damping).
    pub road_rate_input: DVector<f64>,
    pub c: DMatrix<f64>,
}

pub fn build_continuous_model(params: &QuarterCarParams) -> Result<ContinuousModel> {
    params.validate()?;
    let QuarterCarParams {
        sprung_mass: ms,
        unsprung_mass: mu,
        spring_stiffness: ks,
        tire_stiffness: kt,
        suspension_damping: c,
        tire_damping: ct,
    } = *params;

    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(4, 4, &[
        0.0,      1.0,     0.0,              0.0,
        -ks / ms, -c / ms, ks / ms,          c / ms,
        0.0,      0.0,     0.0,              1.0,
        ks / mu,  c / mu,  -(ks + kt) / mu,  -(c + ct) / mu,
    ]);
    let road_input = DVector::from_row_slice(&[0.0, 0.0, 0.0, kt / mu]);
    let road_rate_input = DVector::from_row_slice(&[0.0, 0.0, 0.0, ct / mu]);
    #[rustfmt::skip]
    let c = DMatrix::from_row_slice(2, 4, &[
        1.0, 0.0, 0.0,  0.0,
        1.0, 0.0, -1.0, 0.0,
    ]);
    Ok(ContinuousModel {
        a,
        road_input,
        road_rate_input,
        c,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Discretization {
    #[default]
    ExactZoh,
    ForwardEuler,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscretizationOptions {
    pub method: Discretization,
    /// Diagonal process-noise variance added to each physical state.
    pub physical_process_noise: f64,
}

impl Default for DiscretizationOptions {
    fn default() -> Self {
        Self {
            method: Discretization::ExactZoh,
            physical_process_noise: 1e-8,
        }
    }
}

/// Discrete augmented system `x(k+1) = A x(k) + eta`, `y = C x + v`.
/// The road signal is always the last state.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteAugmentedModel {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub sample_time: f64,
}

impl DiscreteAugmentedModel {
    pub fn new(
        a: DMatrix<f64>,
        c: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        sample_time: f64,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || q.shape() != (n, n) || c.ncols() != n || r.shape() != (c.nrows(), c.nrows()) {
            return Err(Error::Dimension(format!(
                "A {:?}, C {:?}, Q {:?}, R {:?}",
                a.shape(),
                c.shape(),
                q.shape(),
                r.shape()
            )));
        }
        if !(sample_time.is_finite() && sample_time > 0.0) {
            return Err(Error::param("sample_time", "must be positive"));
        }
        for (m, what) in [(&a, "A"), (&c, "C"), (&q, "Q"), (&r, "R")] {
            ensure_finite(m, what)?;
        }
        let model = Self {
            a,
            c,
            q,
            r,
            sample_time,
        };
        model.check_noise()?;
        Ok(model)
    }

    fn check_noise(&self) -> Result<()> {
        let sym_tol = |m: &DMatrix<f64>| 1e-12 * m.amax().max(1e-300);
        if linalg::asymmetry(&self.q) > sym_tol(&self.q) {
            return Err(Error::param("Q", "must be symmetric"));
        }
        if min_eigenvalue(&self.q) < -1e-12 {
            return Err(Error::param("Q", "must be positive semidefinite"));
        }
        if linalg::asymmetry(&self.r) > sym_tol(&self.r) {
            return Err(Error::param("R", "must be symmetric"));
        }
        if self.r.clone().cholesky().is_none() {
            return Err(Error::param("R", "must be positive definite"));
        }
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    /// Index of the road state.
    pub fn road_index(&self) -> usize {
        self.a.nrows() - 1
    }

    /// Replace the measurement noise covariance.
    pub fn with_measurement_noise(mut self, r: DMatrix<f64>) -> Result<Self> {
        if r.shape() != (self.output_dim(), self.output_dim()) {
            return Err(Error::Dimension(format!(
                "R must be {0}x{0}, got {1:?}",
                self.output_dim(),
                r.shape()
            )));
        }
        ensure_finite(&r, "R")?;
        self.r = r;
        self.check_noise()?;
        Ok(self)
    }
}

/// Append the road state to `cont`, then discretize at `ts`.
///
/// The process noise is the exactly integrated road-noise channel (or its
/// first-order approximation for forward Euler) plus
/// `options.physical_process_noise` on each physical state. The returned
/// model carries `R = I`; callers install the real sensor noise with
/// [`DiscreteAugmentedModel::with_measurement_noise`].
pub fn augment_and_discretize(
    cont: &ContinuousModel,
    road: &RoadModelParams,
    ts: f64,
    options: DiscretizationOptions,
) -> Result<DiscreteAugmentedModel> {
    road.validate()?;
    augment_with_pole(cont, road.pole, road.gain, ts, options)
}

pub(crate) fn augment_with_pole(
    cont: &ContinuousModel,
    pole: f64,
    gain: f64,
    ts: f64,
    options: DiscretizationOptions,
) -> Result<DiscreteAugmentedModel> {
    if !(ts.is_finite() && ts > 0.0) {
        return Err(Error::param("sample_time", format!("must be positive, got {ts}")));
    }
    if !(options.physical_process_noise.is_finite() && options.physical_process_noise >= 0.0) {
        return Err(Error::param("physical_process_noise", "must be non-negative"));
    }
    ensure_finite(&cont.a, "continuous A")?;
    let n = cont.a.nrows();
    let na = n + 1;

    let mut a_aug = DMatrix::zeros(na, na);
    a_aug.view_mut((0, 0), (n, n)).copy_from(&cont.a);
    // w' = pole w + gain e, so a road-rate input contributes pole * w to the
    // dynamics and gain * e to the noise channel.
    let coupling = &cont.road_input + &cont.road_rate_input * pole;
    a_aug.view_mut((0, n), (n, 1)).copy_from(&coupling);
    a_aug[(n, n)] = pole;

    let mut g = DMatrix::zeros(na, 1);
    g.view_mut((0, 0), (n, 1)).copy_from(&(&cont.road_rate_input * gain));
    g[(n, 0)] = gain;

    let (a_d, mut q) = match options.method {
        Discretization::ExactZoh => linalg::van_loan(&a_aug, &g, ts),
        Discretization::ForwardEuler => {
            let a_d = DMatrix::identity(na, na) + &a_aug * ts;
            let q = &g * g.transpose() * ts;
            (a_d, q)
        }
    };
    for i in 0..n {
        q[(i, i)] += options.physical_process_noise;
    }
    ensure_finite(&a_d, "discrete A")?;
    ensure_finite(&q, "discrete Q")?;

    let mut c = DMatrix::zeros(cont.c.nrows(), na);
    c.view_mut((0, 0), (cont.c.nrows(), n)).copy_from(&cont.c);
    let r = DMatrix::identity(cont.c.nrows(), cont.c.nrows());
    DiscreteAugmentedModel::new(a_d, c, q, r, ts)
}

/// Zero-order-hold discretization of `x' = A x + B u` through the block
/// exponential `exp([[A, B], [0, 0]] T)`.
pub fn discretize_zoh(a: &DMatrix<f64>, b: &DMatrix<f64>, ts: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let m = b.ncols();
    let mut blk = DMatrix::zeros(n + m, n + m);
    blk.view_mut((0, 0), (n, n)).copy_from(&(a * ts));
    blk.view_mut((0, n), (n, m)).copy_from(&(b * ts));
    let e = blk.exp();
    (
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, m)).into_owned(),
    )
}

/// Multiply each value by `sqrt(speed / nominal_speed)`.
pub fn scale_profile_estimate(values: &[f64], speed: f64, nominal_speed: f64) -> Result<Vec<f64>> {
    let factor = speed_scale(speed, nominal_speed)?;
    Ok(values.iter().map(|v| v * factor).collect())
}

pub fn speed_scale(speed: f64, nominal_speed: f64) -> Result<f64> {
    if !(speed.is_finite() && speed > 0.0) {
        return Err(Error::param("speed", format!("must be positive, got {speed}")));
    }
    if !(nominal_speed.is_finite() && nominal_speed > 0.0) {
        return Err(Error::param(
            "nominal_speed",
            format!("must be positive, got {nominal_speed}"),
        ));
    }
    Ok((speed / nominal_speed).sqrt())
}
