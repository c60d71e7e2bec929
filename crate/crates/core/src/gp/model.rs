use faer::Mat;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dense::{Factor, JITTER_MAX};
use super::optimize::{minimize, OptimizerSettings};
use super::{GpHyperParams, RegressionMode};
use crate::{rng, Error, Result};

const FORMAT: &str = "gpmodel/1";
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Log-space bounds for (sf, l, sw, ss).
const LOWER: [f64; 4] = [1e-6, 1e-3, 1e-7, 1e-6];
const UPPER: [f64; 4] = [1e3, 1e4, 1e2, 1e2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    /// Optimizer starts per stage; the first is the supplied initial point,
    /// the rest are log-uniform perturbations of it.
    pub restarts: usize,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// Slope/refit alternations after the standard-GP stage.
    pub nigp_iterations: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            restarts: 5,
            max_iterations: 200,
            gradient_tolerance: 1e-6,
            nigp_iterations: 2,
            seed: 0,
        }
    }
}

/// Training inputs, targets and an optional known per-point noise variance
/// added on top of the learned noise.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingData {
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra_noise: Option<Vec<f64>>,
}

impl TrainingData {
    pub fn new(inputs: Vec<f64>, targets: Vec<f64>) -> Self {
        Self {
            inputs,
            targets,
            extra_noise: None,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.len() != self.targets.len() {
            return Err(Error::Dataset(format!(
                "{} inputs but {} targets",
                self.inputs.len(),
                self.targets.len()
            )));
        }
        if let Some(e) = &self.extra_noise {
            if e.len() != self.inputs.len() {
                return Err(Error::Dataset(format!("{} noise entries for {} points", e.len(), self.inputs.len())));
            }
            if e.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Dataset("extra noise must be finite and non-negative".into()));
            }
        }
        if self.inputs.iter().chain(&self.targets).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training data".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub log_marginal_likelihood: f64,
    pub iterations: usize,
    /// False when the optimizer hit its iteration budget.
    pub converged: bool,
    pub restarts: usize,
    /// Absolute diagonal jitter of the stored factorization.
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Queries whose variance came out negative and was set to zero.
    pub clamped: usize,
}

impl Prediction {
    pub fn std(&self) -> Vec<f64> {
        self.variance.iter().map(|v| v.sqrt()).collect()
    }
}

/// Fitted GP. Immutable once built; `predict` is safe to call concurrently.
#[derive(Debug)]
pub struct GpModel {
    pub mode: RegressionMode,
    pub hyper: GpHyperParams,
    pub data: TrainingData,
    /// Posterior-mean slopes at the training inputs used in the noise
    /// diagonal (noisy-input mode only).
    pub slopes: Option<Vec<f64>>,
    pub diagnostics: FitDiagnostics,
    factor: Option<Factor>,
    alpha: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Document {
    format: String,
    mode: RegressionMode,
    hyper: GpHyperParams,
    inputs: Vec<f64>,
    targets: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    extra_noise: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    slopes: Option<Vec<f64>>,
    diagnostics: FitDiagnostics,
}

/// Noise variance on the diagonal for each training point.
fn noise_diagonal(hp: &GpHyperParams, data: &TrainingData, slopes: Option<&[f64]>) -> Vec<f64> {
    let sw2 = hp.noise_std * hp.noise_std;
    let ss2 = hp.input_noise_std * hp.input_noise_std;
    (0..data.len())
        .map(|j| {
            let mut v = sw2;
            if let Some(e) = &data.extra_noise {
                v += e[j];
            }
            if let Some(sl) = slopes {
                v += sl[j] * sl[j] * ss2;
            }
            v
        })
        .collect()
}

fn gram(inputs: &[f64], hp: &GpHyperParams) -> Mat<f64> {
    let n = inputs.len();
    let sf2 = hp.signal_std * hp.signal_std;
    let inv = -0.5 / (hp.lengthscale * hp.lengthscale);
    let mut k = Mat::zeros(n, n);
    for j in 0..n {
        k[(j, j)] = sf2;
        for i in j + 1..n {
            let d = inputs[i] - inputs[j];
            let v = sf2 * (inv * d * d).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn factorize(
    hp: &GpHyperParams,
    data: &TrainingData,
    slopes: Option<&[f64]>,
    start_jitter: f64,
) -> Result<(Mat<f64>, Vec<f64>, Factor)> {
    let kf = gram(&data.inputs, hp);
    let mut ky = kf.clone();
    for (j, v) in noise_diagonal(hp, data, slopes).into_iter().enumerate() {
        ky[(j, j)] += v;
    }
    let factor = Factor::new(&ky, hp.signal_std * hp.signal_std, start_jitter)?;
    let alpha = factor.solve(&data.targets);
    Ok((kf, alpha, factor))
}

fn unpack(theta: &[f64], mode: RegressionMode, fixed_ss: f64) -> GpHyperParams {
    GpHyperParams {
        signal_std: theta[0].exp(),
        lengthscale: theta[1].exp(),
        noise_std: theta[2].exp(),
        input_noise_std: match mode {
            RegressionMode::NoisyInput => theta[3].exp(),
            RegressionMode::Standard => fixed_ss,
        },
    }
}

fn pack(hp: &GpHyperParams, mode: RegressionMode) -> Vec<f64> {
    let mut t = vec![hp.signal_std.ln(), hp.lengthscale.ln(), hp.noise_std.ln()];
    if mode == RegressionMode::NoisyInput {
        t.push(hp.input_noise_std.ln());
    }
    t
}

/// Log marginal likelihood and its gradient in log-hyperparameters, with
/// the slope diagonal (if any) held fixed.
pub fn log_marginal_likelihood(
    hp: &GpHyperParams,
    mode: RegressionMode,
    data: &TrainingData,
    slopes: Option<&[f64]>,
) -> Result<(f64, Vec<f64>)> {
    let slopes = slopes.filter(|_| mode == RegressionMode::NoisyInput);
    let (kf, alpha, factor) = factorize(hp, data, slopes, 0.0)?;
    let n = data.len();
    let y = &data.targets;
    let lml = -0.5 * y.iter().zip(&alpha).map(|(a, b)| a * b).sum::<f64>()
        - 0.5 * factor.log_det()
        - 0.5 * n as f64 * LN_2PI;

    // d lml / d theta = 1/2 tr((a a^T - K^-1) dK/dtheta)
    let kinv = factor.inverse();
    let inv_l2 = 1.0 / (hp.lengthscale * hp.lengthscale);
    let (mut g_sf, mut g_l, mut g_sw, mut g_ss) = (0.0, 0.0, 0.0, 0.0);
    for j in 0..n {
        // strictly lower triangle, counted twice by symmetry
        let (kc, ic) = (kf.col(j), kinv.col(j));
        let (aj, sj) = (alpha[j], data.inputs[j]);
        for i in j + 1..n {
            let w = alpha[i] * aj - ic[i];
            let wk = w * kc[i];
            let d = data.inputs[i] - sj;
            g_sf += 4.0 * wk;
            g_l += 2.0 * wk * d * d * inv_l2;
        }
        let w = aj * aj - ic[j];
        g_sf += 2.0 * w * kc[j];
        g_sw += w * 2.0 * hp.noise_std * hp.noise_std;
        if let Some(sl) = slopes {
            g_ss += w * 2.0 * sl[j] * sl[j] * hp.input_noise_std * hp.input_noise_std;
        }
    }
    let mut grad = vec![0.5 * g_sf, 0.5 * g_l, 0.5 * g_sw];
    if mode == RegressionMode::NoisyInput {
        grad.push(0.5 * g_ss);
    }
    Ok((lml, grad))
}

struct StageFit {
    hyper: GpHyperParams,
    lml: f64,
    iterations: usize,
    converged: bool,
}

/// Best-of-restarts maximization of the likelihood for one slope setting.
fn optimize_stage(
    init: &GpHyperParams,
    mode: RegressionMode,
    data: &TrainingData,
    slopes: Option<&[f64]>,
    options: &FitOptions,
    stream: u64,
) -> Result<StageFit> {
    let dim = if mode == RegressionMode::NoisyInput { 4 } else { 3 };
    let lower: Vec<f64> = LOWER[..dim].iter().map(|v| v.ln()).collect();
    let upper: Vec<f64> = UPPER[..dim].iter().map(|v| v.ln()).collect();
    let settings = OptimizerSettings {
        max_iterations: options.max_iterations,
        gradient_tolerance: options.gradient_tolerance,
        ..OptimizerSettings::default()
    };
    let fixed_ss = init.input_noise_std;
    let objective = |theta: &[f64]| {
        let hp = unpack(theta, mode, fixed_ss);
        let (lml, g) = log_marginal_likelihood(&hp, mode, data, slopes).ok()?;
        if !lml.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some((-lml, g.into_iter().map(|v| -v).collect()))
    };

    let x0 = pack(init, mode);
    let mut rng = rng::stream(options.seed, stream);
    let mut best: Option<StageFit> = None;
    for r in 0..options.restarts.max(1) {
        let start: Vec<f64> = if r == 0 {
            x0.clone()
        } else {
            x0.iter()
                .enumerate()
                .map(|(i, v)| (v + rng.random_range(-1.0..1.0)).clamp(lower[i], upper[i]))
                .collect()
        };
        if let Some(m) = minimize(objective, &start, &lower, &upper, &settings) {
            let lml = -m.value;
            if best.as_ref().is_none_or(|b| lml > b.lml) {
                best = Some(StageFit {
                    hyper: unpack(&m.x, mode, fixed_ss),
                    lml,
                    iterations: m.iterations,
                    converged: m.converged,
                });
            }
        }
    }
    best.ok_or(Error::Cholesky {
        max_jitter: JITTER_MAX * init.signal_std * init.signal_std,
    })
}

/// Fit hyperparameters by maximum marginal likelihood.
///
/// Noisy-input mode first fits a standard GP, then alternates between
/// computing posterior-mean slopes at the training inputs and refitting
/// with the slope-corrected noise diagonal.
pub fn fit(data: TrainingData, mode: RegressionMode, init: GpHyperParams, options: &FitOptions) -> Result<GpModel> {
    check_fit_input(&data)?;
    let mut init = init;
    if mode == RegressionMode::NoisyInput && !(init.input_noise_std > 0.0) {
        init.input_noise_std = 0.1;
    }
    init.validate(mode)?;
    match mode {
        RegressionMode::Standard => {
            let stage = optimize_stage(&init, mode, &data, None, options, 0)?;
            finish(mode, data, None, stage, options.restarts)
        }
        RegressionMode::NoisyInput => {
            let ss = init.input_noise_std;
            let stage = optimize_stage(&init, RegressionMode::Standard, &data, None, options, 0)?;
            let base = finish(RegressionMode::Standard, data, None, stage, options.restarts)?;
            let slopes = base.posterior_mean_slope(&base.data.inputs);
            let hyper = GpHyperParams {
                input_noise_std: ss,
                ..base.hyper
            };
            refine_noisy(base.data, hyper, slopes, options)
        }
    }
}

/// Refit on `data` from `init` in the mode of a previous model. In
/// noisy-input mode the previous model's posterior-mean slopes seed the
/// first alternation, so the standard-GP stage is skipped.
pub fn fit_from(previous: &GpModel, data: TrainingData, init: GpHyperParams, options: &FitOptions) -> Result<GpModel> {
    check_fit_input(&data)?;
    init.validate(previous.mode)?;
    match previous.mode {
        RegressionMode::Standard => {
            let stage = optimize_stage(&init, previous.mode, &data, None, options, 0)?;
            finish(previous.mode, data, None, stage, options.restarts)
        }
        RegressionMode::NoisyInput => {
            let slopes = previous.posterior_mean_slope(&data.inputs);
            refine_noisy(data, init, slopes, options)
        }
    }
}

fn refine_noisy(
    data: TrainingData,
    mut hyper: GpHyperParams,
    mut slopes: Vec<f64>,
    options: &FitOptions,
) -> Result<GpModel> {
    let mode = RegressionMode::NoisyInput;
    let rounds = options.nigp_iterations.max(1);
    let mut data = data;
    for round in 0..rounds {
        let stage = optimize_stage(&hyper, mode, &data, Some(&slopes), options, 1 + round as u64)?;
        let model = finish(mode, data, Some(slopes), stage, options.restarts)?;
        if round + 1 == rounds {
            return Ok(model);
        }
        hyper = model.hyper;
        slopes = model.posterior_mean_slope(&model.data.inputs);
        data = model.data;
    }
    unreachable!("at least one refinement round runs")
}

fn check_fit_input(data: &TrainingData) -> Result<()> {
    data.validate()?;
    if data.len() < 2 {
        return Err(Error::Dataset(format!("need at least 2 training points, got {}", data.len())));
    }
    Ok(())
}

fn finish(
    mode: RegressionMode,
    data: TrainingData,
    slopes: Option<Vec<f64>>,
    stage: StageFit,
    restarts: usize,
) -> Result<GpModel> {
    let diagnostics = FitDiagnostics {
        log_marginal_likelihood: stage.lml,
        iterations: stage.iterations,
        converged: stage.converged,
        restarts: restarts.max(1),
        jitter: 0.0,
    };
    GpModel::build(mode, stage.hyper, data, slopes, diagnostics, 0.0)
}

impl GpModel {
    /// Model with no training data: predictions are the prior.
    pub fn prior(mode: RegressionMode, hyper: GpHyperParams) -> Result<Self> {
        hyper.validate(RegressionMode::Standard)?;
        Ok(Self {
            mode,
            hyper,
            data: TrainingData::default(),
            slopes: None,
            diagnostics: FitDiagnostics::default(),
            factor: None,
            alpha: Vec::new(),
        })
    }

    /// Condition on `data` with fixed hyperparameters (no optimization).
    pub fn condition(
        mode: RegressionMode,
        hyper: GpHyperParams,
        data: TrainingData,
        slopes: Option<Vec<f64>>,
    ) -> Result<Self> {
        data.validate()?;
        hyper.validate(RegressionMode::Standard)?;
        if let Some(s) = &slopes {
            if s.len() != data.len() {
                return Err(Error::Dataset(format!("{} slopes for {} points", s.len(), data.len())));
            }
        }
        GpModel::build(mode, hyper, data, slopes, FitDiagnostics::default(), 0.0)
    }

    fn build(
        mode: RegressionMode,
        hyper: GpHyperParams,
        data: TrainingData,
        slopes: Option<Vec<f64>>,
        mut diagnostics: FitDiagnostics,
        start_jitter: f64,
    ) -> Result<Self> {
        if data.is_empty() {
            let mut m = Self::prior(mode, hyper)?;
            m.diagnostics = diagnostics;
            return Ok(m);
        }
        let used = slopes.as_deref().filter(|_| mode == RegressionMode::NoisyInput);
        let (_, alpha, factor) = factorize(&hyper, &data, used, start_jitter)?;
        diagnostics.jitter = factor.jitter;
        Ok(Self {
            mode,
            hyper,
            data,
            slopes,
            diagnostics,
            factor: Some(factor),
            alpha,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Posterior mean and pointwise variance at `queries`.
    pub fn predict(&self, queries: &[f64]) -> Prediction {
        let sf2 = self.hyper.signal_std * self.hyper.signal_std;
        let Some(factor) = &self.factor else {
            return Prediction {
                mean: vec![0.0; queries.len()],
                variance: vec![sf2; queries.len()],
                clamped: 0,
            };
        };
        let n = self.len();
        let m = queries.len();
        let inv = -0.5 / (self.hyper.lengthscale * self.hyper.lengthscale);
        let mut cross = Mat::zeros(n, m);
        for q in 0..m {
            for j in 0..n {
                let d = queries[q] - self.data.inputs[j];
                cross[(j, q)] = sf2 * (inv * d * d).exp();
            }
        }
        let mean: Vec<f64> = (0..m)
            .map(|q| (0..n).map(|j| cross[(j, q)] * self.alpha[j]).sum())
            .collect();
        factor.half_solve(&mut cross);
        let mut clamped = 0;
        let variance = (0..m)
            .map(|q| {
                let v = sf2 - (0..n).map(|j| cross[(j, q)] * cross[(j, q)]).sum::<f64>();
                if v < 0.0 {
                    clamped += 1;
                    0.0
                } else {
                    v
                }
            })
            .collect();
        Prediction { mean, variance, clamped }
    }

    /// Derivative of the posterior mean with respect to position.
    pub fn posterior_mean_slope(&self, positions: &[f64]) -> Vec<f64> {
        let sf2 = self.hyper.signal_std * self.hyper.signal_std;
        let inv_l2 = 1.0 / (self.hyper.lengthscale * self.hyper.lengthscale);
        positions
            .iter()
            .map(|s| {
                self.data
                    .inputs
                    .iter()
                    .zip(&self.alpha)
                    .map(|(sj, a)| {
                        let d = s - sj;
                        -d * inv_l2 * sf2 * (-0.5 * d * d * inv_l2).exp() * a
                    })
                    .sum()
            })
            .collect()
    }

    /// Average posterior standard deviation over `queries`.
    pub fn mean_posterior_std(&self, queries: &[f64]) -> f64 {
        let p = self.predict(queries);
        p.variance.iter().map(|v| v.sqrt()).sum::<f64>() / queries.len().max(1) as f64
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = Document {
            format: FORMAT.into(),
            mode: self.mode,
            hyper: self.hyper,
            inputs: self.data.inputs.clone(),
            targets: self.data.targets.clone(),
            extra_noise: self.data.extra_noise.clone(),
            slopes: self.slopes.clone(),
            diagnostics: self.diagnostics,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Rebuild from a document; the stored jitter is reapplied so the
    /// factorization matches the original.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Document = serde_json::from_str(text)?;
        if doc.format != FORMAT {
            return Err(Error::Dataset(format!("unsupported model format `{}`", doc.format)));
        }
        let data = TrainingData {
            inputs: doc.inputs,
            targets: doc.targets,
            extra_noise: doc.extra_noise,
        };
        data.validate()?;
        doc.hyper.validate(RegressionMode::Standard)?;
        if let Some(s) = &doc.slopes {
            if s.len() != data.len() {
                return Err(Error::Dataset(format!("{} slopes for {} points", s.len(), data.len())));
            }
        }
        let jitter = doc.diagnostics.jitter;
        GpModel::build(doc.mode, doc.hyper, data, doc.slopes, doc.diagnostics, jitter)
    }
}
