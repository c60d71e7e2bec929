//! Ground-truth road synthesis and the sensing environment.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::io::fmt_f64;
use crate::rng;
use crate::vehicle::RoadModelParams;
use crate::{Error, Result};

/// Road elevation sampled along the segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadProfile {
    /// Longitudinal positions, m.
    pub positions: Vec<f64>,
    /// Elevations, m.
    pub elevations: Vec<f64>,
    pub seed: u64,
    pub road: RoadModelParams,
    /// Speed used to map time steps to positions, m/s.
    pub speed: f64,
    pub sample_time: f64,
}

impl RoadProfile {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        self.speed * self.sample_time
    }

    /// Linear interpolation, clamped to the end points.
    pub fn elevation_at(&self, s: f64) -> f64 {
        let h = self.spacing();
        let last = self.len() - 1;
        let t = (s - self.positions[0]) / h;
        if t <= 0.0 {
            return self.elevations[0];
        }
        if t >= last as f64 {
            return self.elevations[last];
        }
        let i = t.floor() as usize;
        let f = t - i as f64;
        self.elevations[i] * (1.0 - f) + self.elevations[i + 1] * f
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "# seed={} pole={} gain={} speed_m_s={} sample_time_s={}",
            self.seed,
            fmt_f64(self.road.pole),
            fmt_f64(self.road.gain),
            fmt_f64(self.speed),
            fmt_f64(self.sample_time)
        )?;
        writeln!(out, "s_m,w_m")?;
        for (s, w) in self.positions.iter().zip(&self.elevations) {
            writeln!(out, "{},{}", fmt_f64(*s), fmt_f64(*w))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut meta = std::collections::HashMap::new();
        let mut positions = Vec::new();
        let mut elevations = Vec::new();
        let mut header_seen = false;
        for line in input.lines() {
            let line = line?;
            let line = line.trim();
            if let Some(comment) = line.strip_prefix('#') {
                for kv in comment.split_whitespace() {
                    if let Some((k, v)) = kv.split_once('=') {
                        meta.insert(k.to_string(), v.to_string());
                    }
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            if !header_seen {
                header_seen = true;
                continue;
            }
            let (s, w) = line
                .split_once(',')
                .ok_or_else(|| Error::Dataset(format!("bad profile row `{line}`")))?;
            positions.push(parse_num(s)?);
            elevations.push(parse_num(w)?);
        }
        let get = |k: &str| -> Result<f64> {
            meta.get(k)
                .ok_or_else(|| Error::Dataset(format!("profile header lacks `{k}`")))
                .and_then(|v| parse_num(v))
        };
        let profile = RoadProfile {
            seed: meta
                .get("seed")
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Dataset("profile header lacks `seed`".into()))?,
            road: RoadModelParams::new(get("pole")?, get("gain")?)?,
            speed: get("speed_m_s")?,
            sample_time: get("sample_time_s")?,
            positions,
            elevations,
        };
        if profile.len() < 2 {
            return Err(Error::Dataset("profile needs at least 2 rows".into()));
        }
        Ok(profile)
    }
}

fn parse_num(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Dataset(format!("`{s}` is not a number")))
}

/// Simulate the discretized road model from `w(0) = 0`, positions `k V T_s`.
pub fn generate_profile(
    road: &RoadModelParams,
    speed: f64,
    sample_time: f64,
    n_steps: usize,
    seed: u64,
) -> Result<RoadProfile> {
    road.validate()?;
    if n_steps < 2 {
        return Err(Error::param("n_steps", "must be at least 2"));
    }
    if !(speed > 0.0 && speed.is_finite()) {
        return Err(Error::param("speed", "must be positive"));
    }
    if !(sample_time > 0.0 && sample_time.is_finite()) {
        return Err(Error::param("sample_time", "must be positive"));
    }
    let (a_d, b_d) = road.discretize(sample_time);
    let mut rng = rng::stream(seed, 0);
    let mut elevations = Vec::with_capacity(n_steps);
    let mut w = 0.0;
    for _ in 0..n_steps {
        elevations.push(w);
        let e: f64 = rng.sample(StandardNormal);
        w = a_d * w + b_d * e;
    }
    let positions = (0..n_steps).map(|k| k as f64 * speed * sample_time).collect();
    Ok(RoadProfile {
        positions,
        elevations,
        seed,
        road: *road,
        speed,
        sample_time,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensingConfig {
    /// Lower end of the SNR band (variance ratio, not dB).
    pub snr_low: f64,
    pub snr_high: f64,
    /// GPS position noise standard deviation, m.
    pub gps_std: f64,
}

impl Default for SensingConfig {
    fn default() -> Self {
        Self {
            snr_low: 10.0,
            snr_high: 20.0,
            gps_std: 0.2,
        }
    }
}

impl SensingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.snr_low > 0.0 && self.snr_low <= self.snr_high && self.snr_high.is_finite()) {
            return Err(Error::param(
                "snr",
                format!("need 0 < low <= high, got [{}, {}]", self.snr_low, self.snr_high),
            ));
        }
        if !(self.gps_std >= 0.0 && self.gps_std.is_finite()) {
            return Err(Error::param("gps_std", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyMeasurements {
    /// Time-major noisy outputs.
    pub outputs: Vec<Vec<f64>>,
    /// Per-channel noise variance actually used; the calibrated filter's `R`.
    pub noise_variances: Vec<f64>,
    pub target_snr: Vec<f64>,
    /// Clean-signal variance over realized noise sample variance.
    pub realized_snr: Vec<f64>,
}

fn population_variance(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Add white Gaussian noise to every channel so that
/// `Var(channel) / Var(noise)` equals an SNR drawn uniformly in the band.
pub fn corrupt_measurements(
    clean: &[Vec<f64>],
    cfg: &SensingConfig,
    seed: u64,
) -> Result<NoisyMeasurements> {
    cfg.validate()?;
    let Some(first) = clean.first() else {
        return Err(Error::Dimension("no measurements to corrupt".into()));
    };
    let r = first.len();
    if clean.iter().any(|y| y.len() != r) {
        return Err(Error::Dimension("ragged measurement rows".into()));
    }
    let mut rng = rng::stream(seed, 0);
    let mut noise_variances = Vec::with_capacity(r);
    let mut target_snr = Vec::with_capacity(r);
    for ch in 0..r {
        let var = population_variance(clean.iter().map(|y| y[ch]));
        if !(var > 0.0) {
            return Err(Error::ZeroVarianceChannel(ch));
        }
        let snr = if cfg.snr_high > cfg.snr_low {
            rng.random_range(cfg.snr_low..cfg.snr_high)
        } else {
            cfg.snr_low
        };
        target_snr.push(snr);
        noise_variances.push(var / snr);
    }
    let mut outputs = Vec::with_capacity(clean.len());
    let mut noise_cols = vec![Vec::with_capacity(clean.len()); r];
    for y in clean {
        let row = y
            .iter()
            .enumerate()
            .map(|(ch, v)| {
                let e: f64 = rng.sample(StandardNormal);
                let e = e * noise_variances[ch].sqrt();
                noise_cols[ch].push(e);
                v + e
            })
            .collect();
        outputs.push(row);
    }
    let realized_snr = (0..r)
        .map(|ch| {
            let sig = population_variance(clean.iter().map(|y| y[ch]));
            sig / population_variance(noise_cols[ch].iter().copied())
        })
        .collect();
    Ok(NoisyMeasurements {
        outputs,
        noise_variances,
        target_snr,
        realized_snr,
    })
}

/// `s_hat(k) = s(k) + N(0, gps_std^2)`; no re-sorting.
pub fn corrupt_positions(positions: &[f64], gps_std: f64, seed: u64) -> Result<Vec<f64>> {
    if !(gps_std >= 0.0 && gps_std.is_finite()) {
        return Err(Error::param("gps_std", "must be non-negative"));
    }
    let mut rng = rng::stream(seed, 0);
    Ok(positions
        .iter()
        .map(|s| {
            let e: f64 = rng.sample(StandardNormal);
            s + gps_std * e
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table1_road() -> RoadModelParams {
        RoadModelParams::new(-0.01, 0.0328).unwrap()
    }

    #[test]
    fn zero_gain_gives_flat_road() {
        let p = generate_profile(&RoadModelParams::new(-0.01, 0.0).unwrap(), 20.0, 0.01, 50, 3).unwrap();
        assert!(p.elevations.iter().all(|w| *w == 0.0));
    }

    #[test]
    fn table1_segment_is_forty_metres() {
        let v = 40.0 / 1.5;
        let p = generate_profile(&table1_road(), v, 0.01, 151, 1).unwrap();
        assert_eq!(p.len(), 151);
        let length = p.positions[150] - p.positions[0];
        assert!((length - 40.0).abs() < 1e-9, "{length}");
        for w in p.positions.windows(2) {
            assert!((w[1] - w[0] - v * 0.01).abs() < 1e-12);
        }
    }

    #[test]
    fn profile_is_deterministic_per_seed() {
        let a = generate_profile(&table1_road(), 26.0, 0.01, 151, 42).unwrap();
        let b = generate_profile(&table1_road(), 26.0, 0.01, 151, 42).unwrap();
        let c = generate_profile(&table1_road(), 26.0, 0.01, 151, 43).unwrap();
        let bytes = |p: &RoadProfile| {
            let mut v = Vec::new();
            p.write_csv(&mut v).unwrap();
            v
        };
        assert_eq!(bytes(&a), bytes(&b));
        assert_ne!(a.elevations, c.elevations);
        assert!(generate_profile(&table1_road(), 26.0, 0.01, 1, 42).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let a = generate_profile(&table1_road(), 26.0, 0.01, 20, 9).unwrap();
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        let b = RoadProfile::read_csv(&buf[..]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stationary_variance_is_reached() {
        // Faster pole so 1e4 steps cover many correlation times.
        let road = RoadModelParams::new(-2.0, 0.5).unwrap();
        let (a_d, b_d) = road.discretize(0.01);
        let target = b_d * b_d / (1.0 - a_d * a_d);
        let mut mean_var = 0.0;
        for seed in 0..100 {
            let p = generate_profile(&road, 10.0, 0.01, 10_000, seed).unwrap();
            mean_var += population_variance(p.elevations.iter().copied()) / 100.0;
        }
        assert!((mean_var / target - 1.0).abs() < 0.3, "{mean_var} vs {target}");
    }

    #[test]
    fn snr_definition() {
        let clean: Vec<Vec<f64>> = (0..1000).map(|k| vec![if k % 2 == 0 { 1.0 } else { -1.0 }]).collect();
        let cfg = SensingConfig {
            snr_low: 10.0,
            snr_high: 10.0,
            gps_std: 0.0,
        };
        let noisy = corrupt_measurements(&clean, &cfg, 5).unwrap();
        assert!((noisy.noise_variances[0] - 0.1).abs() < 1e-15);
        assert_eq!(noisy.target_snr, vec![10.0]);
    }

    #[test]
    fn realized_snr_near_target() {
        let cfg = SensingConfig::default();
        let clean: Vec<Vec<f64>> = (0..151)
            .map(|k| {
                let t = k as f64 * 0.01;
                vec![(5.0 * t).sin(), 0.1 * (13.0 * t).cos()]
            })
            .collect();
        let mut within = 0;
        let mut total = 0;
        for seed in 0..50 {
            let n = corrupt_measurements(&clean, &cfg, seed).unwrap();
            for ch in 0..2 {
                assert!(n.target_snr[ch] >= 10.0 && n.target_snr[ch] <= 20.0);
                total += 1;
                if (n.realized_snr[ch] / n.target_snr[ch] - 1.0).abs() <= 0.2 {
                    within += 1;
                }
            }
        }
        // 151 samples give a noise-variance relative std of ~11.5%, so about
        // 92% of draws land inside +-20%.
        assert!(within as f64 >= 0.85 * total as f64, "{within}/{total}");
    }

    #[test]
    fn vanishing_noise_limit() {
        let clean: Vec<Vec<f64>> = (0..151).map(|k| vec![1.0 + (k as f64 * 0.1).sin()]).collect();
        let cfg = SensingConfig {
            snr_low: 1e9,
            snr_high: 1e9,
            gps_std: 0.0,
        };
        let n = corrupt_measurements(&clean, &cfg, 1).unwrap();
        for (a, b) in n.outputs.iter().zip(&clean) {
            assert!((a[0] - b[0]).abs() < 1e-3);
        }
    }

    #[test]
    fn zero_variance_channel_is_rejected() {
        let clean = vec![vec![1.0, 0.5]; 10];
        let err = corrupt_measurements(&clean, &SensingConfig::default(), 1).unwrap_err();
        assert!(matches!(err, Error::ZeroVarianceChannel(0)));
    }

    #[test]
    fn gps_noise() {
        let s: Vec<f64> = (0..10_000).map(|k| k as f64 * 0.25).collect();
        assert_eq!(corrupt_positions(&s, 0.0, 1).unwrap(), s);
        let noisy = corrupt_positions(&s, 0.2, 1).unwrap();
        let err: Vec<f64> = noisy.iter().zip(&s).map(|(a, b)| a - b).collect();
        let sd = population_variance(err.iter().copied()).sqrt();
        assert!((0.19..=0.21).contains(&sd), "{sd}");
        assert_eq!(noisy, corrupt_positions(&s, 0.2, 1).unwrap());
        // GPS noise larger than the spacing reorders samples; nothing sorts them back.
        assert!(noisy.windows(2).any(|w| w[1] < w[0]));
        assert!(corrupt_positions(&s, -1.0, 1).is_err());
    }

    #[test]
    fn interpolation_clamps() {
        let p = generate_profile(&table1_road(), 10.0, 0.1, 3, 4).unwrap();
        assert_eq!(p.elevation_at(-5.0), p.elevations[0]);
        assert_eq!(p.elevation_at(50.0), p.elevations[2]);
        let mid = p.elevation_at(0.5);
        assert!((mid - 0.5 * (p.elevations[0] + p.elevations[1])).abs() < 1e-15);
    }
}
