//! Box-constrained BFGS with backtracking line search, used to maximize the
//! log marginal likelihood over log-hyperparameters.

#[derive(Debug, Clone, Copy)]
pub struct OptimizerSettings {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// Largest change of any coordinate in one step.
    pub max_step: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tolerance: 1e-6,
            max_step: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    /// Objective evaluations, including rejected line-search trials.
    pub evaluations: usize,
    pub converged: bool,
}

/// Steps shorter than this (in every coordinate) end the line search.
const MIN_STEP: f64 = 1e-10;

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, lo), hi) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(*lo, *hi);
    }
}

/// Gradient with components zeroed where a bound is active and descent
/// would leave the box.
fn projected_gradient(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(g)
        .zip(lower.iter().zip(upper))
        .map(|((xi, gi), (lo, hi))| {
            if (*xi <= *lo && *gi > 0.0) || (*xi >= *hi && *gi < 0.0) {
                0.0
            } else {
                *gi
            }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimize `f` inside `[lower, upper]`. `f` returns `None` where the
/// objective cannot be evaluated; the line search backs off from such points.
pub fn minimize<F>(
    mut f: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    settings: &OptimizerSettings,
) -> Option<Minimum>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, lower, upper);
    let mut evaluations = 1;
    let (mut fx, mut g) = f(&x)?;
    let mut h = identity(n);
    let mut iterations = 0;
    let mut converged = false;
    let mut stalls = 0;

    while iterations < settings.max_iterations {
        let pg = projected_gradient(&x, &g, lower, upper);
        if inf_norm(&pg) < settings.gradient_tolerance {
            converged = true;
            break;
        }
        iterations += 1;

        let mut d = direction(&h, &g);
        for i in 0..n {
            if (x[i] <= lower[i] && d[i] < 0.0) || (x[i] >= upper[i] && d[i] > 0.0) {
                d[i] = 0.0;
            }
        }
        if dot(&d, &pg) >= 0.0 {
            h = identity(n);
            d = pg.iter().map(|v| -v).collect();
        }
        let longest = inf_norm(&d);
        if longest > settings.max_step {
            d.iter_mut().for_each(|v| *v *= settings.max_step / longest);
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
            project(&mut trial, lower, upper);
            let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            if inf_norm(&step) < MIN_STEP {
                break;
            }
            evaluations += 1;
            let slope = dot(&g, &step);
            let mut next = 0.5;
            if let Some((ft, gt)) = f(&trial) {
                if ft.is_finite() && ft <= fx + 1e-4 * slope {
                    accepted = Some((trial, ft, gt, step));
                    break;
                }
                // minimizer of the quadratic through f(x), f'(x) and f(trial)
                let curvature = ft - fx - slope;
                if ft.is_finite() && curvature > 0.0 {
                    next = (-0.5 * slope / curvature).clamp(0.1, 0.5);
                }
            }
            t *= next;
        }
        let Some((x_new, f_new, g_new, s)) = accepted else {
            converged = inf_norm(&pg) < settings.gradient_tolerance.sqrt();
            break;
        };

        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * inf_norm(&s) * inf_norm(&y) && sy > 0.0 {
            if iterations == 1 {
                let scale = sy / dot(&y, &y);
                h = identity(n);
                h.iter_mut().for_each(|row| row.iter_mut().for_each(|v| *v *= scale));
            }
            bfgs_update(&mut h, &s, &y, sy);
        }

        let decrease = fx - f_new;
        x = x_new;
        g = g_new;
        fx = f_new;
        if decrease.abs() <= 1e-13 * fx.abs().max(1.0) {
            stalls += 1;
            if stalls >= 3 {
                converged = true;
                break;
            }
        } else {
            stalls = 0;
        }
    }
    Some(Minimum {
        x,
        value: fx,
        iterations,
        evaluations,
        converged,
    })
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn direction(h: &[Vec<f64>], g: &[f64]) -> Vec<f64> {
    h.iter().map(|row| -dot(row, g)).collect()
}

/// Inverse-Hessian update `H <- (I - r s y^T) H (I - r y s^T) + r s s^T`.
fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = h.iter().map(|row| dot(row, y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            Some((v, g))
        };
        let m = minimize(f, &[-1.2, 1.0], &[-5.0, -5.0], &[5.0, 5.0], &OptimizerSettings::default()).unwrap();
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5, "{:?}", m.x);
    }

    #[test]
    fn respects_bounds() {
        let f = |x: &[f64]| Some(((x[0] - 3.0).powi(2), vec![2.0 * (x[0] - 3.0)]));
        let m = minimize(f, &[0.0], &[-1.0], &[1.0], &OptimizerSettings::default()).unwrap();
        assert_eq!(m.x[0], 1.0);
        assert!(m.converged);
    }

    #[test]
    fn backs_off_from_undefined_region() {
        // Undefined for x > 0.5; minimum of the defined part at the edge region.
        let f = |x: &[f64]| {
            if x[0] > 0.5 {
                None
            } else {
                Some(((x[0] - 0.4).powi(2), vec![2.0 * (x[0] - 0.4)]))
            }
        };
        let m = minimize(f, &[-2.0], &[-10.0], &[10.0], &OptimizerSettings::default()).unwrap();
        assert!((m.x[0] - 0.4).abs() < 1e-6);
    }
}
