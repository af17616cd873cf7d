//! Online threshold search: sequential model-based optimization with a
//! Gaussian-process surrogate (squared-exponential kernel, fitted
//! observation noise) and expected-improvement acquisition maximized by
//! random multi-start. The objective is task success minus a large
//! penalty when any budget constraint is violated.

use crate::policy::ThresholdVector;
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoConfig {
    /// Random points before the surrogate takes over.
    pub n_initial: usize,
    /// Total objective evaluations.
    pub n_total: usize,
    /// Random candidates per acquisition maximization.
    pub multi_start: usize,
    /// Penalty subtracted from the success score when constraints fail.
    pub penalty: f64,
    pub seed: u64,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig { n_initial: 10, n_total: 50, multi_start: 256, penalty: 10.0, seed: 0 }
    }
}

/// One measured evaluation of a threshold vector.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveSample {
    /// Success score in [0, 1] (average successful length / 5).
    pub scc: f64,
    pub avg_flops: f64,
    pub peak_flops: f64,
    pub mem_gb: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoLogRow {
    pub eval: usize,
    pub eta: Vec<f64>,
    pub scc: f64,
    pub avg_flops: f64,
    pub peak_flops: f64,
    pub mem_gb: f64,
    pub f_obj: f64,
    pub feasible: bool,
}

pub fn bo_log_csv_header(dims: usize) -> String {
    let mut s = String::from("eval");
    for i in 1..=dims {
        s.push_str(&format!(",eta{i}"));
    }
    s.push_str(",scc,avg_flops,peak_flops,mem,f_obj,feasible");
    s
}

pub fn bo_log_csv_row(r: &BoLogRow) -> String {
    let mut s = format!("{}", r.eval);
    for e in &r.eta {
        s.push_str(&format!(",{e}"));
    }
    s.push_str(&format!(
        ",{},{},{},{},{},{}",
        r.scc, r.avg_flops, r.peak_flops, r.mem_gb, r.f_obj, r.feasible as u8
    ));
    s
}

// ── Gaussian process ────────────────────────────────────────────────

struct Gp {
    x: Vec<Vec<f64>>,
    alpha: Vec<f64>,
    chol: Vec<Vec<f64>>,
    length: f64,
    signal_var: f64,
    y_mean: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kernel(a: &[f64], b: &[f64], length: f64, signal_var: f64) -> f64 {
    signal_var * (-sq_dist(a, b) / (2.0 * length * length)).exp()
}

/// Cholesky factor of a symmetric positive-definite matrix; adds jitter
/// until the factorization succeeds.
fn cholesky(k: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let n = k.len();
    let mut jitter = 0.0;
    loop {
        let mut l = vec![vec![0.0; n]; n];
        let mut ok = true;
        'fact: for i in 0..n {
            for j in 0..=i {
                let mut sum = k[i][j];
                if i == j {
                    sum += jitter;
                }
                for p in 0..j {
                    sum -= l[i][p] * l[j][p];
                }
                if i == j {
                    if sum <= 0.0 {
                        ok = false;
                        break 'fact;
                    }
                    l[i][j] = sum.sqrt();
                } else {
                    l[i][j] = sum / l[j][j];
                }
            }
        }
        if ok {
            return l;
        }
        jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
        assert!(jitter < 1.0, "cholesky failed to converge with jitter");
    }
}

fn chol_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = l.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for j in 0..i {
            s -= l[i][j] * y[j];
        }
        y[i] = s / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for j in i + 1..n {
            s -= l[j][i] * x[j];
        }
        x[i] = s / l[i][i];
    }
    x
}

fn log_marginal(l: &[Vec<f64>], alpha: &[f64], y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let fit: f64 = y.iter().zip(alpha).map(|(a, b)| a * b).sum();
    let logdet: f64 = l.iter().enumerate().map(|(i, row)| row[i].ln()).sum();
    -0.5 * fit - logdet - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

impl Gp {
    /// Fit by grid search over length scale and noise variance,
    /// maximizing the log marginal likelihood; signal variance is the
    /// sample variance of the centered targets.
    fn fit(x: &[Vec<f64>], y: &[f64]) -> Gp {
        let n = y.len();
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let yc: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
        let var = (yc.iter().map(|v| v * v).sum::<f64>() / n as f64).max(1e-12);
        let mut best: Option<(f64, f64, f64, Vec<Vec<f64>>, Vec<f64>)> = None;
        for &length in &[0.1, 0.25, 0.5, 1.0, 2.0] {
            for &noise_frac in &[1e-6, 1e-4, 1e-2, 1e-1] {
                let noise = noise_frac * var;
                let mut k = vec![vec![0.0; n]; n];
                for i in 0..n {
                    for j in 0..n {
                        k[i][j] = kernel(&x[i], &x[j], length, var);
                    }
                    k[i][i] += noise;
                }
                let l = cholesky(k);
                let alpha = chol_solve(&l, &yc);
                let lml = log_marginal(&l, &alpha, &yc);
                if best.as_ref().map(|b| lml > b.0).unwrap_or(true) {
                    best = Some((lml, length, var, l, alpha));
                }
            }
        }
        let (_, length, signal_var, chol, alpha) = best.unwrap();
        Gp { x: x.to_vec(), alpha, chol, length, signal_var, y_mean }
    }

    fn predict(&self, q: &[f64]) -> (f64, f64) {
        let n = self.x.len();
        let ks: Vec<f64> = (0..n)
            .map(|i| kernel(&self.x[i], q, self.length, self.signal_var))
            .collect();
        let mean: f64 =
            self.y_mean + ks.iter().zip(&self.alpha).map(|(a, b)| a * b).sum::<f64>();
        // solve L v = k_star for the predictive variance
        let mut v = vec![0.0; n];
        for i in 0..n {
            let mut s = ks[i];
            for j in 0..i {
                s -= self.chol[i][j] * v[j];
            }
            v[i] = s / self.chol[i][i];
        }
        let var = (self.signal_var - v.iter().map(|a| a * a).sum::<f64>()).max(1e-12);
        (mean, var.sqrt())
    }
}

fn erf(x: f64) -> f64 {
    // Abramowitz & Stegun 7.1.26, |error| < 1.5e-7
    let sign = x.signum();
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn expected_improvement(mean: f64, std: f64, f_best: f64) -> f64 {
    if std <= 1e-12 {
        return (mean - f_best).max(0.0);
    }
    let z = (mean - f_best) / std;
    (mean - f_best) * normal_cdf(z) + std * normal_pdf(z)
}

// ── The optimizer ───────────────────────────────────────────────────

/// Search thresholds for the action-consistency criterion under budget
/// constraints. `bounds[i]` is the upper limit for eta_{i+1} (free dims
/// are 1..n_cap-1; the cap threshold is always infinity). Returns the
/// best feasible thresholds found (None if every evaluation violated the
/// constraints) plus the full search log.
pub fn solve_online<F>(
    bounds: &[f64],
    n_cap: usize,
    n_exits: usize,
    cfg: &BoConfig,
    mut eval_fn: F,
) -> (Option<ThresholdVector>, Vec<BoLogRow>)
where
    F: FnMut(&ThresholdVector) -> ObjectiveSample,
{
    let dims = n_cap - 1;
    assert_eq!(bounds.len(), dims, "one bound per free threshold");
    let mut rng = Rng::stream(cfg.seed, "bo", &[]);
    let mut log: Vec<BoLogRow> = Vec::new();
    let mut xs: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut best_feasible: Option<(f64, ThresholdVector)> = None;

    let to_thresholds = |x: &[f64]| -> ThresholdVector {
        let mut eta = vec![0.0; n_exits];
        for (i, v) in x.iter().enumerate() {
            eta[i] = v * bounds[i];
        }
        for e in eta.iter_mut().skip(n_cap.saturating_sub(1)) {
            *e = f64::INFINITY;
        }
        ThresholdVector::new(eta, n_cap)
    };

    let n_total = if dims == 0 { 1 } else { cfg.n_total };
    for eval in 0..n_total {
        let x: Vec<f64> = if dims == 0 {
            Vec::new()
        } else if eval < cfg.n_initial || xs.len() < 2 {
            (0..dims).map(|_| rng.next_f64()).collect()
        } else {
            let gp = Gp::fit(&xs, &ys);
            let f_best = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut best_x: Option<(f64, Vec<f64>)> = None;
            for _ in 0..cfg.multi_start {
                let cand: Vec<f64> = (0..dims).map(|_| rng.next_f64()).collect();
                let (mean, std) = gp.predict(&cand);
                let ei = expected_improvement(mean, std, f_best);
                if best_x.as_ref().map(|b| ei > b.0).unwrap_or(true) {
                    best_x = Some((ei, cand));
                }
            }
            best_x.unwrap().1
        };
        let tv = to_thresholds(&x);
        let sample = eval_fn(&tv);
        let f_obj = sample.scc - if sample.feasible { 0.0 } else { cfg.penalty };
        log.push(BoLogRow {
            eval,
            eta: tv.eta.clone(),
            scc: sample.scc,
            avg_flops: sample.avg_flops,
            peak_flops: sample.peak_flops,
            mem_gb: sample.mem_gb,
            f_obj,
            feasible: sample.feasible,
        });
        xs.push(x);
        ys.push(f_obj);
        if sample.feasible
            && best_feasible
                .as_ref()
                .map(|(b, _)| f_obj > *b)
                .unwrap_or(true)
        {
            best_feasible = Some((f_obj, tv));
        }
    }
    (best_feasible.map(|(_, tv)| tv), log)
}
