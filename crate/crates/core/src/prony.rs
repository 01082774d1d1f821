//! Prony-series viscoelasticity: storage/loss moduli, fitting relative
//! moduli to a master curve, and truncation of elements too fast for the
//! simulation time step.
//!
//! With relaxation times fixed on a logarithmic grid the relative-error
//! objective
//!
//! ```text
//! e = Σ_k ((G'(ω_k) - F'_k) / F'_k)^2 + ((G''(ω_k) - F''_k) / F''_k)^2
//! ```
//!
//! is a weighted linear least-squares problem in `(g_∞, g_1..g_n)`, so the
//! fit is a small nonnegative least-squares solve.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fitting ignores master-curve samples at or above this frequency; they are
/// not representable at the simulation time step.
pub const MAX_FIT_FREQUENCY: f64 = 1e7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PronyElement {
    /// Relative modulus (dimensionless).
    pub g: f64,
    /// Relaxation time (s).
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PronySeries {
    pub g_inf: f64,
    /// Ordered by decreasing relaxation time.
    pub elements: Vec<PronyElement>,
}

impl PronySeries {
    pub fn new(g_inf: f64, elements: Vec<PronyElement>) -> Result<Self> {
        let s = PronySeries { g_inf, elements };
        s.validate()?;
        Ok(s)
    }

    /// Purely elastic series (`g_∞ = 1`, no Maxwell elements).
    pub fn elastic() -> Self {
        PronySeries {
            g_inf: 1.0,
            elements: Vec::new(),
        }
    }

    /// Relative moduli and relaxation times estimated for the printed
    /// acrylate elastomer, referenced to 21.8 °C.
    pub fn acrylate_elastomer() -> Self {
        let el = |g, tau| PronyElement { g, tau };
        PronySeries {
            g_inf: 9.06e-4,
            elements: vec![
                el(6.36e-4, 2.73e-1),
                el(2.09e-3, 7.56e-3),
                el(1.27e-2, 2.09e-4),
                el(1.25e-1, 5.77e-6),
                el(8.59e-1, 1.59e-7),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.g_inf >= 0.0 && self.g_inf.is_finite()) {
            return Err(Error::Parameter(format!("g_inf must be >= 0, got {}", self.g_inf)));
        }
        for (i, e) in self.elements.iter().enumerate() {
            if !(e.g >= 0.0 && e.g.is_finite()) {
                return Err(Error::Parameter(format!("g_{} must be >= 0, got {}", i + 1, e.g)));
            }
            if !(e.tau > 0.0 && e.tau.is_finite()) {
                return Err(Error::Parameter(format!("tau_{} must be > 0, got {}", i + 1, e.tau)));
            }
        }
        if self.elements.windows(2).any(|w| w[1].tau >= w[0].tau) {
            return Err(Error::Parameter(
                "Prony elements must be ordered by strictly decreasing tau".into(),
            ));
        }
        Ok(())
    }

    /// Rescale so that `g_∞ = 1`, i.e. moduli become relative to the
    /// equilibrium modulus instead of the instantaneous one.
    pub fn normalized_to_equilibrium(&self) -> Result<Self> {
        if self.g_inf <= 0.0 {
            return Err(Error::Parameter(
                "cannot normalize to equilibrium with g_inf = 0".into(),
            ));
        }
        Ok(PronySeries {
            g_inf: 1.0,
            elements: self
                .elements
                .iter()
                .map(|e| PronyElement {
                    g: e.g / self.g_inf,
                    tau: e.tau,
                })
                .collect(),
        })
    }

    /// Keep only the first `n` elements.
    pub fn first(&self, n: usize) -> Self {
        PronySeries {
            g_inf: self.g_inf,
            elements: self.elements.iter().take(n).copied().collect(),
        }
    }

    /// `g_∞ + Σ g_i`, the instantaneous relative modulus.
    pub fn instantaneous(&self) -> f64 {
        self.g_inf + self.elements.iter().map(|e| e.g).sum::<f64>()
    }

    /// Text block embeddable in a scenario file's `[solid]` section.
    pub fn to_scenario_block(&self) -> String {
        let g: Vec<String> = self.elements.iter().map(|e| format!("{:e}", e.g)).collect();
        let tau: Vec<String> = self.elements.iter().map(|e| format!("{:e}", e.tau)).collect();
        format!(
            "prony_g_inf = {:e}\nprony_g = [{}]\nprony_tau_s = [{}]\n",
            self.g_inf,
            g.join(", "),
            tau.join(", ")
        )
    }
}

/// Storage and loss moduli `(G', G'')` at angular frequency `omega`.
pub fn eval_moduli(series: &PronySeries, omega: f64) -> (f64, f64) {
    let mut storage = series.g_inf;
    let mut loss = 0.0;
    for e in &series.elements {
        let wt = omega * e.tau;
        let denom = 1.0 + wt * wt;
        storage += e.g * wt * wt / denom;
        loss += e.g * wt / denom;
    }
    (storage, loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveSample {
    pub omega: f64,
    pub storage: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MasterCurve {
    pub samples: Vec<CurveSample>,
    pub note: String,
}

impl MasterCurve {
    pub fn new(samples: Vec<CurveSample>) -> Result<Self> {
        let c = MasterCurve {
            samples,
            note: String::new(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::Fit("master curve is empty".into()));
        }
        for w in self.samples.windows(2) {
            if w[1].omega <= w[0].omega {
                return Err(Error::Fit("frequencies must be strictly increasing".into()));
            }
        }
        for s in &self.samples {
            if !(s.omega > 0.0) || !(s.storage > 0.0) || !s.loss.is_finite() {
                return Err(Error::Fit(format!(
                    "invalid sample at omega = {}: need omega > 0, G' > 0",
                    s.omega
                )));
            }
        }
        Ok(())
    }

    /// Curve sampled from a known series at the given frequencies.
    pub fn synthetic(series: &PronySeries, omegas: &[f64]) -> Result<Self> {
        let samples = omegas
            .iter()
            .map(|&omega| {
                let (storage, loss) = eval_moduli(series, omega);
                CurveSample {
                    omega,
                    storage,
                    loss,
                }
            })
            .collect();
        MasterCurve::new(samples)
    }
}

/// `n` frequencies spaced log-equally over `[lo, hi]`.
pub fn log_space(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PronyFit {
    pub series: PronySeries,
    /// Relative-error norm of the fitted series over the samples used.
    pub residual: f64,
    pub samples_used: usize,
}

/// Relative-error norm of `series` against `curve`. Loss terms are skipped
/// where the measured loss modulus is not positive.
pub fn fit_residual(series: &PronySeries, curve: &MasterCurve) -> f64 {
    curve
        .samples
        .iter()
        .filter(|s| s.omega < MAX_FIT_FREQUENCY)
        .map(|s| {
            let (gs, gl) = eval_moduli(series, s.omega);
            let mut e = ((gs - s.storage) / s.storage).powi(2);
            if s.loss > 0.0 {
                e += ((gl - s.loss) / s.loss).powi(2);
            }
            e
        })
        .sum()
}

/// Fit `g_∞` and `n_terms` relative moduli with relaxation times placed
/// log-equally over `tau_range` (largest first).
pub fn fit_prony(curve: &MasterCurve, n_terms: usize, tau_range: (f64, f64)) -> Result<PronyFit> {
    curve.validate()?;
    let (t_lo, t_hi) = if tau_range.0 <= tau_range.1 {
        tau_range
    } else {
        (tau_range.1, tau_range.0)
    };
    if !(t_lo > 0.0) || !t_hi.is_finite() {
        return Err(Error::Fit("tau range must be positive".into()));
    }
    let mut taus = log_space(t_lo, t_hi, n_terms.max(1));
    taus.truncate(n_terms);
    taus.reverse();

    let used: Vec<&CurveSample> = curve
        .samples
        .iter()
        .filter(|s| s.omega < MAX_FIT_FREQUENCY)
        .collect();
    let n_unknowns = n_terms + 1;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for s in &used {
        let mut storage_row = vec![1.0 / s.storage];
        let mut loss_row = vec![0.0];
        for &tau in &taus {
            let wt = s.omega * tau;
            let denom = 1.0 + wt * wt;
            storage_row.push(wt * wt / denom / s.storage);
            if s.loss > 0.0 {
                loss_row.push(wt / denom / s.loss);
            }
        }
        rows.push(storage_row);
        if s.loss > 0.0 {
            rows.push(loss_row);
        }
    }
    if rows.len() < n_unknowns {
        return Err(Error::Fit(format!(
            "{} equations for {} unknowns",
            rows.len(),
            n_unknowns
        )));
    }
    let a = DMatrix::from_fn(rows.len(), n_unknowns, |i, j| rows[i][j]);
    let b = DVector::from_element(rows.len(), 1.0);
    if a.clone().svd(false, false).rank(1e-13 * a.norm()) < n_unknowns {
        return Err(Error::Fit("design matrix is rank deficient".into()));
    }
    let x = nnls(&a, &b, 1e-14)?;
    let series = PronySeries {
        g_inf: x[0],
        elements: taus
            .iter()
            .enumerate()
            .map(|(i, &tau)| PronyElement { g: x[i + 1], tau })
            .collect(),
    };
    let residual = fit_residual(&series, curve);
    Ok(PronyFit {
        series,
        residual,
        samples_used: used.len(),
    })
}

/// Lawson-Hanson active-set nonnegative least squares: `min |Ax - b|, x ≥ 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
    let n = a.ncols();
    let mut x = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];
    let scale = a.norm() * b.norm();
    let max_outer = 3 * n + 10;
    for _ in 0..max_outer {
        let w = a.transpose() * (b - a * &x);
        let candidate = (0..n)
            .filter(|&j| !passive[j])
            .max_by(|&i, &j| w[i].partial_cmp(&w[j]).unwrap());
        let Some(j) = candidate else { break };
        if w[j] <= tol * scale.max(1.0) {
            break;
        }
        passive[j] = true;
        loop {
            let z = solve_passive(a, b, &passive)?;
            if (0..n).filter(|&i| passive[i]).all(|i| z[i] > 0.0) {
                x = z;
                break;
            }
            let mut alpha = f64::INFINITY;
            for i in 0..n {
                if passive[i] && z[i] <= 0.0 {
                    alpha = alpha.min(x[i] / (x[i] - z[i]));
                }
            }
            let zero_tol = 1e-14 * x.amax().max(z.amax());
            for i in 0..n {
                x[i] += alpha * (z[i] - x[i]);
                if passive[i] && x[i] <= zero_tol {
                    passive[i] = false;
                    x[i] = 0.0;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    Ok(x)
}

fn solve_passive(a: &DMatrix<f64>, b: &DVector<f64>, passive: &[bool]) -> Result<DVector<f64>> {
    let idx: Vec<usize> = (0..passive.len()).filter(|&i| passive[i]).collect();
    let sub = DMatrix::from_fn(a.nrows(), idx.len(), |r, c| a[(r, idx[c])]);
    let sol = sub
        .svd(true, true)
        .solve(b, 1e-15)
        .map_err(|e| Error::Fit(e.to_string()))?;
    let mut z = DVector::zeros(passive.len());
    for (c, &i) in idx.iter().enumerate() {
        z[i] = sol[c];
    }
    Ok(z)
}

/// Drop elements whose relaxation time is below `cutoff_factor * dt`.
pub fn truncate_for_dt(series: &PronySeries, dt: f64, cutoff_factor: f64) -> Result<PronySeries> {
    if !(dt > 0.0) {
        return Err(Error::Parameter(format!("dt must be > 0, got {dt}")));
    }
    Ok(PronySeries {
        g_inf: series.g_inf,
        elements: series
            .elements
            .iter()
            .filter(|e| e.tau >= cutoff_factor * dt)
            .copied()
            .collect(),
    })
}
