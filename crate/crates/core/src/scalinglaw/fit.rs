use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::lbfgs::{minimize, LbfgsOptions};
use super::{ChinchillaParams, FittedParams, Formula, ModifiedParams};
use crate::costmodel::MethodClass;
use crate::digest::json_digest;
use crate::error::{Error, Result};
use crate::ingest::{RunRecord, RunSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualSpace {
    #[default]
    Log,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    /// Hold out every record of the largest model size.
    #[default]
    LargestModelHoldout,
    None,
}

/// Starting values for the multi-start search.
///
/// `alpha` and `beta` are used verbatim. `irreducible_fraction` is a fraction
/// of the smallest observed loss. `scale` multiplies the mean observed loss
/// to seed the remaining linear coefficients in units where the geometric
/// mean model size and data quantity are 1; it also seeds `b_s` directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitGrid {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub irreducible_fraction: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Default for InitGrid {
    fn default() -> Self {
        InitGrid {
            alpha: vec![0.1, 0.3, 0.5, 1.0],
            beta: vec![0.1, 0.3, 0.5, 1.0],
            irreducible_fraction: vec![0.0, 0.25, 0.5],
            scale: vec![0.1, 1.0, 10.0],
        }
    }
}

impl InitGrid {
    pub fn n_points(&self, formula: Formula) -> usize {
        let free = match formula {
            Formula::Chinchilla => 2,
            Formula::Modified => 5,
        };
        self.alpha.len() * self.beta.len() * self.irreducible_fraction.len() * self.scale.len().pow(free)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub huber_delta: f64,
    pub init_grid: InitGrid,
    pub max_iterations: usize,
    /// Infinity-norm threshold on the objective gradient.
    pub convergence_tol: f64,
    pub residual_space: ResidualSpace,
    pub split: Split,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            huber_delta: 1e-3,
            init_grid: InitGrid::default(),
            max_iterations: 500,
            convergence_tol: 1e-10,
            residual_space: ResidualSpace::Log,
            split: Split::LargestModelHoldout,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.huber_delta.is_finite() && self.huber_delta > 0.0) {
            return Err(Error::Config(format!("huber_delta must be positive, got {}", self.huber_delta)));
        }
        let g = &self.init_grid;
        for (name, list) in [
            ("alpha", &g.alpha),
            ("beta", &g.beta),
            ("irreducible_fraction", &g.irreducible_fraction),
            ("scale", &g.scale),
        ] {
            if list.is_empty() {
                return Err(Error::Config(format!("init_grid.{name} is empty")));
            }
            if list.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("init_grid.{name} has a non-finite entry")));
            }
        }
        if g.alpha.iter().chain(&g.beta).any(|&v| v <= 0.0) {
            return Err(Error::Config("init_grid exponents must be positive".into()));
        }
        if g.irreducible_fraction.iter().any(|&v| v < 0.0) {
            return Err(Error::Config("init_grid.irreducible_fraction must be non-negative".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::Config("convergence_tol must be positive".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    #[serde(flatten)]
    pub params: FittedParams,
    pub fit_config_digest: String,
    pub train_objective: f64,
    /// Root-mean-square log-loss error on held-out records; absent without a split.
    pub test_rmse_log: Option<f64>,
    pub train_rmse_log: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub init_used: FittedParams,
    pub converged: bool,
    pub starts_tried: usize,
    pub starts_failed: usize,
    pub warnings: Vec<String>,
}

impl FitReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// Relative objective difference below which two fits count as equally good.
const TIE_TOL: f64 = 1e-12;

fn huber(r: f64, delta: f64) -> (f64, f64) {
    if r.abs() <= delta {
        (0.5 * r * r, r)
    } else {
        (delta * (r.abs() - 0.5 * delta), delta * r.signum())
    }
}

struct Sample {
    /// ln N - mean ln N
    u: f64,
    /// ln D - mean ln D
    v: f64,
    /// ln(1 - S); -inf when S = 1
    ls: f64,
    obs: f64,
    ln_obs: f64,
}

/// The fitting objective in the optimiser's coordinates.
///
/// Positive coefficients are stored as logarithms and model size and data
/// quantity are centred on their geometric means, so linear coefficients
/// are O(loss). Chinchilla coordinates are `[ln C, ln A', ln α, ln B', ln β]`;
/// modified coordinates are `[ln C, a_d', b_d', ln α, a_s', ln b_s, c_s', ln β]`.
pub struct Objective {
    formula: Formula,
    samples: Vec<Sample>,
    ln_n_ref: f64,
    ln_d_ref: f64,
    delta: f64,
    space: ResidualSpace,
}

impl Objective {
    pub fn new(records: &[&RunRecord], formula: Formula, cfg: &FitConfig) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InsufficientData("no training records".into()));
        }
        let mut raw = Vec::with_capacity(records.len());
        for r in records {
            let (n, d, s) = (r.model_size(), r.data_quantity(), r.trainable_fraction);
            if !(r.final_loss > 0.0 && r.final_loss.is_finite()) {
                return Err(Error::Domain(format!("loss must be positive, got {}", r.final_loss)));
            }
            if !(n > 0.0) || !(d > 0.0) {
                return Err(Error::Domain(format!("N and D must be positive, got N={n}, D={d}")));
            }
            if formula == Formula::Modified {
                if !(d > 1.0) {
                    return Err(Error::Domain(format!("data quantity D must exceed 1, got {d}")));
                }
                if !(0.0..=1.0).contains(&s) {
                    return Err(Error::Domain(format!("trainable fraction must lie in [0, 1], got {s}")));
                }
            }
            raw.push((n.ln(), d.ln(), s, r.final_loss));
        }
        let m = raw.len() as f64;
        let ln_n_ref = raw.iter().map(|t| t.0).sum::<f64>() / m;
        let ln_d_ref = raw.iter().map(|t| t.1).sum::<f64>() / m;
        let samples = raw
            .into_iter()
            .map(|(ln_n, ln_d, s, l)| Sample {
                u: ln_n - ln_n_ref,
                v: ln_d - ln_d_ref,
                ls: if s >= 1.0 { f64::NEG_INFINITY } else { (1.0 - s).ln() },
                obs: l,
                ln_obs: l.ln(),
            })
            .collect();
        Ok(Objective {
            formula,
            samples,
            ln_n_ref,
            ln_d_ref,
            delta: cfg.huber_delta,
            space: cfg.residual_space,
        })
    }

    pub fn dim(&self) -> usize {
        self.formula.n_coefficients()
    }

    /// Objective value; writes the gradient when `grad` is given. Returns
    /// infinity where some prediction is non-positive in log space.
    pub fn evaluate(&self, theta: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
        let mut total = 0.0;
        let mut dl = [0.0f64; 8];
        for s in &self.samples {
            let pred = match self.formula {
                Formula::Chinchilla => {
                    let (c, a, alpha, b, beta) =
                        (theta[0].exp(), theta[1].exp(), theta[2].exp(), theta[3].exp(), theta[4].exp());
                    let tn = a * (-alpha * s.u).exp();
                    let td = b * (-beta * s.v).exp();
                    dl[0] = c;
                    dl[1] = tn;
                    dl[2] = -tn * s.u * alpha;
                    dl[3] = td;
                    dl[4] = -td * s.v * beta;
                    c + tn + td
                }
                Formula::Modified => {
                    let c = theta[0].exp();
                    let (a_d, b_d) = (theta[1], theta[2]);
                    let alpha = theta[3].exp();
                    let a_s = theta[4];
                    let b_s = theta[5].exp();
                    let c_s = theta[6];
                    let beta = theta[7].exp();
                    let en = (-alpha * s.u).exp();
                    let ed = (-beta * s.v).exp();
                    let w = if s.ls == f64::NEG_INFINITY { 0.0 } else { (b_s * s.ls).exp() };
                    let num_n = a_d * s.v + b_d;
                    let num_d = a_s * w + c_s;
                    dl[0] = c;
                    dl[1] = s.v * en;
                    dl[2] = en;
                    dl[3] = -num_n * en * s.u * alpha;
                    dl[4] = w * ed;
                    dl[5] = if w == 0.0 { 0.0 } else { a_s * w * s.ls * b_s * ed };
                    dl[6] = ed;
                    dl[7] = -num_d * ed * s.v * beta;
                    c + num_n * en + num_d * ed
                }
            };
            let (r, dr_dpred) = match self.space {
                ResidualSpace::Log => {
                    if !(pred > 0.0) || !pred.is_finite() {
                        return f64::INFINITY;
                    }
                    (pred.ln() - s.ln_obs, 1.0 / pred)
                }
                ResidualSpace::Linear => (pred - s.obs, 1.0),
            };
            let (h, dh) = huber(r, self.delta);
            total += h;
            if let Some(g) = grad.as_deref_mut() {
                let k = dh * dr_dpred;
                for (gi, di) in g.iter_mut().zip(&dl) {
                    *gi += k * di;
                }
            }
        }
        total
    }

    /// Maps optimiser coordinates to natural-unit coefficients.
    pub fn to_params(&self, theta: &[f64]) -> FittedParams {
        match self.formula {
            Formula::Chinchilla => {
                let alpha = theta[2].exp();
                let beta = theta[4].exp();
                FittedParams::Chinchilla(ChinchillaParams {
                    irreducible_loss: theta[0].exp(),
                    a: (theta[1] + alpha * self.ln_n_ref).exp(),
                    b: (theta[3] + beta * self.ln_d_ref).exp(),
                    alpha,
                    beta,
                })
            }
            Formula::Modified => {
                let alpha = theta[3].exp();
                let beta = theta[7].exp();
                let n_scale = (alpha * self.ln_n_ref).exp();
                let d_scale = (beta * self.ln_d_ref).exp();
                FittedParams::Modified(ModifiedParams {
                    irreducible_loss: theta[0].exp(),
                    a_d: theta[1] * n_scale,
                    b_d: (theta[2] - theta[1] * self.ln_d_ref) * n_scale,
                    alpha,
                    a_s: theta[4] * d_scale,
                    b_s: theta[5].exp(),
                    c_s: theta[6] * d_scale,
                    beta,
                })
            }
        }
    }

    /// Optimiser-coordinate starting points for every grid combination.
    pub fn initial_points(&self, grid: &InitGrid) -> Vec<Vec<f64>> {
        let min_l = self.samples.iter().map(|s| s.obs).fold(f64::INFINITY, f64::min);
        let mean_l = self.samples.iter().map(|s| s.obs).sum::<f64>() / self.samples.len() as f64;
        let ln_c: Vec<f64> = grid
            .irreducible_fraction
            .iter()
            .map(|&f| (f * min_l).max(1e-4 * min_l).ln())
            .collect();
        let lin: Vec<f64> = grid.scale.iter().map(|&v| v * mean_l).collect();
        let mut out = Vec::with_capacity(grid.n_points(self.formula));
        for &c in &ln_c {
            for &alpha in &grid.alpha {
                for &beta in &grid.beta {
                    match self.formula {
                        Formula::Chinchilla => {
                            for &a in &lin {
                                for &b in &lin {
                                    if a > 0.0 && b > 0.0 {
                                        out.push(vec![c, a.ln(), alpha.ln(), b.ln(), beta.ln()]);
                                    }
                                }
                            }
                        }
                        Formula::Modified => {
                            for &a_d in &lin {
                                for &b_d in &lin {
                                    for &a_s in &lin {
                                        for &b_s in &grid.scale {
                                            if b_s <= 0.0 {
                                                continue;
                                            }
                                            for &c_s in &lin {
                                                out.push(vec![c, a_d, b_d, alpha.ln(), a_s, b_s.ln(), c_s, beta.ln()]);
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Evaluates the fitting objective for natural-unit coefficients.
pub fn objective(params: &FittedParams, records: &[&RunRecord], cfg: &FitConfig) -> Result<f64> {
    let mut total = 0.0;
    for r in records {
        let pred = params.predict_run(r)?;
        let resid = match cfg.residual_space {
            ResidualSpace::Log => {
                if !(pred > 0.0) {
                    return Ok(f64::INFINITY);
                }
                pred.ln() - r.final_loss.ln()
            }
            ResidualSpace::Linear => pred - r.final_loss,
        };
        total += huber(resid, cfg.huber_delta).0;
    }
    Ok(total)
}

fn rmse_log(params: &FittedParams, records: &[&RunRecord]) -> Result<f64> {
    let mut sq = 0.0;
    for r in records {
        let pred = params.predict_run(r)?;
        if !(pred > 0.0) {
            return Ok(f64::INFINITY);
        }
        sq += (pred.ln() - r.final_loss.ln()).powi(2);
    }
    Ok((sq / records.len() as f64).sqrt())
}

fn lexicographic(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Fits one coefficient set to all records in `runs`.
pub fn fit(runs: &RunSet, formula: Formula, cfg: &FitConfig) -> Result<FitReport> {
    cfg.validate()?;
    let all: Vec<&RunRecord> = runs.iter().collect();
    let (train, test): (Vec<&RunRecord>, Vec<&RunRecord>) = match cfg.split {
        Split::None => (all, Vec::new()),
        Split::LargestModelHoldout => {
            let largest = all.iter().map(|r| r.model_size()).fold(f64::NEG_INFINITY, f64::max);
            all.into_iter().partition(|r| r.model_size() < largest)
        }
    };
    let k = formula.n_coefficients();
    if train.len() < k + 2 {
        return Err(Error::InsufficientData(format!(
            "the {formula} formula needs at least {} training records, got {}",
            k + 2,
            train.len()
        )));
    }

    let obj = Objective::new(&train, formula, cfg)?;
    let opts = LbfgsOptions {
        max_iterations: cfg.max_iterations,
        grad_tol: cfg.convergence_tol,
        ..Default::default()
    };
    let starts = obj.initial_points(&cfg.init_grid);
    struct Finished {
        f: f64,
        theta: Vec<f64>,
        coeffs: Vec<f64>,
        converged: bool,
        start: usize,
    }
    let mut finished = Vec::new();
    for (i, x0) in starts.iter().enumerate() {
        let fg = |x: &[f64], g: &mut [f64]| obj.evaluate(x, Some(g));
        match minimize(fg, x0, &opts) {
            Some(r) if r.f.is_finite() => {
                let coeffs = obj.to_params(&r.x).as_vec();
                finished.push(Finished {
                    f: r.f,
                    theta: r.x,
                    coeffs,
                    converged: r.converged,
                    start: i,
                });
            }
            _ => {}
        }
    }
    let failed = starts.len() - finished.len();
    // Objectives within TIE_TOL of the best are ties; among them the
    // lexicographically largest coefficient vector wins, which puts as much
    // loss as possible into the irreducible term.
    let f_min = finished.iter().map(|t| t.f).fold(f64::INFINITY, f64::min);
    let Finished {
        theta,
        converged,
        start: start_idx,
        ..
    } = finished
        .into_iter()
        .filter(|t| t.f <= f_min + TIE_TOL * f_min.abs().max(1.0))
        .max_by(|a, b| lexicographic(&a.coeffs, &b.coeffs).then(b.start.cmp(&a.start)))
        .ok_or_else(|| Error::FitFailure {
            tried: starts.len(),
            example: starts
                .first()
                .map(|x| format!("{:?}", obj.to_params(x)))
                .unwrap_or_else(|| "none".into()),
        })?;
    let x0 = &starts[start_idx];

    let params = obj.to_params(&theta);
    let init_used = obj.to_params(x0);
    let train_objective = objective(&params, &train, cfg)?;
    let test_rmse_log = if test.is_empty() { None } else { Some(rmse_log(&params, &test)?) };

    let mut warnings = Vec::new();
    if let FittedParams::Modified(p) = &params {
        let (lo, hi) = train.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(r.data_quantity()), hi.max(r.data_quantity()))
        });
        if p.a_d * lo.ln() + p.b_d <= 0.0 || p.a_d * hi.ln() + p.b_d <= 0.0 {
            warnings.push("fitted a_d ln D + b_d is not positive over the training D range; loss would not decrease with N".into());
        }
    }
    if !converged {
        warnings.push("best start stopped before meeting the convergence tolerance".into());
    }
    if cfg.split == Split::LargestModelHoldout && test.is_empty() {
        warnings.push("no held-out records".into());
    }

    Ok(FitReport {
        params,
        fit_config_digest: cfg.digest(),
        train_objective,
        test_rmse_log,
        train_rmse_log: rmse_log(&params, &train)?,
        n_train: train.len(),
        n_test: test.len(),
        init_used,
        converged,
        starts_tried: starts.len(),
        starts_failed: failed,
        warnings,
    })
}

/// Fits each fine-tuning method class separately.
pub fn fit_per_method(runs: &RunSet, formula: Formula, cfg: &FitConfig) -> Result<BTreeMap<MethodClass, FitReport>> {
    let mut out = BTreeMap::new();
    for class in runs.method_classes() {
        let subset = runs.filter_class(class).expect("class present in run set");
        out.insert(class, fit(&subset, formula, cfg)?);
    }
    Ok(out)
}
