//! IsoFLOP profiles, optimal-size power laws and the loss frontier.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::costmodel::{FineTuneMethod, MethodClass};
use crate::error::{Error, Result};
use crate::ingest::{RunRecord, RunSet};
use crate::stats::least_squares_line;

pub const DEFAULT_GROUPING_TOLERANCE: f64 = 0.05;
const PARALLEL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileOptions {
    /// Relative FLOP tolerance for grouping runs into one budget.
    pub grouping_tolerance: f64,
    /// Known budget levels. Without them, budgets are found by grouping
    /// sorted FLOP values greedily.
    pub nominal_budgets: Option<Vec<f64>>,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        ProfileOptions {
            grouping_tolerance: DEFAULT_GROUPING_TOLERANCE,
            nominal_budgets: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub budget: f64,
    pub size: f64,
    pub model_name: String,
    pub best_loss: f64,
    /// LoRA rank or active-block fraction of the winning run.
    pub best_hyper: Option<f64>,
    pub best_method: FineTuneMethod,
    pub n_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsoflopProfile {
    pub method: MethodClass,
    pub grouping_tolerance: f64,
    /// Sorted by (budget, size).
    pub points: Vec<ProfilePoint>,
    /// Runs that fell outside every budget bucket.
    pub excluded: Vec<String>,
}

/// Groups sorted positive values into buckets whose members lie within
/// `tol` (relative) of the bucket's smallest member. Returns, for each input
/// index, the geometric mean of its bucket.
fn bucket_values(values: &[f64], tol: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let anchor = values[order[start]];
        let mut end = start + 1;
        while end < order.len() && values[order[end]] <= anchor * (1.0 + tol) {
            end += 1;
        }
        let members = &order[start..end];
        let gm = (members.iter().map(|&i| values[i].ln()).sum::<f64>() / members.len() as f64).exp();
        for &i in members {
            out[i] = gm;
        }
        start = end;
    }
    out
}

fn nearest_nominal(value: f64, nominal: &[f64], tol: f64) -> Option<f64> {
    nominal
        .iter()
        .copied()
        .filter(|&c| (value / c - 1.0).abs() <= tol)
        .min_by(|a, b| (value.ln() - a.ln()).abs().total_cmp(&(value.ln() - b.ln()).abs()))
}

/// Total order used to pick among equal-loss runs: smaller hyperparameter,
/// then method text, then replicate.
fn tie_key(r: &RunRecord) -> (f64, String, u32) {
    (
        r.method_hyper.unwrap_or(f64::NEG_INFINITY),
        r.method.to_string(),
        r.replicate.unwrap_or(0),
    )
}

fn better(a: &RunRecord, b: &RunRecord) -> bool {
    match a.final_loss.total_cmp(&b.final_loss) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => {
            let (ka, kb) = (tie_key(a), tie_key(b));
            match ka.0.total_cmp(&kb.0) {
                std::cmp::Ordering::Equal => (ka.1, ka.2) < (kb.1, kb.2),
                o => o.is_lt(),
            }
        }
    }
}

pub fn build_profiles(runs: &RunSet, method: MethodClass, opts: &ProfileOptions) -> Result<IsoflopProfile> {
    let tol = opts.grouping_tolerance;
    if !(tol.is_finite() && tol >= 0.0) {
        return Err(Error::Config(format!("grouping tolerance must be non-negative, got {tol}")));
    }
    let selected: Vec<&RunRecord> = runs.iter().filter(|r| r.method_class() == method).collect();
    if selected.is_empty() {
        return Err(Error::InsufficientData(format!("no {method} runs")));
    }

    let mut excluded = Vec::new();
    let mut assigned: Vec<(f64, &RunRecord)> = Vec::with_capacity(selected.len());
    match &opts.nominal_budgets {
        Some(nominal) => {
            for r in &selected {
                match nearest_nominal(r.flop, nominal, tol) {
                    Some(c) => assigned.push((c, r)),
                    None => excluded.push(format!(
                        "{} {} at {:e} FLOP matches no budget within {}%",
                        r.model_name,
                        r.method,
                        r.flop,
                        tol * 100.0
                    )),
                }
            }
        }
        None => {
            let flops: Vec<f64> = selected.iter().map(|r| r.flop).collect();
            let buckets = bucket_values(&flops, tol);
            assigned.extend(buckets.into_iter().zip(selected.iter().copied()));
        }
    }
    excluded.sort();

    let mut best: BTreeMap<(u64, u64), (&RunRecord, usize)> = BTreeMap::new();
    for (budget, r) in assigned {
        let key = (budget.to_bits(), r.n_total);
        best.entry(key)
            .and_modify(|(cur, n)| {
                *n += 1;
                if better(r, cur) {
                    *cur = r;
                }
            })
            .or_insert((r, 1));
    }
    let mut points: Vec<ProfilePoint> = best
        .into_iter()
        .map(|((b, _), (r, n))| ProfilePoint {
            budget: f64::from_bits(b),
            size: r.model_size(),
            model_name: r.model_name.clone(),
            best_loss: r.final_loss,
            best_hyper: r.method_hyper,
            best_method: r.method.clone(),
            n_runs: n,
        })
        .collect();
    points.sort_by(|a, b| a.budget.total_cmp(&b.budget).then(a.size.total_cmp(&b.size)));
    Ok(IsoflopProfile {
        method,
        grouping_tolerance: tol,
        points,
        excluded,
    })
}

impl IsoflopProfile {
    pub fn budgets(&self) -> Vec<f64> {
        let mut b: Vec<f64> = self.points.iter().map(|p| p.budget).collect();
        b.dedup();
        b
    }

    pub fn at_budget(&self, budget: f64) -> impl Iterator<Item = &ProfilePoint> {
        self.points.iter().filter(move |p| p.budget == budget)
    }

    /// The lowest-loss point at each budget; equal losses go to the smaller model.
    pub fn optimal_points(&self) -> Vec<&ProfilePoint> {
        self.budgets()
            .into_iter()
            .filter_map(|b| {
                self.at_budget(b).fold(None, |acc: Option<&ProfilePoint>, p| match acc {
                    Some(q) if q.best_loss < p.best_loss || (q.best_loss == p.best_loss && q.size <= p.size) => Some(q),
                    _ => Some(p),
                })
            })
            .collect()
    }

    /// The profile bucket whose budget is closest to `budget` in log space,
    /// if it lies within the grouping tolerance.
    pub fn matching_budget(&self, budget: f64) -> Option<f64> {
        nearest_nominal(budget, &self.budgets(), self.grouping_tolerance)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,budget,size,model_name,loss,hyper,best_method,n_runs\n");
        for p in &self.points {
            let hyper = p.best_hyper.map(|h| h.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{:e},{},{},{},{},{},{}",
                self.method, p.budget, p.size, p.model_name, p.best_loss, hyper, p.best_method, p.n_runs
            );
        }
        out
    }
}

/// `ln y = slope · ln x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub slope: f64,
    pub intercept: f64,
    /// `[min ln x, max ln x]` of the fitted data; `None` for a line given by hand.
    #[serde(default)]
    pub domain: Option<[f64; 2]>,
    pub r_squared: f64,
}

impl PowerLawFit {
    pub fn from_line(slope: f64, intercept: f64) -> Self {
        PowerLawFit {
            slope,
            intercept,
            domain: None,
            r_squared: 1.0,
        }
    }

    pub fn fit(x: &[f64], y: &[f64]) -> Result<Self> {
        if x.iter().chain(y).any(|v| !(*v > 0.0)) {
            return Err(Error::Domain("power-law fits need positive data".into()));
        }
        let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
        let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
        let line = least_squares_line(&lx, &ly)?;
        let lo = lx.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = lx.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(PowerLawFit {
            slope: line.slope,
            intercept: line.intercept,
            domain: Some([lo, hi]),
            r_squared: line.r_squared,
        })
    }

    pub fn ln_eval(&self, x: f64) -> f64 {
        self.slope * x.ln() + self.intercept
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.ln_eval(x).exp()
    }

    pub fn in_domain(&self, x: f64) -> bool {
        let l = x.ln();
        self.domain
            .is_none_or(|[lo, hi]| l >= lo - 1e-12 && l <= hi + 1e-12)
    }
}

/// Power law of the loss-minimising model size against budget.
pub fn optimal_size_fit(profile: &IsoflopProfile) -> Result<PowerLawFit> {
    let opt: Vec<&ProfilePoint> = profile
        .optimal_points()
        .into_iter()
        .filter(|p| profile.at_budget(p.budget).count() >= 2)
        .collect();
    if opt.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "optimal-size fit for {} needs at least two budgets with two or more sizes, found {}",
            profile.method,
            opt.len()
        )));
    }
    let c: Vec<f64> = opt.iter().map(|p| p.budget).collect();
    let n: Vec<f64> = opt.iter().map(|p| p.size).collect();
    PowerLawFit::fit(&c, &n)
}

/// `ln C*` where two loss lines meet, or `None` for (near-)parallel lines.
pub fn crossover_ln_budget(a: &PowerLawFit, b: &PowerLawFit) -> Option<f64> {
    let dm = a.slope - b.slope;
    if dm.abs() < PARALLEL_EPS {
        return None;
    }
    Some((b.intercept - a.intercept) / dm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crossover {
    pub budget: f64,
    pub ln_budget: f64,
    pub before: MethodClass,
    pub after: MethodClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frontier {
    pub per_method_fits: BTreeMap<MethodClass, PowerLawFit>,
    /// Switch points of the lower envelope, by increasing budget.
    pub crossovers: Vec<Crossover>,
    /// Best observed loss per budget for each method, as (budget, loss).
    #[serde(default)]
    pub observed: BTreeMap<MethodClass, Vec<(f64, f64)>>,
}

impl Frontier {
    pub fn from_fits(per_method_fits: BTreeMap<MethodClass, PowerLawFit>) -> Result<Self> {
        if per_method_fits.is_empty() {
            return Err(Error::InsufficientData("frontier needs at least one method".into()));
        }
        let mut f = Frontier {
            per_method_fits,
            crossovers: Vec::new(),
            observed: BTreeMap::new(),
        };
        f.crossovers = f.envelope_switches();
        Ok(f)
    }

    fn best_at_ln(&self, x: f64) -> MethodClass {
        let mut best: Option<(MethodClass, f64)> = None;
        for (&m, fit) in &self.per_method_fits {
            let y = fit.slope * x + fit.intercept;
            if best.is_none_or(|(_, by)| y < by) {
                best = Some((m, y));
            }
        }
        best.expect("non-empty frontier").0
    }

    fn envelope_switches(&self) -> Vec<Crossover> {
        let fits: Vec<(MethodClass, &PowerLawFit)> = self.per_method_fits.iter().map(|(m, f)| (*m, f)).collect();
        let mut xs: Vec<f64> = Vec::new();
        for i in 0..fits.len() {
            for j in i + 1..fits.len() {
                if let Some(x) = crossover_ln_budget(fits[i].1, fits[j].1) {
                    if x.is_finite() {
                        xs.push(x);
                    }
                }
            }
        }
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        let mut out = Vec::new();
        for (k, &x) in xs.iter().enumerate() {
            let left = if k == 0 { x - 1.0 } else { 0.5 * (xs[k - 1] + x) };
            let right = if k + 1 == xs.len() { x + 1.0 } else { 0.5 * (x + xs[k + 1]) };
            let (before, after) = (self.best_at_ln(left), self.best_at_ln(right));
            if before != after {
                out.push(Crossover {
                    budget: x.exp(),
                    ln_budget: x,
                    before,
                    after,
                });
            }
        }
        out
    }

    /// Method whose fitted line gives the lowest loss at `budget`.
    pub fn best_method(&self, budget: f64) -> MethodClass {
        self.best_at_ln(budget.ln())
    }

    pub fn predicted_loss(&self, method: MethodClass, budget: f64) -> Option<f64> {
        self.per_method_fits.get(&method).map(|f| f.eval(budget))
    }

    /// Lowest observed loss at a budget within `tol` of an observed level.
    pub fn best_observed(&self, budget: f64, tol: f64) -> Option<(MethodClass, f64)> {
        let mut best: Option<(MethodClass, f64)> = None;
        for (&m, pts) in &self.observed {
            for &(b, l) in pts {
                if (budget / b - 1.0).abs() <= tol && best.is_none_or(|(_, bl)| l < bl) {
                    best = Some((m, l));
                }
            }
        }
        best
    }

    pub fn fits_csv(&self) -> String {
        let mut out = String::from("method,slope,intercept,r2\n");
        for (m, f) in &self.per_method_fits {
            let _ = writeln!(out, "{m},{},{},{}", f.slope, f.intercept, f.r_squared);
        }
        out
    }
}

/// Fits `ln(best loss)` against `ln(budget)` for every profile with at
/// least two budgets. Returns the frontier and notes on skipped profiles.
pub fn frontier(profiles: &[IsoflopProfile]) -> Result<(Frontier, Vec<String>)> {
    let mut fits = BTreeMap::new();
    let mut observed = BTreeMap::new();
    let mut notes = Vec::new();
    for p in profiles {
        let opt = p.optimal_points();
        if opt.len() < 2 {
            notes.push(format!("{}: only {} budget level(s), left out of the frontier", p.method, opt.len()));
            continue;
        }
        let c: Vec<f64> = opt.iter().map(|q| q.budget).collect();
        let l: Vec<f64> = opt.iter().map(|q| q.best_loss).collect();
        fits.insert(p.method, PowerLawFit::fit(&c, &l)?);
        observed.insert(p.method, c.into_iter().zip(l).collect());
    }
    if fits.is_empty() {
        return Err(Error::InsufficientData("no profile has two or more budgets".into()));
    }
    let mut f = Frontier::from_fits(fits)?;
    f.observed = observed;
    Ok((f, notes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataGroup {
    pub tokens: f64,
    pub best_model: String,
    pub best_size: f64,
    pub best_method: FineTuneMethod,
    pub best_loss: f64,
    pub largest_size: f64,
    pub n_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConstrainedReport {
    pub groups: Vec<DataGroup>,
    /// True when the largest model in every group also has the lowest loss.
    pub largest_model_wins: bool,
}

/// Best configuration at each (bucketed) token count.
pub fn data_constrained_profile(runs: &RunSet, tol: f64) -> Result<DataConstrainedReport> {
    if runs.is_empty() {
        return Err(Error::InsufficientData("no runs".into()));
    }
    let recs: Vec<&RunRecord> = runs.iter().collect();
    let tokens: Vec<f64> = recs.iter().map(|r| r.data_quantity()).collect();
    let buckets = bucket_values(&tokens, tol);
    let mut groups: BTreeMap<u64, Vec<&RunRecord>> = BTreeMap::new();
    for (b, r) in buckets.into_iter().zip(recs) {
        groups.entry(b.to_bits()).or_default().push(r);
    }
    let mut out = Vec::new();
    for (b, members) in groups {
        let mut best = members[0];
        for r in &members[1..] {
            if better(r, best) || (r.final_loss == best.final_loss && r.model_size() < best.model_size()) {
                best = r;
            }
        }
        let largest = members.iter().map(|r| r.model_size()).fold(0.0, f64::max);
        out.push(DataGroup {
            tokens: f64::from_bits(b),
            best_model: best.model_name.clone(),
            best_size: best.model_size(),
            best_method: best.method.clone(),
            best_loss: best.final_loss,
            largest_size: largest,
            n_runs: members.len(),
        });
    }
    out.sort_by(|a, b| a.tokens.total_cmp(&b.tokens));
    let largest_model_wins = out.iter().all(|g| g.best_size == g.largest_size);
    Ok(DataConstrainedReport {
        groups: out,
        largest_model_wins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucketing_groups_close_values() {
        let b = bucket_values(&[100.0, 102.0, 200.0, 98.0, 205.0], 0.05);
        assert_eq!(b[0], b[1]);
        assert_eq!(b[0], b[3]);
        assert_eq!(b[2], b[4]);
        assert_ne!(b[0], b[2]);
    }

    #[test]
    fn crossover_direct_formula() {
        let a = PowerLawFit::from_line(-1.0, 0.0);
        let b = PowerLawFit::from_line(-2.0, 10.0);
        assert_eq!(crossover_ln_budget(&a, &b), Some(10.0));
        assert_eq!(crossover_ln_budget(&a, &a), None);
    }

    #[test]
    fn envelope_switch_direction() {
        let fits: BTreeMap<_, _> = [
            (MethodClass::Full, PowerLawFit::from_line(-0.21, 8.39)),
            (MethodClass::Lora, PowerLawFit::from_line(-0.22, 8.93)),
        ]
        .into_iter()
        .collect();
        let f = Frontier::from_fits(fits).unwrap();
        assert_eq!(f.crossovers.len(), 1);
        let c = f.crossovers[0];
        assert!((c.ln_budget - 54.0).abs() < 1e-9);
        assert_eq!((c.before, c.after), (MethodClass::Full, MethodClass::Lora));
        assert_eq!(f.best_method(1e20), MethodClass::Full);
        assert_eq!(f.best_method(54f64.exp() * 2.0), MethodClass::Lora);
    }
}
