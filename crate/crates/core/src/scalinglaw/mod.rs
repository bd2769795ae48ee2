//! Parametric loss laws and their robust fitting.
//!
//! Two formulas are supported. The baseline
//! `L(N, D) = C + A/N^α + B/D^β` and a variant that adds a dependence on the
//! trainable fraction `S`:
//! `L(S, N, D) = C + (a_d ln D + b_d)/N^α + (a_s (1 - S)^b_s + c_s)/D^β`.

mod fit;
mod lbfgs;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::RunRecord;

pub use fit::{fit, fit_per_method, objective, FitConfig, FitReport, InitGrid, Objective, ResidualSpace, Split};
pub use lbfgs::{minimize, LbfgsOptions, LbfgsResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formula {
    Chinchilla,
    Modified,
}

impl Formula {
    pub fn as_str(self) -> &'static str {
        match self {
            Formula::Chinchilla => "chinchilla",
            Formula::Modified => "modified",
        }
    }

    pub fn n_coefficients(self) -> usize {
        match self {
            Formula::Chinchilla => 5,
            Formula::Modified => 8,
        }
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Formula {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "chinchilla" => Ok(Formula::Chinchilla),
            "modified" => Ok(Formula::Modified),
            other => Err(Error::Config(format!("unknown formula `{other}` (expected chinchilla or modified)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChinchillaParams {
    pub irreducible_loss: f64,
    pub a: f64,
    pub b: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModifiedParams {
    pub irreducible_loss: f64,
    pub a_d: f64,
    pub b_d: f64,
    pub alpha: f64,
    pub a_s: f64,
    pub b_s: f64,
    pub c_s: f64,
    pub beta: f64,
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be positive and finite, got {v}")))
    }
}

impl ChinchillaParams {
    pub fn validate(&self) -> Result<()> {
        check_positive("irreducible_loss", self.irreducible_loss)?;
        check_positive("A", self.a)?;
        check_positive("B", self.b)?;
        check_positive("alpha", self.alpha)?;
        check_positive("beta", self.beta)
    }

    pub fn as_vec(&self) -> Vec<f64> {
        vec![self.irreducible_loss, self.a, self.b, self.alpha, self.beta]
    }
}

impl ModifiedParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("irreducible_loss", self.irreducible_loss),
            ("a_d", self.a_d),
            ("b_d", self.b_d),
            ("a_s", self.a_s),
            ("c_s", self.c_s),
        ] {
            if !v.is_finite() {
                return Err(Error::Domain(format!("{name} must be finite, got {v}")));
            }
        }
        check_positive("b_s", self.b_s)?;
        check_positive("alpha", self.alpha)?;
        check_positive("beta", self.beta)
    }

    pub fn as_vec(&self) -> Vec<f64> {
        vec![
            self.irreducible_loss,
            self.a_d,
            self.b_d,
            self.alpha,
            self.a_s,
            self.b_s,
            self.c_s,
            self.beta,
        ]
    }
}

pub fn predict_chinchilla(p: &ChinchillaParams, n: f64, d: f64) -> Result<f64> {
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Domain(format!("model size N must be positive, got {n}")));
    }
    if !(d > 0.0 && d.is_finite()) {
        return Err(Error::Domain(format!("data quantity D must be positive, got {d}")));
    }
    Ok(p.irreducible_loss + p.a * n.powf(-p.alpha) + p.b * d.powf(-p.beta))
}

/// `(1 - S)^b_s`, with `0^b = 0` for the positive exponents the formula requires.
fn sparsity_factor(s: f64, b_s: f64) -> f64 {
    let free = 1.0 - s;
    if free <= 0.0 {
        0.0
    } else {
        free.powf(b_s)
    }
}

pub fn predict_modified(p: &ModifiedParams, s: f64, n: f64, d: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::Domain(format!("trainable fraction S must lie in [0, 1], got {s}")));
    }
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::Domain(format!("model size N must be positive, got {n}")));
    }
    if !(d > 1.0 && d.is_finite()) {
        return Err(Error::Domain(format!("data quantity D must exceed 1, got {d}")));
    }
    let data_term = p.a_d * d.ln() + p.b_d;
    let sparse_term = p.a_s * sparsity_factor(s, p.b_s) + p.c_s;
    Ok(p.irreducible_loss + data_term * n.powf(-p.alpha) + sparse_term * d.powf(-p.beta))
}

/// Coefficients of either formula, serialised as `{"formula": .., "coefficients": {..}}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "formula", content = "coefficients", rename_all = "snake_case")]
pub enum FittedParams {
    Chinchilla(ChinchillaParams),
    Modified(ModifiedParams),
}

impl FittedParams {
    pub fn formula(&self) -> Formula {
        match self {
            FittedParams::Chinchilla(_) => Formula::Chinchilla,
            FittedParams::Modified(_) => Formula::Modified,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FittedParams::Chinchilla(p) => p.validate(),
            FittedParams::Modified(p) => p.validate(),
        }
    }

    /// Predicted loss; `s` is ignored by the baseline formula.
    pub fn predict(&self, s: f64, n: f64, d: f64) -> Result<f64> {
        match self {
            FittedParams::Chinchilla(p) => predict_chinchilla(p, n, d),
            FittedParams::Modified(p) => predict_modified(p, s, n, d),
        }
    }

    pub fn predict_run(&self, run: &RunRecord) -> Result<f64> {
        self.predict(run.trainable_fraction, run.model_size(), run.data_quantity())
    }

    pub fn irreducible_loss(&self) -> f64 {
        match self {
            FittedParams::Chinchilla(p) => p.irreducible_loss,
            FittedParams::Modified(p) => p.irreducible_loss,
        }
    }

    pub fn as_vec(&self) -> Vec<f64> {
        match self {
            FittedParams::Chinchilla(p) => p.as_vec(),
            FittedParams::Modified(p) => p.as_vec(),
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let p: FittedParams = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

impl From<ChinchillaParams> for FittedParams {
    fn from(p: ChinchillaParams) -> Self {
        FittedParams::Chinchilla(p)
    }
}

impl From<ModifiedParams> for FittedParams {
    fn from(p: ModifiedParams) -> Self {
        FittedParams::Modified(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chinchilla_substitution() {
        let p = ChinchillaParams { irreducible_loss: 1.0, a: 1.0, b: 1.0, alpha: 1.0, beta: 1.0 };
        assert_eq!(predict_chinchilla(&p, 2.0, 4.0).unwrap(), 1.75);
        let far = predict_chinchilla(&p, 1e30, 1e30).unwrap();
        assert!((far - 1.0).abs() < 1e-9);
        assert!(predict_chinchilla(&p, 0.0, 4.0).is_err());
        assert!(predict_chinchilla(&p, 1.0, -4.0).is_err());
    }

    #[test]
    fn modified_hand_value() {
        let p = ModifiedParams {
            irreducible_loss: 0.2,
            a_d: 1.0,
            b_d: 0.0,
            alpha: 0.5,
            a_s: 2.0,
            b_s: 1.0,
            c_s: 1.0,
            beta: 0.5,
        };
        let l = predict_modified(&p, 0.5, 1e4, 2f64.exp()).unwrap();
        // 0.2 + 2/100 + 2/e
        assert!((l - 0.955_758_882_342_884_7).abs() < 1e-12, "{l}");
    }

    #[test]
    fn modified_domain() {
        let p = ModifiedParams {
            irreducible_loss: 0.2,
            a_d: 1.0,
            b_d: 0.0,
            alpha: 0.5,
            a_s: 2.0,
            b_s: 1.0,
            c_s: 1.0,
            beta: 0.5,
        };
        assert!(predict_modified(&p, 1.1, 1e4, 10.0).is_err());
        assert!(predict_modified(&p, 0.5, 1e4, 1.0).is_err());
        assert!(predict_modified(&p, 0.5, 0.0, 10.0).is_err());
    }

    #[test]
    fn params_json_shape() {
        let p = FittedParams::Chinchilla(ChinchillaParams {
            irreducible_loss: 1.0,
            a: 2.0,
            b: 3.0,
            alpha: 0.3,
            beta: 0.4,
        });
        let v: serde_json::Value = serde_json::to_value(p).unwrap();
        assert_eq!(v["formula"], "chinchilla");
        assert_eq!(v["coefficients"]["a"], 2.0);
        let back = FittedParams::from_json_str(&v.to_string()).unwrap();
        assert_eq!(back, p);
    }
}
