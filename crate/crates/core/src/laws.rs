//! Error distributions used for efficiency calculations and simulation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT as TDraw};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal, StudentsT};

use crate::error::{RdError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LawFamily {
    Normal,
    /// Laplace with unit scale.
    Laplace,
    StudentT {
        df: f64,
    },
    /// Zero-mean normal mixture.
    NormalMixture {
        weights: Vec<f64>,
        sds: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorLaw {
    pub family: LawFamily,
    /// Rescale to unit variance.
    pub standardized: bool,
}

impl ErrorLaw {
    pub fn new(family: LawFamily) -> Self {
        ErrorLaw {
            family,
            standardized: true,
        }
    }

    pub fn raw(family: LawFamily) -> Self {
        ErrorLaw {
            family,
            standardized: false,
        }
    }

    /// The five simulation laws, indexed 1..=5: N(0,1), Laplace, t3,
    /// 0.95N(0,1)+0.05N(0,3^2), 0.95N(0,1)+0.05N(0,10^2).
    pub fn numbered(index: usize) -> Result<Self> {
        let fam = match index {
            1 => LawFamily::Normal,
            2 => LawFamily::Laplace,
            3 => LawFamily::StudentT { df: 3.0 },
            4 => LawFamily::NormalMixture {
                weights: vec![0.95, 0.05],
                sds: vec![1.0, 3.0],
            },
            5 => LawFamily::NormalMixture {
                weights: vec![0.95, 0.05],
                sds: vec![1.0, 10.0],
            },
            _ => {
                return Err(RdError::InvalidInput(format!(
                    "law index must be 1..=5, got {index}"
                )))
            }
        };
        Ok(ErrorLaw::new(fam))
    }

    pub fn label(&self) -> String {
        match &self.family {
            LawFamily::Normal => "normal".into(),
            LawFamily::Laplace => "laplace".into(),
            LawFamily::StudentT { df } => format!("t{df}"),
            LawFamily::NormalMixture { weights, sds } => {
                let parts: Vec<String> = weights
                    .iter()
                    .zip(sds)
                    .map(|(w, s)| format!("{w}N(0,{s}^2)"))
                    .collect();
                parts.join("+")
            }
        }
    }

    /// Variance of the unstandardized law.
    pub fn raw_variance(&self) -> Result<f64> {
        match &self.family {
            LawFamily::Normal => Ok(1.0),
            LawFamily::Laplace => Ok(2.0),
            LawFamily::StudentT { df } => {
                if *df > 2.0 {
                    Ok(df / (df - 2.0))
                } else {
                    Err(RdError::InvalidInput(
                        "t law needs df > 2 for a finite variance".into(),
                    ))
                }
            }
            LawFamily::NormalMixture { weights, sds } => {
                Ok(weights.iter().zip(sds).map(|(w, s)| w * s * s).sum())
            }
        }
    }

    /// Divisor applied to raw draws.
    pub fn scale(&self) -> f64 {
        if self.standardized {
            self.raw_variance().map(f64::sqrt).unwrap_or(1.0)
        } else {
            1.0
        }
    }

    fn raw_pdf(&self, x: f64) -> f64 {
        match &self.family {
            LawFamily::Normal => Normal::standard().pdf(x),
            LawFamily::Laplace => 0.5 * (-x.abs()).exp(),
            LawFamily::StudentT { df } => StudentsT::new(0.0, 1.0, *df).expect("valid df").pdf(x),
            LawFamily::NormalMixture { weights, sds } => weights
                .iter()
                .zip(sds)
                .map(|(w, s)| w * Normal::new(0.0, *s).expect("sd > 0").pdf(x))
                .sum(),
        }
    }

    fn raw_cdf(&self, x: f64) -> f64 {
        match &self.family {
            LawFamily::Normal => Normal::standard().cdf(x),
            LawFamily::Laplace => {
                if x < 0.0 {
                    0.5 * x.exp()
                } else {
                    1.0 - 0.5 * (-x).exp()
                }
            }
            LawFamily::StudentT { df } => StudentsT::new(0.0, 1.0, *df).expect("valid df").cdf(x),
            LawFamily::NormalMixture { weights, sds } => weights
                .iter()
                .zip(sds)
                .map(|(w, s)| w * Normal::new(0.0, *s).expect("sd > 0").cdf(x))
                .sum(),
        }
    }

    fn raw_quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(RdError::QuantileInversionFailure(p));
        }
        match &self.family {
            LawFamily::Normal => Ok(Normal::standard().inverse_cdf(p)),
            LawFamily::Laplace => Ok(if p < 0.5 {
                (2.0 * p).ln()
            } else {
                -(2.0 * (1.0 - p)).ln()
            }),
            LawFamily::StudentT { df } => Ok(StudentsT::new(0.0, 1.0, *df)
                .expect("valid df")
                .inverse_cdf(p)),
            LawFamily::NormalMixture { .. } => self.bisect(p),
        }
    }

    fn bisect(&self, p: f64) -> Result<f64> {
        let mut lo = -1.0;
        let mut hi = 1.0;
        let mut grow = 0;
        while self.raw_cdf(lo) > p {
            lo *= 2.0;
            grow += 1;
            if grow > 200 {
                return Err(RdError::QuantileInversionFailure(p));
            }
        }
        while self.raw_cdf(hi) < p {
            hi *= 2.0;
            grow += 1;
            if grow > 200 {
                return Err(RdError::QuantileInversionFailure(p));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.raw_cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-12 {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let s = self.scale();
        s * self.raw_pdf(s * x)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.raw_cdf(self.scale() * x)
    }

    pub fn quantile(&self, p: f64) -> Result<f64> {
        Ok(self.raw_quantile(p)? / self.scale())
    }

    /// One draw on the (possibly standardized) scale.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let raw = match &self.family {
            LawFamily::Normal => StandardNormal.sample(rng),
            LawFamily::Laplace => {
                let u: f64 = rng.random::<f64>() - 0.5;
                -u.signum() * (1.0 - 2.0 * u.abs()).ln()
            }
            LawFamily::StudentT { df } => TDraw::new(*df).expect("valid df").sample(rng),
            LawFamily::NormalMixture { weights, sds } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut sd = *sds.last().expect("nonempty mixture");
                for (w, s) in weights.iter().zip(sds) {
                    acc += w;
                    if u < acc {
                        sd = *s;
                        break;
                    }
                }
                let z: f64 = StandardNormal.sample(rng);
                sd * z
            }
        };
        raw / self.scale()
    }
}
