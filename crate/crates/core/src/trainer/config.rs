use std::fmt;
use std::str::FromStr;

use crate::data::DEFAULT_CROP;
use crate::error::{Error, Result};
use crate::routing::INPUT_DIVISOR;
use crate::semisup::Reduction;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Supervised loss only.
    None,
    /// Supervised plus jigsaw.
    SslOnly,
    MeanTeacher,
    CoTeaching,
    /// Supervised, jigsaw and the semi-supervised strategy in `strategy`.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    MeanTeacher,
    CoTeaching,
}

/// The per-pixel supervised loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SupLoss {
    Ce,
    /// Hard-pixel cross-entropy keeping pixels below `keep_threshold`
    /// true-class probability, at least 1/16 of the valid pixels.
    Ohem { keep_threshold: f64 },
}

pub const DEFAULT_OHEM_KEEP: f64 = 0.7;

macro_rules! names {
    ($ty:ty, $what:literal, $($variant:path => $name:literal),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", $what, " {:?} (expected one of: {})"),
                        s,
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name,)+ })
            }
        }
    };
}

names!(Method, "method",
    Method::None => "none",
    Method::SslOnly => "ssl_only",
    Method::MeanTeacher => "mean_teacher",
    Method::CoTeaching => "co_teaching",
    Method::Full => "full",
);

names!(Strategy, "strategy",
    Strategy::MeanTeacher => "mean_teacher",
    Strategy::CoTeaching => "co_teaching",
);

impl FromStr for SupLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(SupLoss::Ce),
            "ohem" => Ok(SupLoss::Ohem {
                keep_threshold: DEFAULT_OHEM_KEEP,
            }),
            _ => Err(Error::Config(format!("unknown supervised loss {s:?} (expected ce or ohem)"))),
        }
    }
}

impl fmt::Display for SupLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SupLoss::Ce => f.write_str("ce"),
            SupLoss::Ohem { .. } => f.write_str("ohem"),
        }
    }
}

impl Strategy {
    pub fn default_lambda2(self) -> f64 {
        match self {
            Strategy::MeanTeacher => 100.0,
            Strategy::CoTeaching => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda0: f64,
    pub lambda1: f64,
    /// `None` picks the strategy default.
    pub lambda2: Option<f64>,
    pub method: Method,
    /// Semi-supervised strategy used by [`Method::Full`].
    pub strategy: Strategy,
    pub alpha: f64,
    pub lr0: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub seed: u64,
    pub augment: bool,
    pub crop: usize,
    pub sup_loss: SupLoss,
    pub consistency: Reduction,
    pub jigsaw_seed: u64,
    /// Also train the segmentation head on jigsawed labeled images with
    /// identically permuted masks.
    pub jigsaw_labels: bool,
    /// Standard deviation of independent Gaussian input noise giving the
    /// teacher (or second peer) its own view; 0 shares the view.
    pub view_noise: f64,
    pub threads: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda0: 1.0,
            lambda1: 0.1,
            lambda2: None,
            method: Method::None,
            strategy: Strategy::MeanTeacher,
            alpha: 0.99,
            lr0: 0.02,
            momentum: 0.9,
            poly_power: 0.9,
            epochs: 1,
            batch_labeled: 4,
            batch_unlabeled: 4,
            seed: 0,
            augment: true,
            crop: DEFAULT_CROP,
            sup_loss: SupLoss::Ce,
            consistency: Reduction::PixelMean,
            jigsaw_seed: 0,
            jigsaw_labels: false,
            view_noise: 0.0,
            threads: 1,
            log_every: 1,
        }
    }
}

/// Which loss terms a configuration actually evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Plan {
    pub ssl: bool,
    pub strategy: Option<Strategy>,
}

impl Plan {
    pub fn uses_unlabeled(&self) -> bool {
        self.ssl || self.strategy.is_some()
    }
}

impl TrainConfig {
    /// Strategy named by the method, before λ filtering.
    pub fn method_strategy(&self) -> Option<Strategy> {
        match self.method {
            Method::MeanTeacher => Some(Strategy::MeanTeacher),
            Method::CoTeaching => Some(Strategy::CoTeaching),
            Method::Full => Some(self.strategy),
            Method::None | Method::SslOnly => None,
        }
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2.unwrap_or_else(|| {
            self.method_strategy()
                .map_or(Strategy::MeanTeacher.default_lambda2(), Strategy::default_lambda2)
        })
    }

    /// A term with λ = 0 is switched off just like one the method omits.
    pub fn plan(&self) -> Plan {
        Plan {
            ssl: matches!(self.method, Method::SslOnly | Method::Full) && self.lambda1 > 0.0,
            strategy: self.method_strategy().filter(|_| self.lambda2() > 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [("lambda0", self.lambda0), ("lambda1", self.lambda1), ("lambda2", self.lambda2())] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be a finite non-negative number"));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha = {} outside [0, 1]", self.alpha));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 = {} must be positive", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum = {} outside [0, 1)", self.momentum));
        }
        if !(self.poly_power >= 0.0 && self.poly_power.is_finite()) {
            return bad(format!("poly_power = {} must be non-negative", self.poly_power));
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.augment && (self.crop == 0 || !self.crop.is_multiple_of(INPUT_DIVISOR)) {
            return bad(format!("crop {} must be a positive multiple of {INPUT_DIVISOR}", self.crop));
        }
        if !(self.view_noise >= 0.0 && self.view_noise.is_finite()) {
            return bad(format!("view_noise = {} must be non-negative", self.view_noise));
        }
        if let SupLoss::Ohem { keep_threshold } = self.sup_loss {
            if !(0.0..=1.0).contains(&keep_threshold) {
                return bad(format!("OHEM keep threshold {keep_threshold} outside [0, 1]"));
            }
        }
        if self.threads == 0 || self.log_every == 0 {
            return bad("threads and log_every must be at least 1".into());
        }
        Ok(())
    }
}
