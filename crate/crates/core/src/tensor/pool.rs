use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sharpness used for log-sum-exp pooling unless configured otherwise.
pub const DEFAULT_LSE_SHARPNESS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Avg,
    Max,
    Lse,
}

impl std::str::FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "avg" => Ok(PoolKind::Avg),
            "max" => Ok(PoolKind::Max),
            "lse" => Ok(PoolKind::Lse),
            other => Err(Error::Config(format!("unknown pooling kind `{other}`"))),
        }
    }
}

/// Global spatial pooling applied per channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolingConfig {
    pub kind: PoolKind,
    /// `r` in `(1/r)·log(mean(exp(r·x)))`; only read for [`PoolKind::Lse`].
    pub lse_sharpness: f64,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        PoolingConfig::avg()
    }
}

impl PoolingConfig {
    pub fn avg() -> Self {
        PoolingConfig {
            kind: PoolKind::Avg,
            lse_sharpness: DEFAULT_LSE_SHARPNESS,
        }
    }

    pub fn max() -> Self {
        PoolingConfig {
            kind: PoolKind::Max,
            lse_sharpness: DEFAULT_LSE_SHARPNESS,
        }
    }

    pub fn lse(sharpness: f64) -> Result<Self> {
        let cfg = PoolingConfig {
            kind: PoolKind::Lse,
            lse_sharpness: sharpness,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == PoolKind::Lse
            && !(self.lse_sharpness > 0.0 && self.lse_sharpness.is_finite())
        {
            return Err(Error::Config(format!(
                "LSE sharpness must be positive and finite, got {}",
                self.lse_sharpness
            )));
        }
        Ok(())
    }
}

/// Pools one channel's values. Returns the pooled value and the index of the
/// first maximum (used by the MAX backward rule).
pub fn pool_values(values: &[f64], cfg: &PoolingConfig) -> (f64, usize) {
    let (argmax, max) =
        values
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
    let n = values.len() as f64;
    let pooled = match cfg.kind {
        PoolKind::Avg => values.iter().sum::<f64>() / n,
        PoolKind::Max => max,
        PoolKind::Lse => {
            let r = cfg.lse_sharpness;
            let s: f64 = values.iter().map(|&v| (r * (v - max)).exp()).sum();
            max + (s / n).ln() / r
        }
    };
    (pooled, argmax)
}
