use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("thresholds must satisfy 0 <= lo < single_threshold < hi <= 1 (lo={lo}, single_threshold={single}, hi={hi})")]
    Thresholds { lo: f64, single: f64, hi: f64 },
    #[error("{0} must be at least 1")]
    Zero(&'static str),
    #[error("bad config file: {0}")]
    Parse(String),
}

/// Tunables of a pipeline run. The defaults are the reference constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Prefilter window and reverse-infilling candidate count.
    #[serde(alias = "N")]
    pub window: usize,
    /// Prefilter acceptance threshold (p > hi is valid).
    pub hi: f64,
    /// Prefilter rejection threshold (p < lo is invalid).
    pub lo: f64,
    /// Single-instruction decision threshold (p >= threshold is valid).
    pub single_threshold: f64,
    /// Related instructions gathered as context around queried ones.
    pub bfs_limit: usize,
    /// Requests per classifier call.
    #[serde(alias = "M")]
    pub batch_size: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            window: 16,
            hi: 0.95,
            lo: 0.05,
            single_threshold: 0.5,
            bfs_limit: crate::context::DEFAULT_CONTEXT_LIMIT,
            batch_size: crate::classify::DEFAULT_BATCH_SIZE,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let ok = 0.0 <= self.lo
            && self.lo < self.single_threshold
            && self.single_threshold < self.hi
            && self.hi <= 1.0;
        if !ok {
            return Err(ConfigError::Thresholds {
                lo: self.lo,
                single: self.single_threshold,
                hi: self.hi,
            });
        }
        for (name, v) in [
            ("window", self.window),
            ("bfs_limit", self.bfs_limit),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(ConfigError::Zero(name));
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines; missing keys keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain struct serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = PipelineConfig::default();
        assert_eq!(
            (
                c.window,
                c.hi,
                c.lo,
                c.single_threshold,
                c.bfs_limit,
                c.batch_size
            ),
            (16, 0.95, 0.05, 0.5, 32, 32)
        );
        c.validate().unwrap();
    }

    #[test]
    fn parses_partial_files() {
        let c = PipelineConfig::from_toml("M = 1\nhi = 0.9\n").unwrap();
        assert_eq!(c.batch_size, 1);
        assert_eq!(c.hi, 0.9);
        assert_eq!(c.window, 16);
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(
            PipelineConfig::from_toml("lo = 0.6"),
            Err(ConfigError::Thresholds { .. })
        ));
        assert_eq!(
            PipelineConfig::from_toml("window = 0"),
            Err(ConfigError::Zero("window"))
        );
        assert!(matches!(
            PipelineConfig::from_toml("colour = 3"),
            Err(ConfigError::Parse(_))
        ));
    }
}
