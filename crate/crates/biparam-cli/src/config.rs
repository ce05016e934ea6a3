//! Flat key = value configuration with at most one section level.
//!
//! Every run is fully determined by its config file plus the seed
//! override; the parsed config is echoed into each artifact header.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use biparam::lattice::{default_gamma, LatticeParams};

#[derive(Debug)]
pub struct ConfigError {
    pub line: usize,
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "config line {}, field '{}': {}",
            self.line, self.field, self.message
        )
    }
}

impl std::error::Error for ConfigError {}

/// Parsed configuration: `section.key -> (value, line)`.
#[derive(Debug, Clone, Default)]
pub struct Config {
    values: BTreeMap<String, (String, usize)>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut values = BTreeMap::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') {
                if !line.ends_with(']') {
                    return Err(ConfigError {
                        line: i + 1,
                        field: line.to_string(),
                        message: "unterminated section header".into(),
                    });
                }
                section = line[1..line.len() - 1].trim().to_string();
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError {
                    line: i + 1,
                    field: line.to_string(),
                    message: "expected 'key = value'".into(),
                });
            };
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            values.insert(key, (v.trim().to_string(), i + 1));
        }
        Ok(Config { values })
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            line: 0,
            field: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(|(v, _)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, ConfigError> {
        self.get(key).ok_or_else(|| ConfigError {
            line: 0,
            field: key.to_string(),
            message: "missing required field".into(),
        })
    }

    pub fn get_i64(&self, key: &str, default: i64) -> Result<i64, ConfigError> {
        match self.values.get(key) {
            None => Ok(default),
            Some((v, line)) => v.parse().map_err(|_| ConfigError {
                line: *line,
                field: key.to_string(),
                message: format!("expected integer, got '{v}'"),
            }),
        }
    }

    pub fn get_f64(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        match self.values.get(key) {
            None => Ok(default),
            Some((v, line)) => v.parse().map_err(|_| ConfigError {
                line: *line,
                field: key.to_string(),
                message: format!("expected number, got '{v}'"),
            }),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.values.get(key) {
            None => Ok(default),
            Some((v, line)) => match v.as_str() {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(ConfigError {
                    line: *line,
                    field: key.to_string(),
                    message: format!("expected boolean, got '{v}'"),
                }),
            },
        }
    }

    /// Lattice parameters from the `[lattice]` section.
    pub fn lattice(&self) -> Result<LatticeParams, ConfigError> {
        let n1 = self.get_i64("lattice.n1", 1)? as u32;
        let n2 = self.get_i64("lattice.n2", 1)? as u32;
        let m = self.get_i64("lattice.m", 1)? as i32;
        let l = self.get_i64("lattice.l", 2)? as i32;
        let periodic = self.get_bool("lattice.periodic", true)?;
        let r = self.get_i64("lattice.r", 3)? as u32;
        let delta1 = self.get_f64("lattice.delta1", 1.0)?;
        let delta2 = self.get_f64("lattice.delta2", 1.0)?;
        let theta = self.get_f64("lattice.theta", 0.5)?;
        let mut p = LatticeParams::new(n1, n2, m, l, periodic, r).map_err(|e| ConfigError {
            line: 0,
            field: "lattice".into(),
            message: e.to_string(),
        })?;
        p.delta1 = delta1;
        p.delta2 = delta2;
        p.theta = theta;
        p.gamma1 = self.get_f64("lattice.gamma1", default_gamma(n1, delta1))?;
        p.gamma2 = self.get_f64("lattice.gamma2", default_gamma(n2, delta2))?;
        p.validate().map_err(|e| ConfigError {
            line: 0,
            field: "lattice".into(),
            message: e.to_string(),
        })?;
        Ok(p)
    }

    /// Deterministic echo of every key for artifact headers.
    pub fn echo(&self) -> Vec<(String, String)> {
        self.values
            .iter()
            .map(|(k, (v, _))| (k.clone(), v.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_types() {
        let c = Config::parse(
            "# comment\n[lattice]\nm = 1\nl = 2\nperiodic = true\n[run]\nseed = 42\n",
        )
        .unwrap();
        assert_eq!(c.get("lattice.m"), Some("1"));
        assert_eq!(c.get_i64("run.seed", 0).unwrap(), 42);
        let p = c.lattice().unwrap();
        assert_eq!(p.m_exp, 1);
        assert!(p.periodic);
    }

    #[test]
    fn missing_field_is_named() {
        let c = Config::parse("[a]\nx = 1\n").unwrap();
        let err = c.require("a.y").unwrap_err();
        assert!(err.field.contains("a.y"));
    }

    #[test]
    fn bad_value_reports_line() {
        let c = Config::parse("[a]\nx = notanumber\n").unwrap();
        let err = c.get_i64("a.x", 0).unwrap_err();
        assert_eq!(err.line, 2);
    }
}
