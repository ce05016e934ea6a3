//! Machine-readable artifacts: JSON and CSV writers with deterministic
//! payloads, plus the grid dump format for step functions.
//!
//! Every number prints with 17 significant digits. Payload files carry no
//! timestamps; run metadata goes to a sidecar.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use biparam::step::{AxisSet, StepFunction};
use biparam::LatticeParams;

use crate::config::Config;

/// 17 significant digits, stable across runs.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub struct OutDir {
    pub dir: PathBuf,
}

impl OutDir {
    pub fn new(dir: &Path) -> std::io::Result<OutDir> {
        fs::create_dir_all(dir)?;
        Ok(OutDir {
            dir: dir.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&self, name: &str, payload: &str) -> std::io::Result<PathBuf> {
        let p = self.path(name);
        let mut f = fs::File::create(&p)?;
        f.write_all(payload.as_bytes())?;
        Ok(p)
    }

    /// Run metadata sidecar: everything volatile lives here, never in
    /// payloads.
    pub fn sidecar(&self, command: &str, seed: u64) -> std::io::Result<()> {
        let body = format!(
            "command = {command}\nseed = {seed}\nversion = {}\n",
            env!("CARGO_PKG_VERSION")
        );
        self.write("run_info.txt", &body)?;
        Ok(())
    }
}

/// Config echo as a JSON object, sorted by key.
pub fn config_json(cfg: &Config) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for (k, v) in cfg.echo() {
        map.insert(k, serde_json::Value::String(v));
    }
    serde_json::Value::Object(map)
}

pub fn json_f64(v: f64) -> serde_json::Value {
    serde_json::Value::String(fmt_f64(v))
}

/// CSV writer with a fixed header; rows print through `fmt_f64`.
pub struct Csv {
    out: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Csv {
        Csv {
            out: format!("{}\n", header.join(",")),
        }
    }

    pub fn row(&mut self, cells: &[String]) {
        self.out.push_str(&cells.join(","));
        self.out.push('\n');
    }

    pub fn finish(self) -> String {
        self.out
    }
}

/// Grid dump of a step function: header lines with the lattice shape,
/// then row-major cell values.
pub fn dump_step_function(f: &StepFunction) -> String {
    let axes = match f.axes {
        AxisSet::One => "1",
        AxisSet::Two => "2",
        AxisSet::Both => "both",
    };
    let p = &f.params;
    let mut out = format!(
        "# axes={axes} n1={} n2={} m={} l={} periodic={}\n",
        p.n1, p.n2, p.m_exp, p.l_exp, p.periodic
    );
    for v in &f.values {
        out.push_str(&fmt_f64(*v));
        out.push('\n');
    }
    out
}

/// Inverse of `dump_step_function` against explicit parameters.
pub fn load_step_function(
    params: &LatticeParams,
    axes: AxisSet,
    text: &str,
) -> Result<StepFunction, String> {
    let mut f = StepFunction::zero(params, axes);
    let mut idx = 0usize;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if idx >= f.values.len() {
            return Err("too many values in grid dump".into());
        }
        f.values[idx] = line.parse().map_err(|e| format!("bad value '{line}': {e}"))?;
        idx += 1;
    }
    if idx != f.values.len() {
        return Err(format!(
            "grid dump has {idx} values, lattice needs {}",
            f.values.len()
        ));
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_function_dump_round_trip() {
        let p = LatticeParams::new(1, 1, 1, 2, true, 2).unwrap();
        let mut f = StepFunction::zero(&p, AxisSet::Both);
        f.values
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = i as f64 * 0.125 - 3.0);
        let dump = dump_step_function(&f);
        let back = load_step_function(&p, AxisSet::Both, &dump).unwrap();
        assert_eq!(f.values, back.values);
    }

    #[test]
    fn f64_formatting_has_17_digits() {
        let s = fmt_f64(1.0 / 3.0);
        assert!(s.starts_with("3.3333333333333331"), "{s}");
    }
}
