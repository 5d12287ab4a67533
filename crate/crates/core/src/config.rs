//! Run configuration files: INI-style sections of flat `key = value` pairs.
//!
//! ```ini
//! [scenario]
//! m = 10
//! spacing_ratio = 0.5
//! doas_deg = 35,37
//! r = 0.0
//! n_snapshots = 10
//!
//! [run]
//! trials = 1000
//! snr_db = -5:1:20
//! seed = 42
//! methods = rm,urm,urm+2step,rsurm+pnr
//!
//! [single]
//! snr_db = 10
//! seed = 1
//! noiseless = false
//! method = urm+2step
//! ```
//!
//! Omitted keys take the defaults of the ten-sensor, two-source protocol;
//! unknown sections or keys are errors.

use std::collections::HashSet;
use std::path::Path;

use ini::Ini;

use crate::error::{DoaError, Result};
use crate::experiments::{ExperimentConfig, MethodSpec};
use crate::two_step::TwoStepConfig;

/// Settings for a one-shot estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleConfig {
    pub snr_db: f64,
    pub seed: u64,
    pub noiseless: bool,
    pub method: MethodSpec,
}

impl Default for SingleConfig {
    fn default() -> Self {
        Self {
            snr_db: 10.0,
            seed: 1,
            noiseless: false,
            method: "rm".parse().expect("valid method"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub single: SingleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::paper(0.0, snr_range(-5.0, 1.0, 20.0).expect("valid range"), 1000),
            single: SingleConfig::default(),
        }
    }
}

fn invalid(msg: String) -> DoaError {
    DoaError::InvalidConfig(msg)
}

fn parse_value<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| invalid(format!("[{section}] {key}: cannot parse '{value}'")))
}

fn parse_list<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|item| parse_value(section, key, item))
        .collect()
}

/// Inclusive `start:step:stop` grid.
fn snr_range(start: f64, step: f64, stop: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(stop >= start) || !start.is_finite() || !stop.is_finite() {
        return Err(invalid(format!("bad SNR range {start}:{step}:{stop}")));
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    if count > 100_000 {
        return Err(invalid(format!("SNR range {start}:{step}:{stop} is too long")));
    }
    Ok((0..count).map(|i| start + i as f64 * step).collect())
}

fn parse_snr_grid(value: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = value.split(':').collect();
    match parts.as_slice() {
        [start, step, stop] => snr_range(
            parse_value("run", "snr_db", start)?,
            parse_value("run", "snr_db", step)?,
            parse_value("run", "snr_db", stop)?,
        ),
        [_] => parse_list("run", "snr_db", value),
        _ => Err(invalid(format!("[run] snr_db: expected a list or start:step:stop, got '{value}'"))),
    }
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(invalid(format!("[{section}] {key}: expected true or false, got '{other}'"))),
    }
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| invalid(e.to_string()))?;
        let mut config = RunConfig::default();
        let exp = &mut config.experiment;
        let mut gamma_grid = exp.params.two_step.gamma_grid().to_vec();
        let mut fb_order = exp.params.two_step.fb_order;
        let mut seen = HashSet::new();

        for (section, properties) in ini.iter() {
            let section_name = section.unwrap_or("");
            for (key, value) in properties.iter() {
                if !seen.insert((section_name.to_string(), key.to_string())) {
                    return Err(invalid(format!("[{section_name}] {key} is given twice")));
                }
                let s = section_name;
                match (section_name, key) {
                    ("scenario", "m") => exp.scenario.num_sensors = parse_value(s, key, value)?,
                    ("scenario", "spacing_ratio") => exp.scenario.spacing_ratio = parse_value(s, key, value)?,
                    ("scenario", "doas_deg") => exp.scenario.doas_deg = parse_list(s, key, value)?,
                    ("scenario", "r") => exp.scenario.correlation = parse_value(s, key, value)?,
                    ("scenario", "n_snapshots") => exp.scenario.num_snapshots = parse_value(s, key, value)?,
                    ("run", "trials") => exp.trials = parse_value(s, key, value)?,
                    ("run", "snr_db") => exp.snr_grid_db = parse_snr_grid(value)?,
                    ("run", "seed") => exp.base_seed = parse_value(s, key, value)?,
                    ("run", "methods") => exp.methods = parse_list(s, key, value)?,
                    ("run", "gamma_grid") => gamma_grid = parse_list(s, key, value)?,
                    ("run", "fb_order") => fb_order = value.trim().parse()?,
                    ("run", "pnr_iterations") => exp.params.pnr_iterations = parse_value(s, key, value)?,
                    ("run", "pnr_scale") => exp.params.pnr_scale = parse_value(s, key, value)?,
                    ("run", "swap_p") => exp.params.swap_p = parse_value(s, key, value)?,
                    ("run", "swap_q") => exp.params.swap_q = parse_value(s, key, value)?,
                    ("run", "leakage_gamma") => exp.leakage_gamma = value.parse()?,
                    ("single", "snr_db") => config.single.snr_db = parse_value(s, key, value)?,
                    ("single", "seed") => config.single.seed = parse_value(s, key, value)?,
                    ("single", "noiseless") => config.single.noiseless = parse_bool(s, key, value)?,
                    ("single", "method") => config.single.method = value.parse()?,
                    ("scenario" | "run" | "single", _) => {
                        return Err(invalid(format!("unknown key '{key}' in [{section_name}]")));
                    }
                    ("", _) => return Err(invalid(format!("key '{key}' outside any section"))),
                    _ => return Err(invalid(format!("unknown section [{section_name}]"))),
                }
            }
        }
        exp.params.two_step = TwoStepConfig::new(gamma_grid, fb_order)?;
        exp.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Fully resolved configuration; parsing it gives back `self`.
    pub fn to_ini_string(&self) -> String {
        let exp = &self.experiment;
        let mut ini = Ini::new();
        ini.with_section(Some("scenario"))
            .set("m", exp.scenario.num_sensors.to_string())
            .set("spacing_ratio", exp.scenario.spacing_ratio.to_string())
            .set("doas_deg", join(&exp.scenario.doas_deg))
            .set("r", exp.scenario.correlation.to_string())
            .set("n_snapshots", exp.scenario.num_snapshots.to_string());
        ini.with_section(Some("run"))
            .set("trials", exp.trials.to_string())
            .set("snr_db", join(&exp.snr_grid_db))
            .set("seed", exp.base_seed.to_string())
            .set("methods", join(&exp.methods))
            .set("gamma_grid", join(exp.params.two_step.gamma_grid()))
            .set("fb_order", exp.params.two_step.fb_order.to_string())
            .set("pnr_iterations", exp.params.pnr_iterations.to_string())
            .set("pnr_scale", exp.params.pnr_scale.to_string())
            .set("swap_p", exp.params.swap_p.to_string())
            .set("swap_q", exp.params.swap_q.to_string())
            .set("leakage_gamma", exp.leakage_gamma.to_string());
        ini.with_section(Some("single"))
            .set("snr_db", self.single.snr_db.to_string())
            .set("seed", self.single.seed.to_string())
            .set("noiseless", self.single.noiseless.to_string())
            .set("method", self.single.method.to_string());
        let mut out = Vec::new();
        ini.write_to(&mut out).expect("writing to memory");
        String::from_utf8(out).expect("ini output is UTF-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::LeakageGamma;
    use crate::two_step::FbOrder;

    const SAMPLE: &str = "\
[scenario]
m = 10
spacing_ratio = 0.5
doas_deg = 35,37
r = 0.9
n_snapshots = 10

[run]
trials = 200
snr_db = -5:1:20
seed = 42
methods = rm,urm,urm+2step,rsurm+pnr
fb_order = post
leakage_gamma = sml
";

    #[test]
    fn parses_documented_layout() {
        let c = RunConfig::parse(SAMPLE).unwrap();
        let e = &c.experiment;
        assert_eq!(e.scenario.correlation, 0.9);
        assert_eq!(e.trials, 200);
        assert_eq!(e.snr_grid_db.len(), 26);
        assert_eq!(e.snr_grid_db[0], -5.0);
        assert_eq!(*e.snr_grid_db.last().unwrap(), 20.0);
        assert_eq!(join(&e.methods), "rm,urm,urm+2step,rsurm+pnr");
        assert_eq!(e.params.two_step.fb_order, FbOrder::Post);
        assert_eq!(e.leakage_gamma, LeakageGamma::Sml);
        assert_eq!(e.params.two_step.gamma_grid().len(), 11);
    }

    #[test]
    fn fractional_snr_range() {
        let grid = parse_snr_grid("0:0.1:1").unwrap();
        assert_eq!(grid.len(), 11);
        assert!((grid[10] - 1.0).abs() < 1e-12);
        assert_eq!(parse_snr_grid("3, 1.5").unwrap(), vec![3.0, 1.5]);
        assert!(parse_snr_grid("1:0:3").is_err());
        assert!(parse_snr_grid("1:2").is_err());
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        for text in [
            "[scenario]\nspacing = 0.5\n",
            "[runs]\ntrials = 3\n",
            "trials = 3\n",
            "[run]\ntrials = 3\ntrials = 4\n",
            "[run]\ntrials = many\n",
            "[run]\nmethods = rm,music\n",
            "[single]\nnoiseless = maybe\n",
            "[run]\ngamma_grid = 0.5,1\n",
        ] {
            assert!(
                matches!(RunConfig::parse(text), Err(DoaError::InvalidConfig(_)) | Err(DoaError::InvalidGammaGrid(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn serialization_round_trips() {
        let mut c = RunConfig::parse(SAMPLE).unwrap();
        c.experiment.snr_grid_db = parse_snr_grid("-2:0.3:2").unwrap();
        c.single.noiseless = true;
        c.single.method = "rsurm+2step".parse().unwrap();
        let text = c.to_ini_string();
        assert_eq!(RunConfig::parse(&text).unwrap(), c);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_ini_string()).unwrap(), RunConfig::default());
    }

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }
}
