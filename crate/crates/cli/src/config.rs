//! Flat experiment configuration: defaults, flag overlay, file overlay, validation.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Project,
    Uncross,
    Energy,
    RetractionDemo,
    ClassVerify,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Experiment::Project => "project",
            Experiment::Uncross => "uncross",
            Experiment::Energy => "energy",
            Experiment::RetractionDemo => "retraction-demo",
            Experiment::ClassVerify => "class-verify",
        };
        f.write_str(s)
    }
}

/// Every knob of every experiment; unused keys are ignored by the experiment that does not need them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub target: String,
    pub m: usize,
    pub l: usize,
    pub s: f64,
    pub p: f64,
    pub eta: Vec<f64>,
    pub mu: Vec<f64>,
    pub samples: usize,
    pub shifts: usize,
    pub per_band: usize,
    pub seed: u64,
    pub out: PathBuf,
    /// `energy` and `class-verify`: radial, vortex, sign or rigid.
    pub field: String,
    /// `energy`: cube or ball.
    pub domain: String,
    /// `energy`: mc or grid.
    pub estimator: String,
    /// `class-verify`: rig, cros, uncr or smooth.
    pub class: String,
    /// Keep running after a failed class check and report it instead.
    pub keep_going: bool,
}

impl ExperimentConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        let mut c = Self {
            experiment,
            target: "sphere:1".into(),
            m: 2,
            l: 1,
            s: 1.0,
            p: 1.5,
            eta: vec![0.2, 0.1, 0.05],
            mu: vec![0.4, 0.2, 0.1, 0.05],
            samples: 40_000,
            shifts: 32,
            per_band: 1000,
            seed: 42,
            out: PathBuf::from("out"),
            field: "radial".into(),
            domain: "ball".into(),
            estimator: "mc".into(),
            class: "rig".into(),
            keep_going: false,
        };
        match experiment {
            Experiment::Uncross => {
                c.m = 3;
                c.eta = vec![0.5];
            }
            Experiment::RetractionDemo => c.m = 3,
            Experiment::ClassVerify => {
                c.m = 3;
                c.eta = vec![0.5];
                c.field = "rigid".into();
                c.mu = vec![];
            }
            _ => {}
        }
        c
    }

    /// Overwrites fields with the keys present in `v`; unknown keys and type errors name their path.
    pub fn overlay(&mut self, v: &serde_json::Value) -> Result<(), SchemaError> {
        let obj = v.as_object().ok_or_else(|| SchemaError::new("$", "config must be a JSON object"))?;
        let mut merged = serde_json::to_value(&*self).expect("config serializes");
        for (k, val) in obj {
            let map = merged.as_object_mut().expect("object");
            if !map.contains_key(k) {
                return Err(SchemaError::new(k, "unknown field"));
            }
            map.insert(k.clone(), val.clone());
            if let Err(e) = serde_json::from_value::<ExperimentConfig>(merged.clone()) {
                let bad = val.as_array().and_then(|a| a.iter().position(|x| !x.is_number()));
                let path = bad.map_or_else(|| k.clone(), |i| format!("{k}[{i}]"));
                return Err(SchemaError::new(&path, &e.to_string()));
            }
        }
        *self = serde_json::from_value(merged).map_err(|e| SchemaError::new("$", &e.to_string()))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        if !(self.s > 0.0) {
            return Err(SchemaError::new("s", "must satisfy s > 0"));
        }
        if !(self.p >= 1.0) {
            return Err(SchemaError::new("p", "must satisfy p >= 1"));
        }
        if self.samples < 2 {
            return Err(SchemaError::new("samples", "must be at least 2"));
        }
        for (i, &e) in self.eta.iter().enumerate() {
            if !(e > 0.0 && e <= 1.0) {
                return Err(SchemaError::new(&format!("eta[{i}]"), &format!("{e} violates 0 < eta <= 1")));
            }
        }
        for (i, &mu) in self.mu.iter().enumerate() {
            if !(mu > 0.0 && mu < 0.5) {
                return Err(SchemaError::new(&format!("mu[{i}]"), &format!("{mu} violates 0 < mu < 1/2")));
            }
        }
        sobomap_core::targets::Target::parse(&self.target).map_err(|e| SchemaError::new("target", &e.to_string()))?;
        let need_eta = matches!(self.experiment, Experiment::Project | Experiment::Uncross | Experiment::ClassVerify);
        if need_eta && self.eta.is_empty() {
            return Err(SchemaError::new("eta", "must not be empty"));
        }
        match self.experiment {
            Experiment::Uncross => {
                if self.m != 3 {
                    return Err(SchemaError::new("m", "uncross runs in dimension 3"));
                }
                if self.l > 1 {
                    return Err(SchemaError::new("l", "uncross supports l = 0 (planes) and l = 1 (lines)"));
                }
                if self.mu.is_empty() {
                    return Err(SchemaError::new("mu", "must not be empty"));
                }
            }
            Experiment::Project | Experiment::Energy if !(1..=3).contains(&self.m) => {
                return Err(SchemaError::new("m", "must be 1, 2 or 3"));
            }
            _ => {}
        }
        one_of("field", &self.field, &["radial", "vortex", "sign", "rigid"])?;
        one_of("domain", &self.domain, &["cube", "ball"])?;
        one_of("estimator", &self.estimator, &["mc", "grid"])?;
        one_of("class", &self.class, &["rig", "cros", "uncr", "smooth"])?;
        Ok(())
    }
}

fn one_of(path: &str, v: &str, allowed: &[&str]) -> Result<(), SchemaError> {
    if allowed.contains(&v) {
        Ok(())
    } else {
        Err(SchemaError::new(path, &format!("{v:?} is not one of {}", allowed.join(", "))))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchemaError {
    pub path: String,
    pub message: String,
}

impl SchemaError {
    pub fn new(path: &str, message: &str) -> Self {
        Self { path: path.into(), message: message.into() }
    }
}

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error at {}: {}", self.path, self.message)
    }
}

impl std::error::Error for SchemaError {}
