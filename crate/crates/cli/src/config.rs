//! Run configuration: defaults, `key = value` config files, and flag
//! overrides, resolved in that order. Unknown file keys are rejected and the
//! fully resolved configuration is echoed for reproducibility.

use std::path::{Path, PathBuf};

use bt2_core::losses::LossConfig;
use bt2_core::train::{DimsConfig, Method, OptimizerChoice, TrainConfig};

use crate::CliError;

/// Everything a training run needs, spanning schedule, loss weights, and
/// embedding shapes. Paths stay optional until validation.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub method: Option<Method>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub old_model: Option<PathBuf>,
    pub new_independent: Option<PathBuf>,
    pub seed: u64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerChoice,
    pub momentum: f64,
    pub hidden: usize,
    pub lambda: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub c_scale: f64,
    pub cls_on_final: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let l = LossConfig::default();
        let d = DimsConfig::default();
        RunConfig {
            method: None,
            data: None,
            out: None,
            old_model: None,
            new_independent: None,
            seed: t.seed,
            lr: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            optimizer: t.optimizer,
            momentum: t.momentum,
            hidden: t.hidden,
            lambda: l.lambda,
            lambda1: l.lambda1,
            lambda2: l.lambda2,
            lambda3: l.lambda3,
            tau: l.tau,
            m: d.m,
            n: d.n,
            d: d.d,
            c_scale: d.c_scale,
            cls_on_final: d.cls_on_final,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("config key '{key}' has invalid value '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Usage(format!(
            "config key '{key}' expects true/false, got '{value}'"
        ))),
    }
}

impl RunConfig {
    /// Applies one `key = value` setting. Unknown keys are rejected.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "method" => {
                self.method =
                    Some(Method::parse(value).map_err(|e| CliError::Usage(e.to_string()))?)
            }
            "data" => self.data = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            "old_model" => self.old_model = Some(PathBuf::from(value)),
            "new_independent" => self.new_independent = Some(PathBuf::from(value)),
            "seed" => self.seed = parse_num(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "optimizer" => {
                self.optimizer =
                    OptimizerChoice::parse(value).map_err(|e| CliError::Usage(e.to_string()))?
            }
            "momentum" => self.momentum = parse_num(key, value)?,
            "hidden" => self.hidden = parse_num(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "lambda1" => self.lambda1 = parse_num(key, value)?,
            "lambda2" => self.lambda2 = parse_num(key, value)?,
            "lambda3" => self.lambda3 = parse_num(key, value)?,
            "tau" => self.tau = parse_num(key, value)?,
            "m" => self.m = parse_num(key, value)?,
            "n" => self.n = parse_num(key, value)?,
            "d" => self.d = parse_num(key, value)?,
            "c_scale" => self.c_scale = parse_num(key, value)?,
            "cls_on_final" => self.cls_on_final = parse_bool(key, value)?,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown config key '{other}'"
                )))
            }
        }
        Ok(())
    }

    /// Loads a plain `key = value` file (UTF-8, `#` comments) on top of the
    /// current values.
    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read config file {}: {e}", path.display()))
        })?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Usage(format!(
                    "config line {} is not 'key = value': '{raw}'",
                    lineno + 1
                )));
            };
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Checks the per-method checkpoint dependencies.
    pub fn validate_dependencies(&self) -> Result<Method, CliError> {
        let method = self.method.ok_or_else(|| {
            CliError::Usage("--method is required (or set method in the config file)".into())
        })?;
        if method.needs_old() && self.old_model.is_none() {
            return Err(CliError::Usage(format!(
                "method '{}' requires --old-model: methods bct/bct-pad/contrast/bt2/upper-bound \
                 train against an old checkpoint",
                method.name()
            )));
        }
        if method.needs_new_independent() && self.new_independent.is_none() {
            return Err(CliError::Usage(format!(
                "method '{}' requires --new-independent: bt2 and upper-bound additionally \
                 consume an independently trained new checkpoint",
                method.name()
            )));
        }
        Ok(method)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            momentum: self.momentum,
            seed: self.seed,
            hidden: self.hidden,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            tau: self.tau,
        }
    }

    pub fn dims_config(&self) -> DimsConfig {
        DimsConfig {
            m: self.m,
            n: self.n,
            d: self.d,
            c_scale: self.c_scale,
            // one constant drives both the block scale and the upper-bound
            // concatenation weight; no method uses both at once
            upper_c: self.c_scale,
            cls_on_final: self.cls_on_final,
        }
    }

    /// `key = value` lines of the fully resolved configuration, fixed order.
    pub fn echo_lines(&self) -> Vec<String> {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "-".into())
        };
        vec![
            format!(
                "method = {}",
                self.method.map(|m| m.name()).unwrap_or("-")
            ),
            format!("data = {}", path(&self.data)),
            format!("out = {}", path(&self.out)),
            format!("old_model = {}", path(&self.old_model)),
            format!("new_independent = {}", path(&self.new_independent)),
            format!("seed = {}", self.seed),
            format!("lr = {}", self.lr),
            format!("epochs = {}", self.epochs),
            format!("batch_size = {}", self.batch_size),
            format!("optimizer = {}", self.optimizer.name()),
            format!("momentum = {}", self.momentum),
            format!("hidden = {}", self.hidden),
            format!("lambda = {}", self.lambda),
            format!("lambda1 = {}", self.lambda1),
            format!("lambda2 = {}", self.lambda2),
            format!("lambda3 = {}", self.lambda3),
            format!("tau = {}", self.tau),
            format!("m = {}", self.m),
            format!("n = {}", self.n),
            format!("d = {}", self.d),
            format!("c_scale = {}", self.c_scale),
            format!("cls_on_final = {}", self.cls_on_final),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let dir = std::env::temp_dir().join("bt2-config-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.conf");
        std::fs::write(&path, "lr = 0.01\nepochs = 3 # short run\n\n# comment\n").unwrap();

        let mut cfg = RunConfig::default();
        cfg.load_file(&path).unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.epochs, 3);
        // a later flag application wins
        cfg.apply("lr", "0.001").unwrap();
        assert_eq!(cfg.lr, 0.001);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(matches!(
            cfg.apply("learning_rate_typo", "1"),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn dependency_rules() {
        let mut cfg = RunConfig::default();
        cfg.apply("method", "bt2").unwrap();
        let err = cfg.validate_dependencies().unwrap_err();
        let CliError::Usage(msg) = err else { panic!() };
        assert!(msg.contains("--old-model"));

        cfg.apply("old_model", "old.btck").unwrap();
        let err = cfg.validate_dependencies().unwrap_err();
        let CliError::Usage(msg) = err else { panic!() };
        assert!(msg.contains("--new-independent"));

        cfg.apply("new_independent", "ind.btck").unwrap();
        assert!(cfg.validate_dependencies().is_ok());
    }
}
