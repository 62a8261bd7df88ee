//! Flat `key=value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use branch_distill::data::{self, DatasetSpec};
use branch_distill::losses::{KdPairing, LossWeights};
use branch_distill::nn::ArchSpec;
use branch_distill::train::{Precision, TrainConfig};
use branch_distill::{Error, Result};

/// Every accepted key with its default; `None` means unset.
pub const KEYS: &[(&str, Option<&str>)] = &[
    ("arch", Some("tiny-resnet")),
    ("branches", Some("2")),
    ("classes", None),
    ("dataset", Some("cifar100")),
    ("data_root", None),
    ("epochs", Some("200")),
    ("batch_size", Some("128")),
    ("lr0", Some("0.1")),
    ("momentum", Some("0.9")),
    ("weight_decay", Some("0.0005")),
    ("alpha", Some("0.3")),
    ("beta", Some("0.03")),
    ("gamma", Some("0.1")),
    ("temperature", Some("3")),
    ("mu_r", Some("0.5")),
    ("lambda_gp", Some("10")),
    ("lambda1", Some("0.3")),
    ("lambda2", Some("0.03")),
    ("lambda3", Some("0.1")),
    ("critic_steps", Some("1")),
    ("critic_lr_scale", Some("0.1")),
    ("seed", None),
    ("eval_every", Some("1")),
    ("checkpoint_dir", Some("runs/latest")),
    ("kl_detach_target", Some("false")),
    ("precision", Some("f64")),
    ("train_limit", None),
    ("test_limit", None),
    ("val_fraction", Some("0")),
    ("kd_pairing", Some("all")),
    ("strict", Some("false")),
    ("teacher", None),
    ("seeds", None),
];

/// Raw key/value settings after merging file and flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

fn known(key: &str) -> Result<()> {
    if KEYS.iter().any(|(k, _)| *k == key) {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown key `{key}`")))
    }
}

impl Settings {
    /// Parses a flat `key=value` document; blank lines and `#` comments are
    /// skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
            s.set(k.trim(), v.trim())?;
        }
        Ok(s)
    }

    /// Reads a `key=value` file, or the `config` object of a run manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        if text.trim_start().starts_with('{') {
            let v: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::Parse { path: path.to_path_buf(), offset: 0, msg: e.to_string() })?;
            let obj = v
                .get("config")
                .and_then(|c| c.as_object())
                .ok_or_else(|| Error::Config(format!("{} has no config object", path.display())))?;
            let mut s = Settings::default();
            for (k, v) in obj {
                let v = v.as_str().ok_or_else(|| Error::Config(format!("manifest value for `{k}` is not a string")))?;
                s.set(k, v)?;
            }
            return Ok(s);
        }
        Settings::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        known(key)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies `--key value` and `--key=value` overrides.
    pub fn apply_flags(&mut self, flags: &[String]) -> Result<()> {
        let mut it = flags.iter();
        while let Some(flag) = it.next() {
            let body = flag.strip_prefix("--").ok_or_else(|| Error::Config(format!("expected --key, got `{flag}`")))?;
            let (key, value) = match body.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it.next().ok_or_else(|| Error::Config(format!("flag --{body} needs a value")))?;
                    (body.to_string(), v.clone())
                }
            };
            self.set(&key.replace('-', "_"), &value)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).or_else(|| KEYS.iter().find(|(k, _)| *k == key).and_then(|(_, d)| *d))
    }

    /// Every key that has a value, defaults included.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        KEYS.iter().filter_map(|(k, _)| self.get(k).map(|v| (k.to_string(), v.to_string()))).collect()
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| v.parse::<T>().map_err(|_| Error::Config(format!("cannot parse `{v}` for key `{key}`"))))
            .transpose()
    }

    fn required<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.parsed(key)?.ok_or_else(|| Error::Config(format!("key `{key}` is required")))
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") | None => Ok(false),
            Some(v) => Err(Error::Config(format!("cannot parse `{v}` for key `{key}` as a boolean"))),
        }
    }

    pub fn teacher(&self) -> Option<PathBuf> {
        self.get("teacher").map(PathBuf::from)
    }

    /// Seeds for an ablation: `seeds` if set, else `seed`.
    pub fn seeds(&self) -> Result<Vec<u64>> {
        match self.get("seeds") {
            Some(list) => list
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("cannot parse seed `{s}` in `seeds`"))))
                .collect(),
            None => Ok(vec![self.required("seed")?]),
        }
    }

    /// Builds and validates the training configuration.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let dataset: DatasetSpec = self.required("dataset")?;
        let in_shape = match &dataset {
            DatasetSpec::Mnist | DatasetSpec::FashionMnist => [1, 28, 28],
            DatasetSpec::Cifar10 | DatasetSpec::Cifar100 => [3, 32, 32],
            DatasetSpec::Synthetic(s) => s.shape,
        };
        let classes = match self.parsed::<usize>("classes")? {
            Some(c) => c,
            None if dataset == DatasetSpec::Cifar100 => 100,
            None => 10,
        };
        let arch_name: String = self.required("arch")?;
        let arch = if arch_name.starts_with("resnet ") {
            arch_name.parse()?
        } else {
            ArchSpec::preset(&arch_name, in_shape, classes, self.required("branches")?)?
        };
        let weights = LossWeights {
            alpha: self.required("alpha")?,
            beta: self.required("beta")?,
            gamma: self.required("gamma")?,
            temperature: self.required("temperature")?,
            mu_r: self.required("mu_r")?,
            lambda_gp: self.required("lambda_gp")?,
            lambda1: self.required("lambda1")?,
            lambda2: self.required("lambda2")?,
            lambda3: self.required("lambda3")?,
        };
        let seed = match self.parsed("seed")? {
            Some(s) => s,
            None => self.seeds()?[0],
        };
        let mut cfg = TrainConfig::new(arch, dataset, seed);
        cfg.data_root = data::data_root(self.get("data_root").map(Path::new));
        cfg.epochs = self.required("epochs")?;
        cfg.batch_size = self.required("batch_size")?;
        cfg.lr0 = self.required("lr0")?;
        cfg.momentum = self.required("momentum")?;
        cfg.weight_decay = self.required("weight_decay")?;
        cfg.weights = weights;
        cfg.critic_steps = self.required("critic_steps")?;
        cfg.critic_lr_scale = self.required("critic_lr_scale")?;
        cfg.eval_every = self.required("eval_every")?;
        cfg.checkpoint_dir = self.parsed("checkpoint_dir")?;
        cfg.kl_detach_target = self.flag("kl_detach_target")?;
        cfg.precision = self.required::<String>("precision")?.parse::<Precision>()?;
        cfg.train_limit = self.parsed("train_limit")?;
        cfg.test_limit = self.parsed("test_limit")?;
        cfg.val_fraction = self.required("val_fraction")?;
        cfg.kd_pairing = match self.get("kd_pairing") {
            Some("all") | None => KdPairing::All,
            Some("matched") => KdPairing::Matched,
            Some(v) => return Err(Error::Config(format!("kd_pairing must be all or matched, got `{v}`"))),
        };
        cfg.strict = self.flag("strict")?;
        cfg.validate()?;
        Ok(cfg)
    }
}
