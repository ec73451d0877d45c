//! Experiment hyperparameters and the flat `key = value` config format.
//!
//! Lists are comma-separated. Blank lines and `#` comments are ignored.
//! Keys not present in a file are taken from [`paper_default_profile`].

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Every scalar knob of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    /// Cross-modal triplet margin.
    pub m_cm: f64,
    /// Sketch intra-modal triplet margin.
    pub m_im_s: f64,
    /// Photo intra-modal triplet margin.
    pub m_im_p: f64,
    /// Softmax temperature of the neighbour similarity distributions.
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub lambda5: f64,
    pub lambda6: f64,
    /// EMA decay.
    pub beta: f64,
    /// Neighbour count for distillation.
    pub k: usize,
    pub levels: usize,
    pub patch_strides: Vec<usize>,
    pub channels: Vec<usize>,
    pub heads: Vec<usize>,
    pub sr_ratios: Vec<usize>,
    pub d: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub image_size: usize,
}

/// Canonical key order of the config file.
pub const CONFIG_KEYS: [&str; 24] = [
    "m_cm",
    "m_im_s",
    "m_im_p",
    "tau",
    "lambda1",
    "lambda2",
    "lambda3",
    "lambda4",
    "lambda5",
    "lambda6",
    "beta",
    "k",
    "levels",
    "patch_strides",
    "channels",
    "heads",
    "sr_ratios",
    "d",
    "lr",
    "weight_decay",
    "batch_size",
    "epochs",
    "seed",
    "image_size",
];

/// Full-scale settings: PVT-Large widths, 224 px input.
pub fn paper_default_profile() -> Hyperparameters {
    Hyperparameters {
        m_cm: 0.5,
        m_im_s: 0.2,
        m_im_p: 0.3,
        tau: 0.01,
        lambda1: 0.8,
        lambda2: 0.2,
        lambda3: 0.4,
        lambda4: 0.4,
        lambda5: 0.7,
        lambda6: 0.5,
        beta: 0.999,
        k: 5,
        levels: 4,
        patch_strides: vec![4, 2, 2, 2],
        channels: vec![64, 128, 320, 512],
        heads: vec![1, 2, 5, 8],
        sr_ratios: vec![8, 4, 2, 1],
        d: 512,
        lr: 1e-3,
        weight_decay: 5e-2,
        batch_size: 16,
        epochs: 200,
        seed: 0,
        image_size: 224,
    }
}

/// Desk-scale settings: 32 px input, three narrow levels.
pub fn desk_profile() -> Hyperparameters {
    Hyperparameters {
        levels: 3,
        patch_strides: vec![4, 2, 2],
        channels: vec![8, 16, 16],
        heads: vec![1, 2, 2],
        sr_ratios: vec![4, 2, 1],
        d: 16,
        image_size: 32,
        ..paper_default_profile()
    }
}

/// Two-level 8 px model used by gradient checks.
pub fn tiny_profile() -> Hyperparameters {
    Hyperparameters {
        k: 2,
        levels: 2,
        patch_strides: vec![2, 2],
        channels: vec![4, 8],
        heads: vec![1, 2],
        sr_ratios: vec![2, 1],
        d: 8,
        batch_size: 2,
        epochs: 1,
        image_size: 8,
        ..desk_profile()
    }
}

impl Default for Hyperparameters {
    fn default() -> Self {
        paper_default_profile()
    }
}

impl Hyperparameters {
    /// Check every invariant; the first violation is reported by field name.
    pub fn validate(&self) -> Result<()> {
        let non_negative = [
            ("m_cm", self.m_cm),
            ("m_im_s", self.m_im_s),
            ("m_im_p", self.m_im_p),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
            ("lambda5", self.lambda5),
            ("lambda6", self.lambda6),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in [("tau", self.tau), ("lr", self.lr)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("must be > 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::invalid("beta", format!("must lie in [0, 1), got {}", self.beta)));
        }
        for (name, v) in [
            ("k", self.k),
            ("levels", self.levels),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("image_size", self.image_size),
            ("d", self.d),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be >= 1"));
            }
        }
        for (name, list) in [
            ("patch_strides", &self.patch_strides),
            ("channels", &self.channels),
            ("heads", &self.heads),
            ("sr_ratios", &self.sr_ratios),
        ] {
            if list.len() != self.levels {
                return Err(Error::invalid(
                    name,
                    format!("has {} entries but levels = {}", list.len(), self.levels),
                ));
            }
            if list.contains(&0) {
                return Err(Error::invalid(name, "entries must be >= 1"));
            }
        }
        let total: usize = self.patch_strides.iter().product();
        if self.image_size % total != 0 {
            return Err(Error::invalid(
                "image_size",
                format!(
                    "{} is not divisible by the stride product {total}",
                    self.image_size
                ),
            ));
        }
        if self.channels.last() != Some(&self.d) {
            return Err(Error::invalid(
                "channels",
                format!("last entry must equal d = {}", self.d),
            ));
        }
        for (l, (&c, &h)) in self.channels.iter().zip(&self.heads).enumerate() {
            if c % h != 0 {
                return Err(Error::invalid(
                    "heads",
                    format!("level {} width {c} not divisible by {h} heads", l + 1),
                ));
            }
        }
        for (l, side) in self.map_sides().into_iter().enumerate() {
            let sr = self.sr_ratios[l];
            if side % sr != 0 {
                return Err(Error::invalid(
                    "sr_ratios",
                    format!("level {} map side {side} not divisible by {sr}", l + 1),
                ));
            }
        }
        Ok(())
    }

    /// Feature-map side after each level.
    pub fn map_sides(&self) -> Vec<usize> {
        let mut side = self.image_size;
        self.patch_strides
            .iter()
            .map(|s| {
                side /= s;
                side
            })
            .collect()
    }

    pub fn to_config_string(&self) -> String {
        fn list(v: &[usize]) -> String {
            v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
        }
        let mut s = String::new();
        let _ = writeln!(s, "m_cm = {}", self.m_cm);
        let _ = writeln!(s, "m_im_s = {}", self.m_im_s);
        let _ = writeln!(s, "m_im_p = {}", self.m_im_p);
        let _ = writeln!(s, "tau = {}", self.tau);
        let _ = writeln!(s, "lambda1 = {}", self.lambda1);
        let _ = writeln!(s, "lambda2 = {}", self.lambda2);
        let _ = writeln!(s, "lambda3 = {}", self.lambda3);
        let _ = writeln!(s, "lambda4 = {}", self.lambda4);
        let _ = writeln!(s, "lambda5 = {}", self.lambda5);
        let _ = writeln!(s, "lambda6 = {}", self.lambda6);
        let _ = writeln!(s, "beta = {}", self.beta);
        let _ = writeln!(s, "k = {}", self.k);
        let _ = writeln!(s, "levels = {}", self.levels);
        let _ = writeln!(s, "patch_strides = {}", list(&self.patch_strides));
        let _ = writeln!(s, "channels = {}", list(&self.channels));
        let _ = writeln!(s, "heads = {}", list(&self.heads));
        let _ = writeln!(s, "sr_ratios = {}", list(&self.sr_ratios));
        let _ = writeln!(s, "d = {}", self.d);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "image_size = {}", self.image_size);
        s
    }

    /// Parse a config text on top of the full-scale default profile and validate it.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut hp = paper_default_profile();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            hp.set(key.trim(), value.trim(), line_no)?;
        }
        hp.validate()?;
        Ok(hp)
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let float = |v: &str| -> Result<f64> {
            v.parse::<f64>().map_err(|e| Error::Parse {
                line,
                msg: format!("`{key}`: {e}"),
            })
        };
        let int = |v: &str| -> Result<usize> {
            v.parse::<usize>().map_err(|e| Error::Parse {
                line,
                msg: format!("`{key}`: {e}"),
            })
        };
        let ints = |v: &str| -> Result<Vec<usize>> {
            v.split(',').map(|p| int(p.trim())).collect()
        };
        match key {
            "m_cm" => self.m_cm = float(value)?,
            "m_im_s" => self.m_im_s = float(value)?,
            "m_im_p" => self.m_im_p = float(value)?,
            "tau" => self.tau = float(value)?,
            "lambda1" => self.lambda1 = float(value)?,
            "lambda2" => self.lambda2 = float(value)?,
            "lambda3" => self.lambda3 = float(value)?,
            "lambda4" => self.lambda4 = float(value)?,
            "lambda5" => self.lambda5 = float(value)?,
            "lambda6" => self.lambda6 = float(value)?,
            "beta" => self.beta = float(value)?,
            "k" => self.k = int(value)?,
            "levels" => self.levels = int(value)?,
            "patch_strides" => self.patch_strides = ints(value)?,
            "channels" => self.channels = ints(value)?,
            "heads" => self.heads = ints(value)?,
            "sr_ratios" => self.sr_ratios = ints(value)?,
            "d" => self.d = int(value)?,
            "lr" => self.lr = float(value)?,
            "weight_decay" => self.weight_decay = float(value)?,
            "batch_size" => self.batch_size = int(value)?,
            "epochs" => self.epochs = int(value)?,
            "seed" => {
                self.seed = value.parse::<u64>().map_err(|e| Error::Parse {
                    line,
                    msg: format!("`seed`: {e}"),
                })?
            }
            "image_size" => self.image_size = int(value)?,
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("unknown key `{other}`"),
                })
            }
        }
        Ok(())
    }

    /// Short stable digest of the canonical serialisation.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.to_config_string().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_config_string()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_config(path: &Path) -> Result<Hyperparameters> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Hyperparameters::from_config_str(&text)
}
