//! Training configuration: a line-based UTF-8 `key=value` format with `#`
//! comments. Unknown keys are errors. `render` emits a canonical form (fixed
//! key order) that is embedded into checkpoints and must stay byte-stable
//! for reproducibility.

use std::path::{Path, PathBuf};

use crate::backbone::BackboneConfig;
use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::model::{BranchSet, ModelConfig};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub backbone_widths: Vec<usize>,
    pub backbone_strides: Vec<usize>,
    pub c_self: usize,
    pub c_m: usize,
    pub squeeze: usize,
    pub margin: f64,
    pub smoothing: f64,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub decay_epochs: Vec<usize>,
    pub epochs: usize,
    pub p: usize,
    pub k: usize,
    /// Dataset passes folded into one epoch. The reference protocol assumes
    /// a pretrained backbone; training from scratch on a desk-scale set
    /// needs a few passes per epoch to converge inside the same epoch
    /// count.
    pub passes_per_epoch: usize,
    pub branches: BranchSet,
    /// Fusion weights for (global, self, mutual).
    pub fuse_weights: [f64; 3],
    pub seed: u64,
    pub pad: usize,
    pub flip_prob: f64,
    /// When set, load this DYRD file instead of generating data.
    pub dataset_path: Option<PathBuf>,
    pub num_ids: usize,
    pub imgs_per_id: usize,
    pub num_cams: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    /// Synthetic data seed; defaults to `seed` unless given explicitly.
    pub data_seed: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            backbone_widths: vec![16, 32, 64],
            backbone_strides: vec![2, 2, 2],
            c_self: 32,
            c_m: 16,
            squeeze: 4,
            margin: 0.3,
            smoothing: 0.1,
            base_lr: 3.5e-4,
            lr_decay: 0.1,
            decay_epochs: vec![10, 20],
            epochs: 30,
            p: 4,
            k: 4,
            passes_per_epoch: 3,
            branches: BranchSet::all(),
            fuse_weights: [1.0, 1.0, 1.0],
            seed: 0,
            pad: 2,
            flip_prob: 0.5,
            dataset_path: None,
            num_ids: 8,
            imgs_per_id: 20,
            num_cams: 3,
            height: 32,
            width: 16,
            noise: 0.15,
            data_seed: None,
        }
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::ConfigInvalid(format!(
                    "line {}: expected key=value, got '{raw}'",
                    lineno + 1
                )));
            };
            cfg.apply(key.trim(), value.trim(), lineno + 1)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn apply(&mut self, key: &str, value: &str, lineno: usize) -> Result<()> {
        let bad = |what: &str| {
            Error::ConfigInvalid(format!("line {lineno}: cannot parse {what} from '{value}'"))
        };
        match key {
            "backbone_widths" => self.backbone_widths = parse_usize_list(value).ok_or_else(|| bad(key))?,
            "backbone_strides" => self.backbone_strides = parse_usize_list(value).ok_or_else(|| bad(key))?,
            "c_self" => self.c_self = value.parse().map_err(|_| bad(key))?,
            "c_m" => self.c_m = value.parse().map_err(|_| bad(key))?,
            "squeeze" => self.squeeze = value.parse().map_err(|_| bad(key))?,
            "margin" => self.margin = value.parse().map_err(|_| bad(key))?,
            "smoothing" => self.smoothing = value.parse().map_err(|_| bad(key))?,
            "base_lr" => self.base_lr = value.parse().map_err(|_| bad(key))?,
            "lr_decay" => self.lr_decay = value.parse().map_err(|_| bad(key))?,
            "decay_epochs" => self.decay_epochs = parse_usize_list(value).ok_or_else(|| bad(key))?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad(key))?,
            "p" => self.p = value.parse().map_err(|_| bad(key))?,
            "k" => self.k = value.parse().map_err(|_| bad(key))?,
            "passes_per_epoch" => self.passes_per_epoch = value.parse().map_err(|_| bad(key))?,
            "branches" => self.branches = BranchSet::parse(value)?,
            "fuse_weights" => {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad(key))?;
                if parts.len() != 3 {
                    return Err(Error::ConfigInvalid(format!(
                        "line {lineno}: fuse_weights wants 3 entries (global,self,mutual)"
                    )));
                }
                self.fuse_weights = [parts[0], parts[1], parts[2]];
            }
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "pad" => self.pad = value.parse().map_err(|_| bad(key))?,
            "flip_prob" => self.flip_prob = value.parse().map_err(|_| bad(key))?,
            "dataset" => self.dataset_path = Some(PathBuf::from(value)),
            "num_ids" => self.num_ids = value.parse().map_err(|_| bad(key))?,
            "imgs_per_id" => self.imgs_per_id = value.parse().map_err(|_| bad(key))?,
            "num_cams" => self.num_cams = value.parse().map_err(|_| bad(key))?,
            "height" => self.height = value.parse().map_err(|_| bad(key))?,
            "width" => self.width = value.parse().map_err(|_| bad(key))?,
            "noise" => self.noise = value.parse().map_err(|_| bad(key))?,
            "data_seed" => self.data_seed = Some(value.parse().map_err(|_| bad(key))?),
            other => {
                return Err(Error::ConfigInvalid(format!(
                    "line {lineno}: unknown key '{other}'"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone_config().validate()?;
        if self.branches.none_enabled() {
            return Err(Error::ConfigInvalid("at least one branch must be enabled".into()));
        }
        if self.epochs == 0 {
            return Err(Error::ConfigInvalid("epochs must be >= 1".into()));
        }
        if !self.decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::ConfigInvalid(format!(
                "decay_epochs must be strictly increasing, got {:?}",
                self.decay_epochs
            )));
        }
        if self.decay_epochs.iter().any(|&e| e == 0 || e >= self.epochs) {
            return Err(Error::ConfigInvalid(format!(
                "decay_epochs must lie in [1, epochs), got {:?} with {} epochs",
                self.decay_epochs, self.epochs
            )));
        }
        if self.p < 2 {
            return Err(Error::ConfigInvalid(format!(
                "p must be >= 2 so every anchor sees a negative, got {}",
                self.p
            )));
        }
        // every branch mines triplets, so K = 1 can never train
        if self.k < 2 {
            return Err(Error::ConfigInvalid(format!(
                "k must be >= 2 so every anchor sees a positive, got {}",
                self.k
            )));
        }
        if self.passes_per_epoch == 0 {
            return Err(Error::ConfigInvalid("passes_per_epoch must be >= 1".into()));
        }
        if self.base_lr <= 0.0 || self.lr_decay <= 0.0 || self.lr_decay > 1.0 {
            return Err(Error::ConfigInvalid(format!(
                "base_lr {} / lr_decay {} out of range",
                self.base_lr, self.lr_decay
            )));
        }
        if self.margin < 0.0 {
            return Err(Error::ConfigInvalid(format!("margin must be >= 0, got {}", self.margin)));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::ConfigInvalid(format!(
                "smoothing must lie in [0,1), got {}",
                self.smoothing
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::ConfigInvalid(format!(
                "flip_prob must lie in [0,1], got {}",
                self.flip_prob
            )));
        }
        let c_o = *self.backbone_widths.last().unwrap();
        if self.squeeze == 0 || c_o % self.squeeze != 0 {
            return Err(Error::ConfigInvalid(format!(
                "squeeze {} must divide the final backbone width {c_o}",
                self.squeeze
            )));
        }
        if self.dataset_path.is_none() {
            self.synth_spec().validate().map_err(|e| match e {
                Error::SpecInvalid(msg) => Error::ConfigInvalid(msg),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            widths: self.backbone_widths.clone(),
            strides: self.backbone_strides.clone(),
            in_channels: 3,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            num_ids: self.num_ids,
            imgs_per_id: self.imgs_per_id,
            num_cams: self.num_cams,
            height: self.height,
            width: self.width,
            noise: self.noise,
            seed: self.data_seed.unwrap_or(self.seed),
        }
    }

    pub fn model_config(&self, num_ids: usize) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone_config(),
            c_self: self.c_self,
            c_m: self.c_m,
            squeeze: self.squeeze,
            num_ids,
            branches: self.branches,
        }
    }

    /// Learning rate for a 1-based epoch index: the base rate times one
    /// decay factor per decay epoch already reached.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let hits = self.decay_epochs.iter().filter(|&&d| d <= epoch).count();
        self.base_lr * self.lr_decay.powi(hits as i32)
    }

    /// Canonical serialization: fixed key order, parseable by `parse`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("backbone_widths={}\n", join_usize(&self.backbone_widths)));
        out.push_str(&format!("backbone_strides={}\n", join_usize(&self.backbone_strides)));
        out.push_str(&format!("c_self={}\n", self.c_self));
        out.push_str(&format!("c_m={}\n", self.c_m));
        out.push_str(&format!("squeeze={}\n", self.squeeze));
        out.push_str(&format!("margin={}\n", self.margin));
        out.push_str(&format!("smoothing={}\n", self.smoothing));
        out.push_str(&format!("base_lr={}\n", self.base_lr));
        out.push_str(&format!("lr_decay={}\n", self.lr_decay));
        out.push_str(&format!("decay_epochs={}\n", join_usize(&self.decay_epochs)));
        out.push_str(&format!("epochs={}\n", self.epochs));
        out.push_str(&format!("p={}\n", self.p));
        out.push_str(&format!("k={}\n", self.k));
        out.push_str(&format!("passes_per_epoch={}\n", self.passes_per_epoch));
        out.push_str(&format!("branches={}\n", self.branches.to_list()));
        out.push_str(&format!(
            "fuse_weights={},{},{}\n",
            self.fuse_weights[0], self.fuse_weights[1], self.fuse_weights[2]
        ));
        out.push_str(&format!("seed={}\n", self.seed));
        out.push_str(&format!("pad={}\n", self.pad));
        out.push_str(&format!("flip_prob={}\n", self.flip_prob));
        if let Some(path) = &self.dataset_path {
            out.push_str(&format!("dataset={}\n", path.display()));
        }
        out.push_str(&format!("num_ids={}\n", self.num_ids));
        out.push_str(&format!("imgs_per_id={}\n", self.imgs_per_id));
        out.push_str(&format!("num_cams={}\n", self.num_cams));
        out.push_str(&format!("height={}\n", self.height));
        out.push_str(&format!("width={}\n", self.width));
        out.push_str(&format!("noise={}\n", self.noise));
        if let Some(ds) = self.data_seed {
            out.push_str(&format!("data_seed={ds}\n"));
        }
        out
    }
}

fn parse_usize_list(value: &str) -> Option<Vec<usize>> {
    value
        .split(',')
        .map(|s| s.trim().parse::<usize>().ok())
        .collect()
}

fn join_usize(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}
