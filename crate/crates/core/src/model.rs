//! The assembled three-branch model over one shared backbone.
//!
//! All enabled branches hang off the same backbone feature map and train
//! jointly end to end; toggling branches reproduces the ablation ladder
//! (global only, +mutual, +self, all three).

use crate::backbone::{Backbone, BackboneConfig, GlobalBranch};
use crate::data::stream;
use crate::error::{Error, Result};
use crate::layers::ParamVisitor;
use crate::mutual_guided::MutualBranch;
use crate::ops;
use crate::self_guided::SelfBranch;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::Mode;

const DOMAIN_INIT: u64 = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchSet {
    pub global: bool,
    pub self_guided: bool,
    pub mutual: bool,
}

impl BranchSet {
    pub fn all() -> Self {
        BranchSet {
            global: true,
            self_guided: true,
            mutual: true,
        }
    }

    pub fn none_enabled(&self) -> bool {
        !(self.global || self.self_guided || self.mutual)
    }

    /// Parse a comma-separated subset of `global,self,mutual`.
    pub fn parse(list: &str) -> Result<Self> {
        let mut set = BranchSet {
            global: false,
            self_guided: false,
            mutual: false,
        };
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "global" => set.global = true,
                "self" => set.self_guided = true,
                "mutual" => set.mutual = true,
                other => {
                    return Err(Error::ConfigInvalid(format!(
                        "unknown branch '{other}' (expected global, self, mutual)"
                    )))
                }
            }
        }
        if set.none_enabled() {
            return Err(Error::ConfigInvalid("at least one branch must be enabled".into()));
        }
        Ok(set)
    }

    pub fn to_list(self) -> String {
        let mut parts = Vec::new();
        if self.global {
            parts.push("global");
        }
        if self.self_guided {
            parts.push("self");
        }
        if self.mutual {
            parts.push("mutual");
        }
        parts.join(",")
    }
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Self branch compressed width (kernel extent of its dynamic conv).
    pub c_self: usize,
    /// Mutual branch compressed width.
    pub c_m: usize,
    /// Controller squeeze: hidden width is C_o / squeeze.
    pub squeeze: usize,
    pub num_ids: usize,
    pub branches: BranchSet,
}

impl ModelConfig {
    pub fn desk_default(num_ids: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig::desk_default(),
            c_self: 32,
            c_m: 16,
            squeeze: 4,
            num_ids,
            branches: BranchSet::all(),
        }
    }

    pub fn c_o(&self) -> usize {
        self.backbone.out_channels()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.branches.none_enabled() {
            return Err(Error::ConfigInvalid("at least one branch must be enabled".into()));
        }
        if self.num_ids < 2 {
            return Err(Error::ConfigInvalid(format!(
                "num_ids must be >= 2, got {}",
                self.num_ids
            )));
        }
        if self.squeeze == 0 || self.c_o() % self.squeeze != 0 {
            return Err(Error::ConfigInvalid(format!(
                "squeeze {} must divide c_o {}",
                self.squeeze,
                self.c_o()
            )));
        }
        if self.c_self == 0 || self.c_m == 0 {
            return Err(Error::ConfigInvalid("branch widths must be >= 1".into()));
        }
        Ok(())
    }
}

pub struct ReidModel {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub global: Option<GlobalBranch>,
    pub self_branch: Option<SelfBranch>,
    pub mutual: Option<MutualBranch>,
}

/// Everything a forward pass produces; disabled branches yield `None`.
pub struct ForwardOutput {
    /// Raw pooled backbone feature (pre batch-norm), `[B, C_o]`. Drives the
    /// controllers and the pre-normalization distance export.
    pub pooled: Tensor,
    pub global_emb: Option<Tensor>,
    pub global_logits: Option<Tensor>,
    pub self_emb: Option<Tensor>,
    pub self_logits: Option<Tensor>,
    pub mutual_feats: Option<Tensor>,
    pub mutual_kernels: Option<Tensor>,
}

impl ReidModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, DOMAIN_INIT, 0);
        let backbone = Backbone::new(&mut rng, &cfg.backbone)?;
        let c_o = cfg.c_o();
        let global = cfg
            .branches
            .global
            .then(|| GlobalBranch::new(&mut rng, c_o, cfg.num_ids));
        let self_branch = if cfg.branches.self_guided {
            Some(SelfBranch::new(&mut rng, c_o, cfg.c_self, cfg.squeeze, cfg.num_ids)?)
        } else {
            None
        };
        let mutual = if cfg.branches.mutual {
            Some(MutualBranch::new(&mut rng, c_o, cfg.c_m, cfg.squeeze)?)
        } else {
            None
        };
        Ok(ReidModel {
            cfg,
            backbone,
            global,
            self_branch,
            mutual,
        })
    }

    /// Full forward pass. Classifier logits are produced in train mode only;
    /// evaluation needs embeddings, not class scores.
    pub fn forward(&self, tape: &Tape, images: &Tensor, mode: Mode) -> Result<ForwardOutput> {
        let featmap = self.backbone.forward(tape, images, mode)?;
        let pooled = ops::global_avg_pool(tape, &featmap)?;

        let mut out = ForwardOutput {
            pooled: pooled.clone(),
            global_emb: None,
            global_logits: None,
            self_emb: None,
            self_logits: None,
            mutual_feats: None,
            mutual_kernels: None,
        };

        if let Some(global) = &self.global {
            let emb = global.embed(tape, &pooled, mode)?;
            if mode == Mode::Train {
                out.global_logits = Some(global.logits(tape, &emb, mode)?);
            }
            out.global_emb = Some(emb);
        }
        if let Some(branch) = &self.self_branch {
            let emb = branch.forward(tape, &featmap, &pooled, mode)?;
            if mode == Mode::Train {
                out.self_logits = Some(branch.logits(tape, &emb, mode)?);
            }
            out.self_emb = Some(emb);
        }
        if let Some(mutual) = &self.mutual {
            out.mutual_feats = Some(mutual.features(tape, &featmap, mode)?);
            out.mutual_kernels = Some(mutual.kernels(tape, &pooled, mode)?);
        }
        Ok(out)
    }

    /// Walk every named parameter and buffer in a fixed order.
    pub fn visit(&mut self, v: &mut dyn ParamVisitor) {
        self.backbone.visit(v);
        if let Some(global) = self.global.as_mut() {
            global.visit(v);
        }
        if let Some(branch) = self.self_branch.as_mut() {
            branch.visit(v);
        }
        if let Some(mutual) = self.mutual.as_mut() {
            mutual.visit(v);
        }
    }

    /// Named trainable parameter count, for sanity checks.
    pub fn param_names(&mut self) -> Vec<String> {
        struct Collect(Vec<String>);
        impl ParamVisitor for Collect {
            fn visit(&mut self, name: &str, _t: &mut Tensor) {
                self.0.push(name.to_string());
            }
            fn visit_buffer(&mut self, _name: &str, _v: &mut Vec<f64>) {}
        }
        let mut c = Collect(Vec::new());
        self.visit(&mut c);
        c.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn branch_set_parses_subsets() {
        let set = BranchSet::parse("global,mutual").unwrap();
        assert!(set.global && set.mutual && !set.self_guided);
        assert_eq!(set.to_list(), "global,mutual");
        assert!(BranchSet::parse("").is_err());
        assert!(BranchSet::parse("global,bogus").is_err());
    }

    #[test]
    fn forward_respects_toggles() {
        let mut cfg = ModelConfig::desk_default(4);
        cfg.backbone = BackboneConfig {
            widths: vec![8],
            strides: vec![2],
            in_channels: 3,
        };
        cfg.c_self = 4;
        cfg.c_m = 4;
        cfg.squeeze = 2;
        cfg.branches = BranchSet {
            global: true,
            self_guided: false,
            mutual: true,
        };
        let model = ReidModel::new(cfg, 0).unwrap();
        let tape = Tape::new();
        let x = Tensor::zeros(&[2, 3, 8, 8]);
        let out = model.forward(&tape, &x, Mode::Eval).unwrap();
        assert!(out.global_emb.is_some());
        assert!(out.self_emb.is_none());
        assert!(out.mutual_feats.is_some());
        assert_eq!(out.mutual_kernels.as_ref().unwrap().shape(), &[2, 4, 4]);
    }

    #[test]
    fn desk_model_output_widths() {
        let model = ReidModel::new(ModelConfig::desk_default(8), 1).unwrap();
        let tape = Tape::new();
        let x = Tensor::zeros(&[2, 3, 32, 16]);
        let out = model.forward(&tape, &x, Mode::Eval).unwrap();
        assert_eq!(out.pooled.shape(), &[2, 64]);
        assert_eq!(out.global_emb.unwrap().shape(), &[2, 64]);
        assert_eq!(out.self_emb.unwrap().shape(), &[2, 32]);
        assert_eq!(out.mutual_feats.unwrap().shape(), &[2, 16]);
        assert_eq!(out.mutual_kernels.unwrap().shape(), &[2, 16, 16]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let mut a = ReidModel::new(ModelConfig::desk_default(4), 9).unwrap();
        let mut b = ReidModel::new(ModelConfig::desk_default(4), 9).unwrap();
        assert_eq!(a.param_names(), b.param_names());
        struct Flatten(Vec<f64>);
        impl ParamVisitor for Flatten {
            fn visit(&mut self, _n: &str, t: &mut Tensor) {
                self.0.extend_from_slice(t.data());
            }
            fn visit_buffer(&mut self, _n: &str, v: &mut Vec<f64>) {
                self.0.extend_from_slice(v);
            }
        }
        let (mut fa, mut fb) = (Flatten(Vec::new()), Flatten(Vec::new()));
        a.visit(&mut fa);
        b.visit(&mut fb);
        assert_eq!(fa.0, fb.0);
    }

    #[test]
    fn validation_rejects_empty_branch_set() {
        let mut cfg = ModelConfig::desk_default(4);
        cfg.branches = BranchSet {
            global: false,
            self_guided: false,
            mutual: false,
        };
        assert!(matches!(
            ReidModel::new(cfg, 0),
            Err(Error::ConfigInvalid(_))
        ));
    }
}
