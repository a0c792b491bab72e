//! Architecture hyperparameters, ablation switches and their validation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed architecture hyperparameters, shared unchanged by every dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub embed_dim: usize,
    pub n_heads: usize,
    /// Temporal filters in the first tokenizer convolution.
    pub f1: usize,
    pub depth_multiplier: usize,
    pub temporal_kernels: [usize; 2],
    pub pool_sizes: [usize; 2],
    pub fine_kernels: Vec<usize>,
    pub coarse_kernels: Vec<usize>,
    pub expansion_ratio: usize,
    pub groups: usize,
    pub ffn_ratio: usize,
    pub attn_layers: usize,
    pub dropout: f64,
    /// Initial value of every residual scale inside the temporal blocks and
    /// of the token re-injection scales.
    pub residual_scale_init: f64,
    /// Initial value of the cross-attention interaction strengths.
    pub interaction_init: f64,
    /// Add the shared tokens back onto each branch output.
    pub reinject: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub ln_eps: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            embed_dim: 40,
            n_heads: 4,
            f1: 16,
            depth_multiplier: 2,
            temporal_kernels: [64, 16],
            pool_sizes: [4, 8],
            fine_kernels: vec![3, 7],
            coarse_kernels: vec![11, 15],
            expansion_ratio: 4,
            groups: 4,
            ffn_ratio: 2,
            attn_layers: 1,
            dropout: 0.25,
            residual_scale_init: 1.0,
            interaction_init: 1.0,
            reinject: true,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            ln_eps: 1e-5,
        }
    }
}

impl ArchConfig {
    pub fn f2(&self) -> usize {
        self.f1 * self.depth_multiplier
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Fine,
    Coarse,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Fine => "fine",
            Branch::Coarse => "coarse",
        }
    }

    pub fn other(self) -> Branch {
        match self {
            Branch::Fine => Branch::Coarse,
            Branch::Coarse => Branch::Fine,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Softmax token weights driven by a learnable query.
    #[default]
    Adaptive,
    /// Plain token mean (the query held at zero).
    Mean,
}

/// Component switches matching the ablation variants.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub fine_branch: bool,
    pub coarse_branch: bool,
    pub positional_embedding: bool,
    pub intra_attention: bool,
    pub inter_attention: bool,
    pub aggregation: Aggregation,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            fine_branch: true,
            coarse_branch: true,
            positional_embedding: true,
            intra_attention: true,
            inter_attention: true,
            aggregation: Aggregation::Adaptive,
        }
    }
}

impl Ablation {
    pub fn full() -> Self {
        Self::default()
    }

    pub fn no_positional_embedding() -> Self {
        Self {
            positional_embedding: false,
            ..Self::default()
        }
    }

    pub fn no_intra() -> Self {
        Self {
            intra_attention: false,
            ..Self::default()
        }
    }

    pub fn no_inter() -> Self {
        Self {
            inter_attention: false,
            ..Self::default()
        }
    }

    /// Late fusion: the branches meet only at the classifier.
    pub fn no_interaction() -> Self {
        Self {
            intra_attention: false,
            inter_attention: false,
            ..Self::default()
        }
    }

    pub fn mean_pool() -> Self {
        Self {
            aggregation: Aggregation::Mean,
            ..Self::default()
        }
    }

    pub fn single_branch(keep: Branch) -> Self {
        let mut a = Self::default();
        match keep {
            Branch::Fine => a.coarse_branch = false,
            Branch::Coarse => a.fine_branch = false,
        }
        a
    }

    pub fn branch_enabled(&self, b: Branch) -> bool {
        match b {
            Branch::Fine => self.fine_branch,
            Branch::Coarse => self.coarse_branch,
        }
    }

    pub fn active_branches(&self) -> Vec<Branch> {
        [Branch::Fine, Branch::Coarse]
            .into_iter()
            .filter(|&b| self.branch_enabled(b))
            .collect()
    }

    /// Named variants accepted by `--ablation`.
    pub fn variants() -> Vec<(&'static str, Ablation)> {
        vec![
            ("no-positional-embedding", Self::no_positional_embedding()),
            ("single-fine", Self::single_branch(Branch::Fine)),
            ("single-coarse", Self::single_branch(Branch::Coarse)),
            ("no-interaction", Self::no_interaction()),
            ("no-intra", Self::no_intra()),
            ("no-inter", Self::no_inter()),
            ("mean-pool", Self::mean_pool()),
            ("full", Self::full()),
        ]
    }
}

/// Everything needed to build and run one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub samples: usize,
    pub classes: usize,
    pub arch: ArchConfig,
    pub ablation: Ablation,
}

/// Per-branch view of the temporal convolution settings.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchConfig {
    pub branch: Branch,
    pub kernel_sizes: Vec<usize>,
    pub expansion_ratio: usize,
    pub groups: usize,
    pub residual_scale_init: f64,
}

impl BranchConfig {
    pub fn n_blocks(&self) -> usize {
        self.kernel_sizes.len()
    }

    /// Temporal span covered by the composed depthwise kernels.
    pub fn receptive_field(&self) -> usize {
        self.kernel_sizes.iter().map(|k| k - 1).sum::<usize>() + 1
    }
}

impl ModelConfig {
    pub fn new(channels: usize, samples: usize, classes: usize) -> Self {
        Self {
            channels,
            samples,
            classes,
            arch: ArchConfig::default(),
            ablation: Ablation::default(),
        }
    }

    /// Four-class motor imagery, 64 electrodes, 4 s at 250 Hz.
    pub fn physionet_mi() -> Self {
        Self::new(64, 1000, 4)
    }

    pub fn bcic_iv_2a() -> Self {
        Self::new(22, 1000, 4)
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    /// Token count after the two pooling stages.
    pub fn n_tokens(&self) -> usize {
        let [p1, p2] = self.arch.pool_sizes;
        (self.samples / p1.max(1)) / p2.max(1)
    }

    pub fn min_samples(&self) -> usize {
        let [p1, p2] = self.arch.pool_sizes;
        2 * p1 * p2
    }

    pub fn branch(&self, b: Branch) -> BranchConfig {
        BranchConfig {
            branch: b,
            kernel_sizes: match b {
                Branch::Fine => self.arch.fine_kernels.clone(),
                Branch::Coarse => self.arch.coarse_kernels.clone(),
            },
            expansion_ratio: self.arch.expansion_ratio,
            groups: self.arch.groups,
            residual_scale_init: self.arch.residual_scale_init,
        }
    }

    /// Width of the classifier input: `d` per active branch.
    pub fn classifier_width(&self) -> usize {
        self.arch.embed_dim * self.ablation.active_branches().len()
    }

    /// Keeps only `keep`, or restores both branches if that branch is
    /// already the only one.
    pub fn single_branch_mode(&self, keep: Branch) -> Result<Self> {
        let mut c = self.clone();
        let other = keep.other();
        match other {
            Branch::Fine => c.ablation.fine_branch = !c.ablation.fine_branch,
            Branch::Coarse => c.ablation.coarse_branch = !c.ablation.coarse_branch,
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.arch;
        let fail = |m: String| Err(Error::Config(m));
        if self.channels == 0 {
            return fail("channel count must be >= 1".into());
        }
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if a.pool_sizes.iter().any(|&p| p == 0) {
            return fail(format!("pool sizes must be positive, got {:?}", a.pool_sizes));
        }
        if self.samples < self.min_samples() {
            return fail(format!(
                "trial length {} too short: the tokenizer needs at least {} samples",
                self.samples,
                self.min_samples()
            ));
        }
        if a.f1 == 0 || a.depth_multiplier == 0 || a.embed_dim == 0 {
            return fail("f1, depth_multiplier and embed_dim must be positive".into());
        }
        if a.temporal_kernels.iter().any(|&k| k == 0) {
            return fail("temporal kernel sizes must be positive".into());
        }
        if a.n_heads == 0 || a.embed_dim % a.n_heads != 0 {
            return fail(format!(
                "n_heads {} must divide embed_dim {}",
                a.n_heads, a.embed_dim
            ));
        }
        if a.attn_layers == 0 {
            return fail("attn_layers must be >= 1".into());
        }
        if a.groups == 0
            || a.embed_dim % a.groups != 0
            || (a.embed_dim * a.expansion_ratio) % a.groups != 0
        {
            return fail(format!(
                "groups {} must divide embed_dim {} and its expansion {}",
                a.groups,
                a.embed_dim,
                a.embed_dim * a.expansion_ratio
            ));
        }
        if a.expansion_ratio == 0 || a.ffn_ratio == 0 {
            return fail("expansion ratios must be positive".into());
        }
        for k in a.fine_kernels.iter().chain(&a.coarse_kernels) {
            if *k < 3 || k % 2 == 0 {
                return fail(format!("branch kernel sizes must be odd and >= 3, got {k}"));
            }
        }
        if a.fine_kernels.is_empty() || a.coarse_kernels.is_empty() {
            return fail("each branch needs at least one block".into());
        }
        if !(0.0..1.0).contains(&a.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", a.dropout));
        }
        if a.bn_eps <= 0.0 || a.ln_eps <= 0.0 {
            return fail("normalisation eps must be > 0".into());
        }
        if !(0.0..=1.0).contains(&a.bn_momentum) {
            return fail("bn_momentum must lie in [0, 1]".into());
        }
        if !self.ablation.fine_branch && !self.ablation.coarse_branch {
            return fail("cannot disable both temporal branches".into());
        }
        let n = self.n_tokens();
        for b in self.ablation.active_branches() {
            if let Some(&k) = self.branch(b).kernel_sizes.iter().find(|&&k| k / 2 >= n) {
                return fail(format!(
                    "{} branch kernel {k} is too large for {n} tokens (trial length {})",
                    b.name(),
                    self.samples
                ));
            }
        }
        Ok(())
    }
}
