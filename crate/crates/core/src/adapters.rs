//! Task-aware soft prompts, LoRA-wrapped projections, the frozen-ratio layer
//! selection policy and trainable-parameter accounting.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{kernels, Tape, Tensor, Var};
use crate::params::{Bound, Linear, ParamGroup, ParamId, ParamStore};
use crate::task::Task;

/// Standard deviation of the Gaussian used for `A` factors and prompts.
pub const ADAPTER_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    /// Prompt length `N`.
    pub n_prompts: usize,
    pub rank: usize,
    pub alpha: f64,
    /// Fraction of encoder layers, counted from the bottom, without LoRA.
    pub frozen_ratio: f64,
    pub prompted_tasks: BTreeSet<Task>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            n_prompts: 10,
            rank: 8,
            alpha: 16.0,
            frozen_ratio: 0.7,
            prompted_tasks: [Task::Seg, Task::Cls, Task::Reg].into_iter().collect(),
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.frozen_ratio) {
            return Err(Error::Config(format!(
                "frozen_ratio must lie in [0, 1], got {}",
                self.frozen_ratio
            )));
        }
        if self.rank == 0 || self.rank >= d_model {
            return Err(Error::Config(format!(
                "LoRA rank must satisfy 1 <= r < {d_model}, got {}",
                self.rank
            )));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.prompted_tasks.contains(&Task::Det) {
            return Err(Error::Config(
                "detection cannot be prompted: it needs unshifted patch positions".into(),
            ));
        }
        if !self.prompted_tasks.is_empty() && self.n_prompts == 0 {
            return Err(Error::Config("prompted tasks need n_prompts >= 1".into()));
        }
        Ok(())
    }

    /// `α / r`, the factor applied to `B·A`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn prompts_for(&self, task: Task) -> usize {
        if self.prompted_tasks.contains(&task) {
            self.n_prompts
        } else {
            0
        }
    }
}

/// Per-task learnable prompt matrices `P_t: [N×d]`.
#[derive(Clone, Debug, Default)]
pub struct PromptBank {
    prompts: BTreeMap<Task, ParamId>,
}

impl PromptBank {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &AdapterConfig,
        d_model: usize,
        rng: &mut R,
    ) -> Self {
        let prompts = cfg
            .prompted_tasks
            .iter()
            .map(|&task| {
                let id = store.add(
                    format!("adapters.prompt.{task}"),
                    Tensor::randn(&[cfg.n_prompts, d_model], ADAPTER_INIT_STD, rng),
                    ParamGroup::Prompts,
                );
                (task, id)
            })
            .collect();
        PromptBank { prompts }
    }

    pub fn get(&self, task: Task) -> Option<ParamId> {
        self.prompts.get(&task).copied()
    }

    pub fn tasks(&self) -> impl Iterator<Item = Task> + '_ {
        self.prompts.keys().copied()
    }
}

/// Prepends the task's prompts to the patch embeddings; tasks without a
/// prompt matrix (detection always) get `E` back unchanged.
pub fn attach_prompts(
    tape: &mut Tape,
    bound: &Bound,
    bank: &PromptBank,
    task: Task,
    patches: Var,
) -> Result<Var> {
    match bank.get(task) {
        Some(p) => tape.concat_rows(&[bound.var(p), patches]),
        None => Ok(patches),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjKind {
    Query,
    Key,
    Value,
    Output,
}

impl ProjKind {
    pub const ALL: [ProjKind; 4] = [ProjKind::Query, ProjKind::Key, ProjKind::Value, ProjKind::Output];

    pub fn short(self) -> &'static str {
        match self {
            ProjKind::Query => "q",
            ProjKind::Key => "k",
            ProjKind::Value => "v",
            ProjKind::Output => "o",
        }
    }
}

/// A frozen projection `W0: [d×k]` with a trainable low-rank update
/// `ΔW = B·A`, `A: [r×k]`, `B: [d×r]`.
#[derive(Clone, Copy, Debug)]
pub struct LoraLinear {
    pub base: Linear,
    pub a: ParamId,
    pub b: ParamId,
    pub alpha: f64,
    pub rank: usize,
}

impl LoraLinear {
    /// Wraps `base`; `A` is Gaussian, `B` is zero so the update starts at 0.
    pub fn wrap<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        base: Linear,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Self {
        let k = base.in_dim(store);
        let d = base.out_dim(store);
        let a = store.add(
            format!("{name}.a"),
            Tensor::randn(&[rank, k], ADAPTER_INIT_STD, rng),
            ParamGroup::Lora,
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d, rank]), ParamGroup::Lora);
        LoraLinear {
            base,
            a,
            b,
            alpha,
            rank,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `y = x·W0ᵀ + (α/r)·(x·Aᵀ)·Bᵀ + bias` for row-token inputs `x: [n×k]`.
    ///
    /// The low-rank path multiplies by `A` first; `B·A` is never formed.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let base = tape.matmul_nt(x, bound.var(self.base.weight))?;
        let down = tape.matmul_nt(x, bound.var(self.a))?;
        let up = tape.matmul_nt(down, bound.var(self.b))?;
        let up = tape.scale(up, self.scale())?;
        let y = tape.add(base, up)?;
        tape.add_row(y, bound.var(self.base.bias))
    }

    /// Dense `W0 + (α/r)·B·A`.
    pub fn merge(&self, store: &ParamStore) -> Tensor {
        let w0 = store.get(self.base.weight);
        let a = store.get(self.a);
        let b = store.get(self.b);
        let (d, k) = (w0.shape()[0], w0.shape()[1]);
        let mut ba = vec![0.0; d * k];
        kernels::matmul_acc(b.data(), a.data(), &mut ba, d, self.rank, k);
        let s = self.scale();
        let data = w0
            .data()
            .iter()
            .zip(&ba)
            .map(|(w, u)| w + s * u)
            .collect();
        Tensor::new(vec![d, k], data).expect("merged weight keeps the base shape")
    }

    pub fn trainable_count(d: usize, k: usize, rank: usize) -> usize {
        rank * (d + k)
    }
}

/// Which encoder layers get LoRA on which projections.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InjectionPlan {
    pub n_layers: usize,
    pub tuned: BTreeSet<usize>,
    pub kinds: Vec<ProjKind>,
}

impl InjectionPlan {
    pub fn empty(n_layers: usize) -> Self {
        InjectionPlan {
            n_layers,
            tuned: BTreeSet::new(),
            kinds: ProjKind::ALL.to_vec(),
        }
    }

    pub fn frozen_layers(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_layers).filter(|l| !self.tuned.contains(l))
    }

    pub fn is_empty(&self) -> bool {
        self.tuned.is_empty()
    }
}

/// Freezes the bottom `floor(frozen_ratio·T)` layers and tunes the rest.
pub fn select_tuned_layers(n_layers: usize, frozen_ratio: f64) -> Result<InjectionPlan> {
    if n_layers == 0 {
        return Err(Error::Config("encoder needs at least one layer".into()));
    }
    if !(0.0..=1.0).contains(&frozen_ratio) {
        return Err(Error::Config(format!(
            "frozen_ratio must lie in [0, 1], got {frozen_ratio}"
        )));
    }
    // The tolerance keeps products such as 0.29·100 from flooring to 28.
    let n_frozen = ((frozen_ratio * n_layers as f64 + 1e-9).floor() as usize).min(n_layers);
    Ok(InjectionPlan {
        n_layers,
        tuned: (n_frozen..n_layers).collect(),
        kinds: ProjKind::ALL.to_vec(),
    })
}

/// Materialized LoRA wrappers keyed by `(layer, projection)`.
#[derive(Clone, Debug, Default)]
pub struct LoraBank {
    layers: BTreeMap<(usize, ProjKind), LoraLinear>,
}

impl LoraBank {
    pub fn insert(&mut self, layer: usize, kind: ProjKind, lora: LoraLinear) {
        self.layers.insert((layer, kind), lora);
    }

    pub fn get(&self, layer: usize, kind: ProjKind) -> Option<&LoraLinear> {
        self.layers.get(&(layer, kind))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, ProjKind), &LoraLinear)> {
        self.layers.iter()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> BTreeSet<usize> {
        self.layers.keys().map(|(l, _)| *l).collect()
    }
}

/// Parameter counts per group for an adapted model.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccountingReport {
    pub backbone_frozen: usize,
    pub positional: usize,
    pub lora: usize,
    pub prompts: usize,
    pub heads: usize,
}

impl AccountingReport {
    pub fn trainable(&self) -> usize {
        self.lora + self.prompts + self.heads
    }

    pub fn total(&self) -> usize {
        self.backbone_frozen + self.positional + self.trainable()
    }

    pub fn fraction(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.trainable() as f64 / t as f64,
        }
    }

    /// Plain-text `key = value` document.
    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for AccountingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "backbone_frozen = {}", self.backbone_frozen)?;
        writeln!(f, "positional = {}", self.positional)?;
        writeln!(f, "lora = {}", self.lora)?;
        writeln!(f, "prompts = {}", self.prompts)?;
        writeln!(f, "heads = {}", self.heads)?;
        writeln!(f, "trainable = {}", self.trainable())?;
        writeln!(f, "total = {}", self.total())?;
        writeln!(f, "trainable_fraction = {:.6}", self.fraction())
    }
}

/// Closed-form accounting from the model's architecture. Backbone and
/// positional tables count as frozen; LoRA factors, prompts and heads as
/// trainable.
pub fn count_trainable(model: &crate::model::TapSlfModel) -> AccountingReport {
    let cfg = model.config();
    let enc = &cfg.encoder;
    let d = enc.d_model;
    let h = enc.mlp_hidden;
    let per_layer = 2 * (2 * d) + 4 * (d * d + d) + (h * d + h) + (d * h + d);
    let backbone = enc.patch_dim() * d + d + enc.n_layers * per_layer + 2 * d;
    let positional = (enc.n_patches() + enc.max_prompts) * d;
    let tuned = model.plan().tuned.len();
    let lora = tuned * model.plan().kinds.len() * LoraLinear::trainable_count(d, d, cfg.adapter.rank);
    let prompts = cfg.adapter.prompted_tasks.len() * cfg.adapter.n_prompts * d;
    AccountingReport {
        backbone_frozen: backbone,
        positional,
        lora,
        prompts,
        heads: cfg.heads.param_count(d, model.taps().len()),
    }
}
