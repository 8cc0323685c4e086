//! The adapted multi-task model: frozen encoder, prompt bank, LoRA bank and
//! heads over one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{self, AdapterConfig, InjectionPlan, LoraBank, LoraLinear, PromptBank};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, Heads};
use crate::numkernel::{Tape, Tensor, Var};
use crate::params::{Bound, ParamGroup, ParamStore};
use crate::task::Task;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub heads: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.adapter.validate(self.encoder.d_model)?;
        self.heads.validate()?;
        if !self.adapter.prompted_tasks.is_empty() && self.adapter.n_prompts > self.encoder.max_prompts {
            return Err(Error::Config(format!(
                "n_prompts {} exceeds encoder.max_prompts {}",
                self.adapter.n_prompts, self.encoder.max_prompts
            )));
        }
        if self.encoder.default_taps().len() < 2 {
            return Err(Error::Config("the FPN decoder needs an encoder with at least two layers".into()));
        }
        Ok(())
    }

    /// The smallest configuration exercising every code path; used for
    /// gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                image_size: 8,
                patch_size: 4,
                channels: 1,
                d_model: 8,
                n_layers: 2,
                n_heads: 2,
                mlp_hidden: 16,
                max_prompts: 2,
            },
            adapter: AdapterConfig {
                n_prompts: 2,
                rank: 2,
                alpha: 4.0,
                frozen_ratio: 0.5,
                ..AdapterConfig::default()
            },
            heads: HeadConfig {
                fpn_width: 4,
                det_hidden: 6,
                ..HeadConfig::default()
            },
        }
    }
}

// Independent RNG streams so that changing the adapters never perturbs the
// backbone or head initialization.
pub(crate) const STREAM_BACKBONE: u64 = 1;
const STREAM_PROMPTS: u64 = 2;
const STREAM_LORA: u64 = 3;
const STREAM_HEADS: u64 = 4;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub task: Task,
    /// Seg `[(S·S)×classes]` logits, cls `[1×classes]` logits, det `[1×4]`
    /// box, reg `[1×1]` value.
    pub output: Var,
    pub n_prompts: usize,
    pub seq_lens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Seg { mask: Vec<u8> },
    Cls { label: usize, probs: Vec<f64> },
    Det { bbox: [f64; 4] },
    Reg { value: f64 },
}

#[derive(Clone, Debug)]
pub struct TapSlfModel {
    cfg: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    prompts: PromptBank,
    lora: LoraBank,
    plan: InjectionPlan,
    heads: Heads,
    taps: Vec<usize>,
}

impl TapSlfModel {
    /// Builds the model with backbone and positional tables frozen and all
    /// adapters and heads trainable.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&cfg.encoder, &mut store, &mut stream_rng(seed, STREAM_BACKBONE))?;
        let d = cfg.encoder.d_model;
        let prompts = PromptBank::new(&mut store, &cfg.adapter, d, &mut stream_rng(seed, STREAM_PROMPTS));
        let plan = adapters::select_tuned_layers(cfg.encoder.n_layers, cfg.adapter.frozen_ratio)?;
        let mut lora = LoraBank::default();
        let mut lora_rng = stream_rng(seed, STREAM_LORA);
        for &layer in &plan.tuned {
            for &kind in &plan.kinds {
                let base = encoder.blocks[layer].projection(kind);
                let name = format!("adapters.lora.{layer}.{}", kind.short());
                let wrapped = LoraLinear::wrap(&mut store, &name, base, cfg.adapter.rank, cfg.adapter.alpha, &mut lora_rng);
                lora.insert(layer, kind, wrapped);
            }
        }
        let taps = cfg.encoder.default_taps();
        let heads = Heads::new(&mut store, &cfg.heads, d, taps.len(), &mut stream_rng(seed, STREAM_HEADS))?;
        store.set_group_trainable(ParamGroup::Backbone, false);
        store.set_group_trainable(ParamGroup::Positional, false);
        Ok(TapSlfModel {
            cfg: cfg.clone(),
            store,
            encoder,
            prompts,
            lora,
            plan,
            heads,
            taps,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn prompts(&self) -> &PromptBank {
        &self.prompts
    }

    pub fn lora(&self) -> &LoraBank {
        &self.lora
    }

    pub fn plan(&self) -> &InjectionPlan {
        &self.plan
    }

    pub fn heads(&self) -> &Heads {
        &self.heads
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn n_prompts(&self, task: Task) -> usize {
        if self.prompts.get(task).is_some() {
            self.cfg.adapter.n_prompts
        } else {
            0
        }
    }

    /// Copies every `backbone.*` tensor from `source`, which must provide
    /// each of them with a matching shape.
    pub fn load_backbone(&mut self, source: &ParamStore) -> Result<()> {
        let names: Vec<String> = self
            .store
            .entries()
            .iter()
            .filter(|e| matches!(e.group, ParamGroup::Backbone | ParamGroup::Positional))
            .map(|e| e.name.clone())
            .collect();
        for name in names {
            let id = source
                .find(&name)
                .ok_or_else(|| Error::Config(format!("backbone checkpoint lacks {name}")))?;
            self.store.assign(&name, source.get(id).clone())?;
        }
        Ok(())
    }

    /// Records one forward pass for `task` on `image`.
    ///
    /// Detection never receives prompts; a detection pass that sees any
    /// sequence length other than `L` is reported as a routing error.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, task: Task, image: &Tensor) -> Result<ForwardOutput> {
        let l = self.cfg.encoder.n_patches();
        let e = self.encoder.patchify(tape, bound, image)?;
        let x = adapters::attach_prompts(tape, bound, &self.prompts, task, e)?;
        let n_prompts = tape.shape(x)[0] - l;
        let x = self.encoder.add_positions(tape, bound, x, n_prompts)?;
        let taps: &[usize] = if task == Task::Seg { &self.taps } else { &[] };
        let enc = self.encoder.encode(tape, bound, x, &self.lora, taps)?;
        if task == Task::Det {
            if let Some(bad) = enc.seq_lens.iter().find(|&&n| n != l) {
                return Err(Error::Routing(format!(
                    "detection pass saw sequence length {bad}, expected {l}"
                )));
            }
        }
        let output = match task {
            Task::Seg => self.heads.seg.decode(tape, bound, &enc.taps, n_prompts, self.cfg.encoder.image_size)?,
            Task::Cls => self.heads.cls.forward(tape, bound, enc.features, n_prompts)?,
            Task::Reg => self.heads.reg.forward(tape, bound, enc.features, n_prompts)?,
            Task::Det => self.heads.det.forward(tape, bound, enc.features, l)?,
        };
        Ok(ForwardOutput {
            task,
            output,
            n_prompts,
            seq_lens: enc.seq_lens,
        })
    }

    /// Raw head output without recording gradients.
    pub fn infer(&self, task: Task, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &bound, task, image)?;
        Ok(tape.value(out.output).clone())
    }

    pub fn predict(&self, task: Task, image: &Tensor) -> Result<Prediction> {
        let out = self.infer(task, image)?;
        Ok(match task {
            Task::Seg => {
                let (_, c) = out.as_matrix();
                let mask = out
                    .data()
                    .chunks_exact(c)
                    .map(|row| argmax(row) as u8)
                    .collect();
                Prediction::Seg { mask }
            }
            Task::Cls => {
                let logits = out.data();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
                let total: f64 = exp.iter().sum();
                let probs: Vec<f64> = exp.iter().map(|v| v / total).collect();
                Prediction::Cls {
                    label: argmax(&probs),
                    probs,
                }
            }
            Task::Det => {
                let d = out.data();
                Prediction::Det {
                    bbox: [d[0], d[1], d[2], d[3]],
                }
            }
            Task::Reg => Prediction::Reg { value: out.item() },
        })
    }

    /// Folds every LoRA update into its base weight and drops the wrappers.
    pub fn merged(&self) -> TapSlfModel {
        let mut out = self.clone();
        for lora in self.lora.iter().map(|(_, l)| l) {
            *out.store.get_mut(lora.base.weight) = lora.merge(&self.store);
        }
        out.lora = LoraBank::default();
        out.plan = InjectionPlan::empty(self.cfg.encoder.n_layers);
        out
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
