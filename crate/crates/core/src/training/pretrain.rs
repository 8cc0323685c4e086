use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::LoraBank;
use crate::encoder::{extract_patches, Encoder};
use crate::error::Result;
use crate::exec;
use crate::model::{stream_rng, STREAM_BACKBONE};
use crate::numkernel::{Tape, Tensor, Var};
use crate::params::{Bound, Linear, ParamGroup, ParamStore};
use crate::synthdata;
use crate::task::Task;

use super::checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta, RngState};
use super::config::TrainConfig;
use super::optim::AdamW;
use super::{reduce_gradients, touched};

const STREAM_PRETEXT: u64 = 5;
const STREAM_TRAIN: u64 = 10;
const TRAIN_SEED_OFFSET: u64 = 10_000_000;
const HELDOUT_SEED_OFFSET: u64 = 20_000_000;
const HELDOUT_SIZE: usize = 8;

/// Masked-patch reconstruction: a random subset of patches is zeroed before
/// embedding and a linear decoder regresses their pixels from the final
/// features. Only masked patches contribute to the loss.
#[derive(Clone, Debug)]
pub struct Pretrainer {
    cfg: TrainConfig,
    store: ParamStore,
    encoder: Encoder,
    decoder: Linear,
    optim: AdamW,
    step: u64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    /// Mean training loss of every step.
    pub losses: Vec<f64>,
    /// Held-out loss before the first and after the last step.
    pub heldout_initial: f64,
    pub heldout_final: f64,
}

impl Pretrainer {
    /// The encoder is initialised exactly as [`crate::TapSlfModel::new`]
    /// would for the same seed.
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&cfg.encoder, &mut store, &mut stream_rng(cfg.seed, STREAM_BACKBONE))?;
        let decoder = Linear::new(
            &mut store,
            "pretext.recon",
            cfg.encoder.d_model,
            cfg.encoder.patch_dim(),
            ParamGroup::Pretext,
            &mut stream_rng(cfg.seed, STREAM_PRETEXT),
        );
        let optim = AdamW::new(&store, cfg.pretrain.optim.clone())?;
        Ok(Pretrainer {
            cfg: cfg.clone(),
            store,
            encoder,
            decoder,
            optim,
            step: 0,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    fn n_masked(&self) -> usize {
        let l = self.cfg.encoder.n_patches();
        ((self.cfg.pretrain.mask_ratio * l as f64).round() as usize).clamp(1, l)
    }

    /// Reconstruction loss of one image; the mask is drawn from `mask_seed`.
    fn sample_loss(&self, tape: &mut Tape, bound: &Bound, image: &Tensor, mask_seed: u64) -> Result<Var> {
        let enc_cfg = &self.cfg.encoder;
        let (l, pd) = (enc_cfg.n_patches(), enc_cfg.patch_dim());
        let target = extract_patches(image, enc_cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
        let masked = index::sample(&mut rng, l, self.n_masked());
        let mut input = target.clone();
        let mut weight = vec![0.0; l * pd];
        for r in masked.iter() {
            input.data_mut()[r * pd..(r + 1) * pd].fill(0.0);
            weight[r * pd..(r + 1) * pd].fill(1.0);
        }
        let input = tape.constant(input);
        let tokens = self.encoder.embed_patches(tape, bound, input)?;
        let tokens = self.encoder.add_positions(tape, bound, tokens, 0)?;
        let enc = self.encoder.encode(tape, bound, tokens, &LoraBank::default(), &[])?;
        let recon = self.decoder.forward(tape, bound, enc.features)?;
        let target = tape.constant(target);
        let diff = tape.sub(recon, target)?;
        let sq = tape.square(diff)?;
        let weight = tape.constant(Tensor::new(vec![l, pd], weight)?);
        let sq = tape.mul(sq, weight)?;
        let total = tape.sum(sq)?;
        tape.scale(total, 1.0 / (self.n_masked() * pd) as f64)
    }

    fn image(&self, seed: u64) -> Tensor {
        synthdata::gen_sample(Task::Seg, seed, self.cfg.encoder.image_size).image
    }

    /// Mean reconstruction loss on a fixed held-out batch.
    pub fn heldout_loss(&self) -> Result<f64> {
        let base = self.cfg.data.base_seed + HELDOUT_SEED_OFFSET;
        let losses = exec::try_map_indexed(self.cfg.exec, HELDOUT_SIZE, |i| {
            let seed = base + i as u64;
            let mut tape = Tape::new();
            let bound = self.store.bind_frozen(&mut tape);
            let loss = self.sample_loss(&mut tape, &bound, &self.image(seed), seed)?;
            Ok::<_, crate::Error>(tape.value(loss).item())
        })?;
        Ok(losses.iter().sum::<f64>() / HELDOUT_SIZE as f64)
    }

    /// One optimizer step on a fresh batch; returns the mean batch loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let b = self.cfg.pretrain.batch_size;
        let base = self.cfg.data.base_seed + TRAIN_SEED_OFFSET + self.step * b as u64;
        let ids = self.store.trainable_ids();
        let results = exec::try_map_indexed(self.cfg.exec, b, |i| {
            let seed = base + i as u64;
            let mut tape = Tape::new();
            let bound = self.store.bind_trainable(&mut tape);
            let loss = self.sample_loss(&mut tape, &bound, &self.image(seed), seed)?;
            let value = tape.value(loss).item();
            let grads = tape.backward(loss)?;
            let g: Vec<Option<Tensor>> = ids.iter().map(|&id| grads.get(bound.var(id))).collect();
            Ok::<_, crate::Error>((value, g))
        })?;
        let loss = results.iter().map(|(l, _)| l).sum::<f64>() / b as f64;
        let grads = reduce_gradients(results.into_iter().map(|(_, g)| g).collect(), 1.0 / b as f64);
        self.optim.step(&mut self.store, &touched(ids, grads))?;
        self.step += 1;
        Ok(loss)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta {
            kind: CheckpointKind::Backbone,
            config: self.cfg.clone(),
            step: self.step,
            rng: RngState::capture(self.cfg.seed, &stream_rng(self.cfg.seed, STREAM_TRAIN)),
        };
        Checkpoint::capture(meta, &self.store, Some(&self.optim))
    }
}

/// Runs `cfg.pretrain.steps` steps of masked-patch reconstruction.
pub fn pretrain_backbone(cfg: &TrainConfig, mut on_step: impl FnMut(u64, f64)) -> Result<PretrainOutcome> {
    let mut p = Pretrainer::new(cfg)?;
    let heldout_initial = p.heldout_loss()?;
    let mut losses = Vec::with_capacity(cfg.pretrain.steps);
    for _ in 0..cfg.pretrain.steps {
        let loss = p.train_step()?;
        losses.push(loss);
        on_step(p.step, loss);
    }
    let heldout_final = p.heldout_loss()?;
    Ok(PretrainOutcome {
        checkpoint: p.checkpoint(),
        losses,
        heldout_initial,
        heldout_final,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_steps_leave_the_initialization() {
        let mut cfg = TrainConfig::micro();
        cfg.pretrain.steps = 0;
        let out = pretrain_backbone(&cfg, |_, _| {}).unwrap();
        let fresh = Pretrainer::new(&cfg).unwrap();
        for e in fresh.store().entries() {
            assert!(out.checkpoint.tensor(&e.name).unwrap().bitwise_eq(&e.tensor), "{}", e.name);
        }
        assert_eq!(out.heldout_initial, out.heldout_final);
    }

    #[test]
    fn backbone_matches_model_initialization() {
        let cfg = TrainConfig::micro();
        let p = Pretrainer::new(&cfg).unwrap();
        let m = crate::TapSlfModel::new(&cfg.model(), cfg.seed).unwrap();
        for e in m.store().entries().iter().filter(|e| e.name.starts_with("backbone.")) {
            let id = p.store().find(&e.name).unwrap();
            assert!(p.store().get(id).bitwise_eq(&e.tensor), "{}", e.name);
        }
    }

    #[test]
    fn a_few_steps_reduce_heldout_loss() {
        let mut cfg = TrainConfig::micro();
        cfg.pretrain.steps = 30;
        cfg.pretrain.optim.lr = 3e-3;
        let out = pretrain_backbone(&cfg, |_, _| {}).unwrap();
        assert!(out.heldout_final < out.heldout_initial, "{} -> {}", out.heldout_initial, out.heldout_final);
    }
}
