//! Patch embedding, split positional tables and the pre-norm transformer
//! stack with per-layer adapter attachment points.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{LoraBank, ProjKind};
use crate::error::{Error, Result};
use crate::numkernel::{Tape, Tensor, Var};
use crate::params::{Bound, Linear, ParamGroup, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    /// Rows of the prompt positional table; bounds the prompt length.
    pub max_prompts: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 32,
            patch_size: 4,
            channels: 1,
            d_model: 64,
            n_layers: 8,
            n_heads: 4,
            mlp_hidden: 128,
            max_prompts: 10,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder.{name} must be positive")));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Sequence length `L` of patch tokens.
    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `{T/4, T/2, 3T/4, T−1}`, rounded down and deduplicated.
    pub fn default_taps(&self) -> Vec<usize> {
        let t = self.n_layers;
        let mut taps = vec![t / 4, t / 2, 3 * t / 4, t - 1];
        taps.sort_unstable();
        taps.dedup();
        taps
    }
}

/// Separate positional rows for prompts and patches, so patch `i` always gets
/// `patch_pos[i]` whether or not prompts precede it.
#[derive(Clone, Copy, Debug)]
pub struct PositionalTable {
    pub patch_pos: ParamId,
    pub prompt_pos: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct Block {
    pub ln1: (ParamId, ParamId),
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ln2: (ParamId, ParamId),
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn projection(&self, kind: ProjKind) -> Linear {
        match kind {
            ProjKind::Query => self.query,
            ProjKind::Key => self.key,
            ProjKind::Value => self.value,
            ProjKind::Output => self.output,
        }
    }
}

/// Block output captured for the FPN decoder.
#[derive(Clone, Copy, Debug)]
pub struct LayerTap {
    pub layer_index: usize,
    /// `[(N_t + L) × d]`
    pub features: Var,
}

#[derive(Clone, Debug)]
pub struct EncodeOutput {
    /// Final features after the closing layer norm.
    pub features: Var,
    pub taps: Vec<LayerTap>,
    /// Sequence length seen by every block, bottom to top.
    pub seq_lens: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    pub patch_embed: Linear,
    pub positions: PositionalTable,
    pub blocks: Vec<Block>,
    pub final_ln: (ParamId, ParamId),
}

fn layer_norm_params(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}.gamma"), Tensor::ones(&[d]), ParamGroup::Backbone),
        store.add(format!("{name}.beta"), Tensor::zeros(&[d]), ParamGroup::Backbone),
    )
}

/// Splits an `[H×W×C]` image into non-overlapping patches, one flattened
/// `p×p×C` patch per row, patches in row-major order.
pub fn extract_patches(image: &Tensor, cfg: &EncoderConfig) -> Result<Tensor> {
    let s = cfg.image_size;
    let c = cfg.channels;
    if image.shape() != [s, s, c] {
        return Err(Error::dim("patchify", image.shape(), &[s, s, c]));
    }
    let p = cfg.patch_size;
    let g = cfg.grid();
    let px = image.data();
    let mut out = Vec::with_capacity(s * s * c);
    for gy in 0..g {
        for gx in 0..g {
            for y in 0..p {
                let row = ((gy * p + y) * s + gx * p) * c;
                out.extend_from_slice(&px[row..row + p * c]);
            }
        }
    }
    Tensor::new(vec![g * g, cfg.patch_dim()], out)
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let g = ParamGroup::Backbone;
        let patch_embed = Linear::new(store, "backbone.patch_embed", cfg.patch_dim(), d, g, rng);
        let positions = PositionalTable {
            patch_pos: store.add(
                "backbone.pos.patch",
                Tensor::randn(&[cfg.n_patches(), d], 1.0, rng),
                ParamGroup::Positional,
            ),
            prompt_pos: store.add(
                "backbone.pos.prompt",
                Tensor::randn(&[cfg.max_prompts.max(1), d], 0.02, rng),
                ParamGroup::Positional,
            ),
        };
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let name = format!("backbone.layers.{l}");
                Block {
                    ln1: layer_norm_params(store, &format!("{name}.ln1"), d),
                    query: Linear::new(store, &format!("{name}.attn.q"), d, d, g, rng),
                    key: Linear::new(store, &format!("{name}.attn.k"), d, d, g, rng),
                    value: Linear::new(store, &format!("{name}.attn.v"), d, d, g, rng),
                    output: Linear::new(store, &format!("{name}.attn.o"), d, d, g, rng),
                    ln2: layer_norm_params(store, &format!("{name}.ln2"), d),
                    fc1: Linear::new(store, &format!("{name}.mlp.fc1"), d, cfg.mlp_hidden, g, rng),
                    fc2: Linear::new(store, &format!("{name}.mlp.fc2"), cfg.mlp_hidden, d, g, rng),
                }
            })
            .collect();
        let final_ln = layer_norm_params(store, "backbone.final_ln", d);
        Ok(Encoder {
            cfg: cfg.clone(),
            patch_embed,
            positions,
            blocks,
            final_ln,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Patch embeddings `E: [L×d]`.
    pub fn patchify(&self, tape: &mut Tape, bound: &Bound, image: &Tensor) -> Result<Var> {
        let patches = tape.constant(extract_patches(image, &self.cfg)?);
        self.patch_embed.forward(tape, bound, patches)
    }

    /// Embeds already-extracted (possibly masked) patch rows.
    pub fn embed_patches(&self, tape: &mut Tape, bound: &Bound, patches: Var) -> Result<Var> {
        self.patch_embed.forward(tape, bound, patches)
    }

    /// Adds `prompt_pos[0..n_prompts)` to the leading rows and
    /// `patch_pos[0..L)` to the rest.
    pub fn add_positions(&self, tape: &mut Tape, bound: &Bound, tokens: Var, n_prompts: usize) -> Result<Var> {
        let l = self.cfg.n_patches();
        let rows = tape.shape(tokens)[0];
        if rows != n_prompts + l {
            return Err(Error::dim("add_positions", tape.shape(tokens), &[n_prompts + l, self.cfg.d_model]));
        }
        if n_prompts > self.cfg.max_prompts {
            return Err(Error::Config(format!(
                "{n_prompts} prompts exceed the positional table ({})",
                self.cfg.max_prompts
            )));
        }
        let patch_pos = bound.var(self.positions.patch_pos);
        let pos = if n_prompts == 0 {
            patch_pos
        } else {
            let prompt_pos = tape.slice_rows(bound.var(self.positions.prompt_pos), 0, n_prompts)?;
            tape.concat_rows(&[prompt_pos, patch_pos])?
        };
        tape.add(tokens, pos)
    }

    fn project(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        lora: &LoraBank,
        layer: usize,
        kind: ProjKind,
        x: Var,
    ) -> Result<Var> {
        match lora.get(layer, kind) {
            Some(l) => l.forward(tape, bound, x),
            None => self.blocks[layer].projection(kind).forward(tape, bound, x),
        }
    }

    fn attention(&self, tape: &mut Tape, bound: &Bound, lora: &LoraBank, layer: usize, x: Var) -> Result<Var> {
        let q = self.project(tape, bound, lora, layer, ProjKind::Query, x)?;
        let k = self.project(tape, bound, lora, layer, ProjKind::Key, x)?;
        let v = self.project(tape, bound, lora, layer, ProjKind::Value, x)?;
        let dh = self.cfg.head_dim();
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.cfg.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, lo, hi)?,
                    tape.slice_cols(k, lo, hi)?,
                    tape.slice_cols(v, lo, hi)?,
                )
            };
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, inv_sqrt)?;
            let attn = tape.softmax_rows(scores)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        self.project(tape, bound, lora, layer, ProjKind::Output, merged)
    }

    /// Runs the pre-norm stack. LoRA wrappers in `lora` replace the matching
    /// projections; taps are captured after the listed blocks.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        tokens: Var,
        lora: &LoraBank,
        taps: &[usize],
    ) -> Result<EncodeOutput> {
        if let Some(&bad) = taps.iter().find(|&&t| t >= self.cfg.n_layers) {
            return Err(Error::Config(format!(
                "tap layer {bad} out of range for {} layers",
                self.cfg.n_layers
            )));
        }
        if let Some(&bad) = lora.layers().iter().find(|&&l| l >= self.cfg.n_layers) {
            return Err(Error::Config(format!(
                "injection plan references layer {bad} of {}",
                self.cfg.n_layers
            )));
        }
        let mut x = tokens;
        let mut captured = Vec::with_capacity(taps.len());
        let mut seq_lens = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            seq_lens.push(tape.shape(x)[0]);
            let h = tape.layer_norm(x, bound.var(block.ln1.0), bound.var(block.ln1.1))?;
            let a = self.attention(tape, bound, lora, l, h)?;
            x = tape.add(x, a)?;
            let h = tape.layer_norm(x, bound.var(block.ln2.0), bound.var(block.ln2.1))?;
            let h = block.fc1.forward(tape, bound, h)?;
            let h = tape.gelu(h)?;
            let h = block.fc2.forward(tape, bound, h)?;
            x = tape.add(x, h)?;
            if taps.contains(&l) {
                captured.push(LayerTap {
                    layer_index: l,
                    features: x,
                });
            }
        }
        let features = tape.layer_norm(x, bound.var(self.final_ln.0), bound.var(self.final_ln.1))?;
        Ok(EncodeOutput {
            features,
            taps: captured,
            seq_lens,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            mlp_hidden: 32,
            max_prompts: 4,
        }
    }

    #[test]
    fn config_checks() {
        assert!(EncoderConfig::default().validate().is_ok());
        let c = EncoderConfig { patch_size: 5, ..Default::default() };
        assert!(c.validate().is_err());
        let c = EncoderConfig { n_heads: 3, ..Default::default() };
        assert!(c.validate().is_err());
        assert_eq!(EncoderConfig::default().default_taps(), vec![2, 4, 6, 7]);
        assert_eq!(EncoderConfig::default().n_patches(), 64);
    }

    #[test]
    fn patch_extraction_matches_manual_oracle() {
        let cfg = tiny();
        let img = Tensor::new(vec![8, 8, 1], (0..64).map(|v| v as f64).collect()).unwrap();
        let patches = extract_patches(&img, &cfg).unwrap();
        assert_eq!(patches.shape(), &[4, 16]);
        for gy in 0..2 {
            for gx in 0..2 {
                let row = patches.row(gy * 2 + gx);
                for y in 0..4 {
                    for x in 0..4 {
                        let pix = ((gy * 4 + y) * 8 + gx * 4 + x) as f64;
                        assert_eq!(row[y * 4 + x], pix);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_projection_yields_raw_patches() {
        let cfg = tiny(); // patch_dim 16 == d_model 16
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = Encoder::new(&cfg, &mut store, &mut rng).unwrap();
        *store.get_mut(enc.patch_embed.weight) = Tensor::eye(16);
        let img = Tensor::new(vec![8, 8, 1], (0..64).map(|v| v as f64 / 64.0).collect()).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let e = enc.patchify(&mut tape, &bound, &img).unwrap();
        assert_eq!(tape.value(e), &extract_patches(&img, &cfg).unwrap());
    }

    #[test]
    fn patchify_rejects_wrong_size() {
        let cfg = tiny();
        assert!(matches!(
            extract_patches(&Tensor::zeros(&[4, 4, 1]), &cfg),
            Err(Error::Dimension { .. })
        ));
    }
}
