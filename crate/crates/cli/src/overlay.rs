use std::path::Path;

use anyhow::Context;
use tapslf::model::Prediction;
use tapslf::synthdata::{self, to_u8};
use tapslf::training::model_from_checkpoint;
use tapslf::Task;

use crate::{load_checkpoint, usage};

const GREEN: [f64; 3] = [0.0, 255.0, 0.0];
const RED: [f64; 3] = [255.0, 0.0, 0.0];

/// Interleaved RGB bytes: grey input, class 1 blended 50% with green and
/// class 2 blended 50% with red. Background pixels keep their grey level.
pub fn blend(image: &[f64], mask: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(image.len() * 3);
    for (&v, &c) in image.iter().zip(mask) {
        let g = to_u8(v);
        let tint = match c {
            1 => Some(GREEN),
            2 => Some(RED),
            _ => None,
        };
        match tint {
            None => out.extend([g, g, g]),
            Some(t) => out.extend(t.map(|ch| (0.5 * g as f64 + 0.5 * ch).round() as u8)),
        }
    }
    out
}

/// Renders the predicted segmentation of synthetic sample `seed` over its
/// input and writes a binary PPM of the same size to `out`.
pub fn cmd_overlay(checkpoint: &Path, seed: u64, out: &Path) -> anyhow::Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let model = model_from_checkpoint(&ck).map_err(|e| usage(format!("{}: {e}", checkpoint.display())))?;
    let size = model.config().encoder.image_size;
    if model.config().encoder.channels != 1 {
        return Err(usage("overlay needs a single-channel model"));
    }
    let sample = synthdata::gen_sample(Task::Seg, seed, size);
    let Prediction::Seg { mask } = model.predict(Task::Seg, &sample.image)? else {
        unreachable!("segmentation prediction");
    };
    let rgb = blend(sample.image.data(), &mask);
    synthdata::write_pnm(out, &rgb, size, 3).with_context(|| format!("cannot write overlay {}", out.display()))?;
    println!("overlay of sample {seed} written to {}", out.display());
    Ok(())
}
