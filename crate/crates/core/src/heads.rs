//! Prediction heads: GAP heads for classification and regression, an FPN
//! decoder for segmentation and a single-box head for detection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::LayerTap;
use crate::error::{Error, Result};
use crate::numkernel::{Tape, Var};
use crate::params::{Bound, Linear, ParamGroup, ParamStore};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Segmentation classes including background.
    pub seg_classes: usize,
    pub cls_classes: usize,
    pub fpn_width: usize,
    pub det_hidden: usize,
    /// Average-pool deeper taps into a coarse-to-fine pyramid before the
    /// top-down pass. Without it every tap stays at the patch grid.
    pub pyramid: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            seg_classes: 3,
            cls_classes: 2,
            fpn_width: 32,
            det_hidden: 64,
            pyramid: true,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seg_classes < 2 || self.cls_classes < 2 {
            return Err(Error::Config("heads need at least two classes".into()));
        }
        if self.fpn_width == 0 || self.det_hidden == 0 {
            return Err(Error::Config("head widths must be positive".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count of all four heads.
    pub fn param_count(&self, d: usize, n_taps: usize) -> usize {
        let cls = self.cls_classes * d + self.cls_classes;
        let reg = d + 1;
        let det = self.det_hidden * d + self.det_hidden + 4 * self.det_hidden + 4;
        let fpn = n_taps * (self.fpn_width * d + self.fpn_width)
            + self.seg_classes * self.fpn_width
            + self.seg_classes;
        cls + reg + det + fpn
    }
}

/// Mean over the patch rows `n_prompts..` of `z`, as `[1×d]`.
pub fn gap_pool(tape: &mut Tape, z: Var, n_prompts: usize) -> Result<Var> {
    let rows = tape.shape(z)[0];
    let patches = if n_prompts == 0 {
        z
    } else {
        tape.slice_rows(z, n_prompts, rows)?
    };
    tape.mean_rows(patches)
}

/// Pooling followed by one linear map.
#[derive(Clone, Copy, Debug)]
pub struct GapHead {
    pub linear: Linear,
}

impl GapHead {
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, z: Var, n_prompts: usize) -> Result<Var> {
        let pooled = gap_pool(tape, z, n_prompts)?;
        self.linear.forward(tape, bound, pooled)
    }
}

/// GAP → linear → GELU → linear → sigmoid, emitting `(cx, cy, w, h)`.
#[derive(Clone, Copy, Debug)]
pub struct DetHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl DetHead {
    /// `z` must carry exactly `n_patches` rows; anything longer means prompts
    /// leaked into the detection branch.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, z: Var, n_patches: usize) -> Result<Var> {
        let rows = tape.shape(z)[0];
        if rows != n_patches {
            return Err(Error::Routing(format!(
                "detection head received {rows} tokens, expected exactly {n_patches}"
            )));
        }
        let pooled = tape.mean_rows(z)?;
        let h = self.fc1.forward(tape, bound, pooled)?;
        let h = tape.gelu(h)?;
        let out = self.fc2.forward(tape, bound, h)?;
        tape.sigmoid(out)
    }
}

/// Lateral 1×1 projections, a nearest-neighbour top-down path and a final
/// per-pixel class projection after bilinear upsampling.
#[derive(Clone, Debug)]
pub struct FpnDecoder {
    pub laterals: Vec<Linear>,
    pub classifier: Linear,
    pub pyramid: bool,
}

impl FpnDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &HeadConfig,
        d: usize,
        n_taps: usize,
        rng: &mut R,
    ) -> Self {
        let laterals = (0..n_taps)
            .map(|i| Linear::new(store, &format!("heads.seg.lateral.{i}"), d, cfg.fpn_width, ParamGroup::Heads, rng))
            .collect();
        let classifier = Linear::new(store, "heads.seg.classifier", cfg.fpn_width, cfg.seg_classes, ParamGroup::Heads, rng);
        FpnDecoder {
            laterals,
            classifier,
            pyramid: cfg.pyramid,
        }
    }

    /// Number of 2× poolings applied to tap `i` (0 = shallowest).
    fn pool_steps(&self, i: usize, grid: usize) -> usize {
        if !self.pyramid {
            return 0;
        }
        let mut steps = 0;
        let mut g = grid;
        while steps < i && g.is_multiple_of(2) && g > 1 {
            g /= 2;
            steps += 1;
        }
        steps
    }

    /// Decodes taps (ordered shallow to deep) into `[(S·S) × classes]` logits.
    pub fn decode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        taps: &[LayerTap],
        n_prompts: usize,
        image_size: usize,
    ) -> Result<Var> {
        if taps.len() < 2 {
            return Err(Error::Config(format!("FPN needs at least two taps, got {}", taps.len())));
        }
        if taps.len() != self.laterals.len() {
            return Err(Error::Config(format!(
                "FPN built for {} taps, got {}",
                self.laterals.len(),
                taps.len()
            )));
        }
        let rows = tape.shape(taps[0].features)[0];
        let l = rows.checked_sub(n_prompts).filter(|&l| l > 0).ok_or_else(|| {
            Error::Config(format!("{rows} tokens cannot hold {n_prompts} prompts"))
        })?;
        let grid = (l as f64).sqrt().round() as usize;
        if grid * grid != l {
            return Err(Error::Config(format!("{l} patch tokens do not form a square grid")));
        }

        // Lateral maps at their pyramid level, shallow to deep.
        let mut levels = Vec::with_capacity(taps.len());
        for (i, tap) in taps.iter().enumerate() {
            let mut f = if n_prompts == 0 {
                tap.features
            } else {
                tape.slice_rows(tap.features, n_prompts, rows)?
            };
            let mut g = grid;
            for _ in 0..self.pool_steps(i, grid) {
                f = tape.avg_pool2(f, g, g)?;
                g /= 2;
            }
            levels.push((self.laterals[i].forward(tape, bound, f)?, g));
        }

        let (mut acc, mut g) = levels.pop().expect("at least two levels");
        while let Some((lat, lg)) = levels.pop() {
            while g < lg {
                acc = tape.upsample_nearest2(acc, g, g)?;
                g *= 2;
            }
            if g != lg {
                return Err(Error::Config(format!("pyramid level {lg} cannot absorb {g}")));
            }
            acc = tape.add(acc, lat)?;
        }
        let up = tape.upsample_bilinear(acc, g, g, image_size, image_size)?;
        self.classifier.forward(tape, bound, up)
    }
}

/// All four heads of the model.
#[derive(Clone, Debug)]
pub struct Heads {
    pub cls: GapHead,
    pub reg: GapHead,
    pub det: DetHead,
    pub seg: FpnDecoder,
}

impl Heads {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &HeadConfig,
        d: usize,
        n_taps: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let h = ParamGroup::Heads;
        let seg = FpnDecoder::new(store, cfg, d, n_taps, rng);
        let cls = GapHead {
            linear: Linear::new(store, "heads.cls", d, cfg.cls_classes, h, rng),
        };
        let reg = GapHead {
            linear: Linear::new(store, "heads.reg", d, 1, h, rng),
        };
        let det = DetHead {
            fc1: Linear::new(store, "heads.det.fc1", d, cfg.det_hidden, h, rng),
            fc2: Linear::new(store, "heads.det.fc2", cfg.det_hidden, 4, h, rng),
        };
        Ok(Heads { cls, reg, det, seg })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gap_of_constant_rows_is_the_row() {
        let mut t = Tape::new();
        let v = [0.5, -1.0, 2.0];
        let z = t.constant(Tensor::new(vec![4, 3], v.repeat(4)).unwrap());
        let p = gap_pool(&mut t, z, 0).unwrap();
        assert_eq!(t.value(p).data(), &v);
    }

    #[test]
    fn gap_ignores_prompt_rows() {
        let mut t = Tape::new();
        let mut data = vec![1e6; 2 * 3];
        data.extend(vec![0.0; 4 * 3]);
        let z = t.constant(Tensor::new(vec![6, 3], data).unwrap());
        let p = gap_pool(&mut t, z, 2).unwrap();
        assert_eq!(t.value(p).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn reg_head_with_zero_weights_returns_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let head = GapHead {
            linear: Linear::new(&mut store, "r", 3, 1, ParamGroup::Heads, &mut rng),
        };
        *store.get_mut(head.linear.weight) = Tensor::zeros(&[1, 3]);
        *store.get_mut(head.linear.bias) = Tensor::scalar(0.37);
        let mut t = Tape::new();
        let b = store.bind_frozen(&mut t);
        let z = t.constant(Tensor::ones(&[4, 3]));
        let y = head.forward(&mut t, &b, z, 0).unwrap();
        assert_eq!(t.value(y).item(), 0.37);
    }

    #[test]
    fn det_head_zero_case_and_routing_violation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let det = DetHead {
            fc1: Linear::new(&mut store, "d1", 3, 5, ParamGroup::Heads, &mut rng),
            fc2: Linear::new(&mut store, "d2", 5, 4, ParamGroup::Heads, &mut rng),
        };
        for id in [det.fc1.weight, det.fc2.weight] {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let mut t = Tape::new();
        let b = store.bind_frozen(&mut t);
        let z = t.constant(Tensor::zeros(&[4, 3]));
        let y = det.forward(&mut t, &b, z, 4).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
        let longer = t.constant(Tensor::zeros(&[6, 3]));
        assert!(matches!(det.forward(&mut t, &b, longer, 4), Err(Error::Routing(_))));
    }

    #[test]
    fn head_param_count_matches_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = HeadConfig::default();
        Heads::new(&mut store, &cfg, 64, 4, &mut rng).unwrap();
        assert_eq!(store.numel(), cfg.param_count(64, 4));
    }
}
