use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::exec::ExecMode;
use crate::model::{ModelConfig, TapSlfModel};
use crate::numkernel::{finite_diff_check, CheckReport, Tape, Tensor, Var};
use crate::params::ParamGroup;
use crate::synthdata;
use crate::task::Task;

use super::loss::task_loss;

/// Finite-difference check of one task loss with respect to every trainable
/// parameter of a freshly built model.
#[derive(Clone, Debug)]
pub struct ModelCheck {
    pub task: Task,
    pub report: CheckReport,
    /// Parameter names aligned with `report.analytic`.
    pub names: Vec<String>,
}

impl ModelCheck {
    /// Largest analytic gradient magnitude among parameters whose name
    /// starts with `prefix`.
    pub fn max_grad(&self, prefix: &str) -> f64 {
        self.names
            .iter()
            .zip(&self.report.analytic)
            .filter(|(n, _)| n.starts_with(prefix))
            .flat_map(|(_, g)| g.data().iter().map(|v| v.abs()))
            .fold(0.0, f64::max)
    }
}

/// The zero-initialised LoRA `B` factors are replaced by random values first,
/// otherwise the gradient reaching every `A` would vanish identically.
pub fn model_gradient_check(
    cfg: &ModelConfig,
    task: Task,
    seed: u64,
    eps: f64,
    tol: f64,
    mode: ExecMode,
) -> Result<ModelCheck> {
    let mut model = TapSlfModel::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let lora_b: Vec<_> = model
        .store()
        .ids()
        .filter(|&id| {
            let e = model.store().entry(id);
            e.group == ParamGroup::Lora && e.name.ends_with(".b")
        })
        .collect();
    for id in lora_b {
        let shape = model.store().get(id).shape().to_vec();
        *model.store_mut().get_mut(id) = Tensor::randn(&shape, 0.3, &mut rng);
    }
    let sample = synthdata::gen_sample(task, seed, cfg.encoder.image_size);
    let ids = model.store().trainable_ids();
    let names = ids.iter().map(|&id| model.store().entry(id).name.clone()).collect();
    let params: Vec<Tensor> = ids.iter().map(|&id| model.store().get(id).clone()).collect();
    let report = finite_diff_check(
        |tape: &mut Tape, vars: &[Var]| {
            let bound = model.store().bind_with(tape, vars)?;
            let out = model.forward(tape, &bound, task, &sample.image)?;
            task_loss(tape, task, out.output, &sample.target)
        },
        &params,
        eps,
        tol,
        mode,
    )?;
    Ok(ModelCheck { task, report, names })
}
