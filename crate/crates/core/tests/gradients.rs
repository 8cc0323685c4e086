use std::time::Instant;

use tapslf::adapters::count_trainable;
use tapslf::numkernel::{kernel_suite, SUITE_OPS};
use tapslf::training::model_gradient_check;
use tapslf::{ExecMode, ModelConfig, TapSlfModel, Task};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

#[test]
fn every_kernel_op_passes_on_twenty_instances() {
    let start = Instant::now();
    let checks = kernel_suite(20, 2024, EPS, TOL, ExecMode::Parallel).unwrap();
    assert_eq!(checks.len(), SUITE_OPS.len());
    for c in &checks {
        assert_eq!(c.instances, 20);
        assert!(c.passed, "{} max rel error {:e}", c.op, c.max_rel_error);
    }
    eprintln!("kernel suite: {:?}", start.elapsed());
}

#[test]
fn micro_model_gradients_reach_prompts_and_lora() {
    let cfg = ModelConfig::micro();
    let total = count_trainable(&TapSlfModel::new(&cfg, 0).unwrap()).total();
    assert!(total <= 5000, "micro model has {total} parameters");
    for task in Task::ALL {
        let check = model_gradient_check(&cfg, task, 11, EPS, TOL, ExecMode::Parallel).unwrap();
        assert!(check.report.passed, "{task}: {:e}", check.report.max_rel_error);
        assert!(check.max_grad("adapters.lora") > 0.0, "{task}: no LoRA gradient");
        for factor in [".a", ".b"] {
            let hit = check
                .names
                .iter()
                .zip(&check.report.analytic)
                .any(|(n, g)| n.ends_with(factor) && n.starts_with("adapters.lora") && g.norm() > 0.0);
            assert!(hit, "{task}: LoRA {factor} factors got no gradient");
        }
        let prompt = check.max_grad(&format!("adapters.prompt.{task}"));
        if task == Task::Det {
            assert_eq!(check.max_grad("adapters.prompt"), 0.0);
        } else {
            assert!(prompt > 0.0, "{task}: prompt got no gradient");
        }
    }
}
