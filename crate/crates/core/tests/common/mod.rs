#![allow(dead_code)]

pub mod ops;

#[allow(unused_imports)]
pub use ops::noise;

use dietcp::diet::{smoothed_xent, DietHead};
use dietcp::tensor::{grad_check, Graph, Tensor, Var};
use dietcp::vit::{BackboneParams, ViTConfig};
use dietcp::Result;

pub fn one_block_config() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 3,
        dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        pos_grid: 2,
    }
}

/// Label-smoothed datum-index loss with parameter `which` taken from `x`
/// (index `params.len()` is the head) and everything else constant.
pub fn diet_loss_wrt(
    backbone: &BackboneParams,
    head: &DietHead,
    images: &Tensor<f32>,
    targets: &[usize],
    epsilon: f64,
    which: usize,
    g: &mut Graph<f32>,
    x: Var,
) -> Result<Var> {
    let vars: Vec<Var> = backbone
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| if i == which { x } else { g.constant(p.value.clone()) })
        .collect();
    let w = if which == vars.len() {
        x
    } else {
        g.constant(head.weight.value.clone())
    };
    let out = backbone.forward(g, &vars, images)?;
    let logits = g.matmul_nt(out.cls, w)?;
    smoothed_xent(g, logits, targets, epsilon)
}

/// Worst relative error of the DIET loss gradient over every backbone
/// parameter and the head.
pub fn diet_grad_check(backbone: &BackboneParams, head: &DietHead, images: &Tensor<f32>, targets: &[usize], h: f32) -> Result<(f32, String)> {
    let mut worst = (0.0f32, String::new());
    let n = backbone.params().len();
    for which in 0..=n {
        let (value, name) = if which == n {
            (&head.weight.value, head.weight.name.clone())
        } else {
            (&backbone.params()[which].value, backbone.params()[which].name.clone())
        };
        let err = grad_check(|g, x| diet_loss_wrt(backbone, head, images, targets, 0.3, which, g, x), value, h)?;
        if err > worst.0 {
            worst = (err, name);
        }
    }
    Ok(worst)
}

/// Four-block, 16-pixel experiment that runs in seconds.
pub fn small_experiment() -> dietcp::experiment::ExperimentConfig {
    let mut cfg = dietcp::experiment::ExperimentConfig::default();
    cfg.vit = ViTConfig {
        image_size: 16,
        patch_size: 4,
        channels: 3,
        dim: 32,
        depth: 4,
        heads: 4,
        mlp_ratio: 2,
        pos_grid: 4,
    };
    cfg.augment.output_size = 16;
    cfg.dataset.synthetic_train_size = 160;
    cfg.dataset.synthetic_val_size = 96;
    cfg.warm_start.epochs = 2;
    cfg.warm_start.samples = 64;
    cfg.optim.total_epochs = 5;
    cfg.eval.label_budget = 128;
    cfg.eval.knn_k = 5;
    cfg.eval.probe.iterations = 100;
    cfg.experiment.cp_subset_size = 64;
    cfg.experiment.seeds = vec![3];
    cfg
}
