//! Fit one regression head with AdamW under the linear decay schedule and
//! print the learning rate and loss as training proceeds.

use ortho_lora::model::ModelShape;
use ortho_lora::optim::linear_decay_lr;
use ortho_lora::{AdamWConfig, AdamWState, Matrix, MultiTaskModel, Rng, TaskBatch, TaskKind, Targets};

fn main() -> ortho_lora::Result<()> {
    let mut rng = Rng::new(11);
    let shape = ModelShape {
        layer_dims: vec![4, 8],
        rank: 2,
        alpha: 4.0,
        sigma_init: 0.02,
        head_sigma: 0.3,
        shared_head_init: true,
    };
    let mut model = MultiTaskModel::build(&shape, &[TaskKind::Regression { outputs: 1 }], &mut rng)?;
    let x = Matrix::gaussian(4, 64, 1.0, &mut rng)?;
    let teacher = Matrix::gaussian(1, 4, 0.5, &mut rng)?;
    let batch = TaskBatch::new(0, x.clone(), Targets::Values(teacher.matmul(&x)?))?;

    let hyper = AdamWConfig {
        lr: 2e-2,
        weight_decay: 1e-3,
        ..AdamWConfig::default()
    };
    let mut state = AdamWState::new(hyper);
    let total = 300;
    for step in 0..total {
        let lr = linear_decay_lr(step, total, hyper.lr)?;
        let (losses, update) = model.joint_gradient(std::slice::from_ref(&batch), None)?;
        state.apply(&mut model, &update, lr)?;
        if step % 50 == 0 {
            println!("step {step:>3}  lr {lr:.5}  loss {:.5}", losses[0]);
        }
    }
    println!("final loss {:.5}", model.task_loss(&batch)?);
    Ok(())
}
