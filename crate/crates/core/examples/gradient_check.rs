//! Compare analytic task gradients against central finite differences on
//! every trainable block of a small two-layer model.

use ortho_lora::model::{fd_gradient, ModelShape};
use ortho_lora::{Matrix, MultiTaskModel, Rng, TaskBatch, TaskKind, Targets};

fn main() -> ortho_lora::Result<()> {
    let mut rng = Rng::new(7);
    let shape = ModelShape {
        layer_dims: vec![5, 6, 4],
        rank: 2,
        alpha: 4.0,
        sigma_init: 0.3,
        head_sigma: 0.5,
        shared_head_init: false,
    };
    let kinds = [TaskKind::Classification { classes: 3 }, TaskKind::Regression { outputs: 2 }];
    let mut model = MultiTaskModel::build(&shape, &kinds, &mut rng)?;
    // B starts at zero, which hides half the chain rule; give it values.
    for id in model.adapter_block_ids() {
        let p = model.param_mut(id).expect("adapter block");
        *p = Matrix::gaussian(p.rows(), p.cols(), 0.3, &mut rng)?;
    }
    let x = Matrix::gaussian(5, 7, 1.0, &mut rng)?;
    let batches = [
        TaskBatch::new(0, x.clone(), Targets::Classes(vec![0, 1, 2, 0, 1, 2, 0]))?,
        TaskBatch::new(1, x, Targets::Values(Matrix::gaussian(2, 7, 1.0, &mut rng)?))?,
    ];

    for batch in &batches {
        let g = model.task_gradient(batch)?;
        for (&id, analytic) in &g.blocks {
            let numeric = fd_gradient(&model, batch, id, 1e-5)?;
            let rel = analytic.sub(&numeric)?.frob_norm() / numeric.frob_norm().max(1e-12);
            println!("task {} {:>6}: relative error {rel:.2e}", batch.task, id.to_string());
        }
    }
    Ok(())
}
