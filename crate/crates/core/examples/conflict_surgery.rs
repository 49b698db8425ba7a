//! Detect a gradient conflict and remove it, first on raw vectors, then on
//! per-task adapter gradients under each projection scope.

use ortho_lora::model::ModelShape;
use ortho_lora::surgery::{conflict_report, cosine, project_pair, surgery};
use ortho_lora::{Matrix, MultiTaskModel, ProjectAgainst, ProjectionScope, Rng, TaskBatch, TaskKind, Targets};

fn main() -> ortho_lora::Result<()> {
    let gi = [1.0, 1.0];
    let gj = [-1.0, 0.0];
    let p = project_pair(&gi, &gj)?;
    println!("cos(gi, gj) = {:.3}; projected gi = {p:?}; cos after = {:.3}", cosine(&gi, &gj).value, cosine(&p, &gj).value);

    // Two regression tasks whose targets pull the shared adapter apart.
    let mut rng = Rng::new(3);
    let shape = ModelShape {
        layer_dims: vec![6, 6, 6],
        rank: 2,
        alpha: 4.0,
        sigma_init: 0.3,
        head_sigma: 0.4,
        shared_head_init: true,
    };
    let kinds = [TaskKind::Regression { outputs: 3 }; 2];
    let mut model = MultiTaskModel::build(&shape, &kinds, &mut rng)?;
    for layer in 0..2 {
        *model.param_mut(ortho_lora::BlockId::b(layer)).expect("B") = Matrix::gaussian(6, 2, 0.3, &mut rng)?;
    }
    let x = Matrix::gaussian(6, 10, 1.0, &mut rng)?;
    let y = Matrix::gaussian(3, 10, 1.0, &mut rng)?;
    let batches = [
        TaskBatch::new(0, x.clone(), Targets::Values(y.clone()))?,
        TaskBatch::new(1, x, Targets::Values(y.scale(-1.0)))?,
    ];
    let grads: Vec<_> = batches.iter().map(|b| model.task_gradient(b)).collect::<Result<_, _>>()?;

    for scope in [ProjectionScope::Flat, ProjectionScope::PerMatrix, ProjectionScope::PerRoleConcat] {
        let before = conflict_report(0, &grads, scope)?;
        let out = surgery(&grads, scope, ProjectAgainst::Original, &mut Rng::new(0))?;
        let after = conflict_report(0, &out.grads, scope)?;
        println!(
            "{:<16} conflicted blocks {} -> {}, projections {}, floats touched {}",
            scope.label(),
            before.conflicts(),
            after.conflicts(),
            out.projections,
            out.floats_touched
        );
        for rec in &before.pairs {
            println!("    {:>5}: cos {:+.3}", rec.block, rec.cosine);
        }
    }
    Ok(())
}
