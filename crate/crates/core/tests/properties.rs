mod common;

use common::{dot, norm};
use ortho_lora::optim::linear_decay_lr;
use ortho_lora::report::{fmt_f64, recovery};
use ortho_lora::surgery::{project_pair, surgery};
use ortho_lora::{BlockId, LoraAdapter, Matrix, ProjectAgainst, ProjectionScope, Rng, TaskGradient};
use proptest::prelude::*;

fn vec_pair(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..=max).prop_flat_map(|n| (prop::collection::vec(-10.0..10.0f64, n), prop::collection::vec(-10.0..10.0f64, n)))
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0..3.0f64, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

fn chain() -> impl Strategy<Value = (Matrix, Matrix, Matrix)> {
    (1..6usize, 1..6usize, 1..6usize, 1..6usize).prop_flat_map(|(m, k, l, n)| (matrix(m, k), matrix(k, l), matrix(l, n)))
}

fn gradient(task: usize, values: &[f64], layers: usize, rank: usize, width: usize) -> TaskGradient {
    let mut g = TaskGradient {
        task,
        blocks: Default::default(),
    };
    let mut it = values.iter().copied().cycle();
    for l in 0..layers {
        for (id, (r, c)) in [(BlockId::a(l), (rank, width)), (BlockId::b(l), (width, rank))] {
            g.blocks.insert(id, Matrix::new(r, c, it.by_ref().take(r * c).collect()).unwrap());
        }
    }
    g.blocks.insert(BlockId::head(task), Matrix::new(1, width, it.take(width).collect()).unwrap());
    g
}

proptest! {
    #[test]
    fn matmul_is_associative((a, b, c) in chain()) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        let scale = 1.0 + left.max_abs();
        prop_assert!(left.sub(&right).unwrap().max_abs() <= 1e-12 * scale);
    }

    #[test]
    fn transposed_products_agree((a, b, _) in chain()) {
        let at = a.transpose();
        prop_assert_eq!(at.t_matmul(&b).unwrap(), a.matmul(&b).unwrap());
        let bt = b.transpose();
        prop_assert_eq!(a.matmul_t(&bt).unwrap(), a.matmul(&b).unwrap());
    }

    #[test]
    fn dot_is_symmetric_and_bounded((a, b) in vec_pair(32)) {
        prop_assert_eq!(ortho_lora::dense::dot(&a, &b), ortho_lora::dense::dot(&b, &a));
        let bound = ortho_lora::dense::norm(&a) * ortho_lora::dense::norm(&b);
        prop_assert!(ortho_lora::dense::dot(&a, &b).abs() <= bound * (1.0 + 1e-12) + 1e-300);
    }

    #[test]
    fn projection_removes_conflict((gi, gj) in vec_pair(48)) {
        prop_assume!(norm(&gj) > 1e-6);
        let p = project_pair(&gi, &gj).unwrap();
        if dot(&gi, &gj) < 0.0 {
            prop_assert!(dot(&p, &gj).abs() <= 1e-10 * norm(&gi) * norm(&gj));
            prop_assert!(norm(&p) <= norm(&gi) + 1e-12);
        } else {
            prop_assert_eq!(p, gi);
        }
    }

    #[test]
    fn surgery_clears_pairwise_conflicts_for_two_tasks(
        values in prop::collection::vec(-1.0..1.0f64, 80),
        seed in any::<u64>(),
        scope_ix in 0..3usize,
    ) {
        let scope = [ProjectionScope::Flat, ProjectionScope::PerMatrix, ProjectionScope::PerRoleConcat][scope_ix];
        let g0 = gradient(0, &values[..40], 2, 2, 3);
        let g1 = gradient(1, &values[40..], 2, 2, 3);
        let grads = [g0, g1];
        let out = surgery(&grads, scope, ProjectAgainst::Original, &mut Rng::new(seed)).unwrap();
        // each output is orthogonal to or agrees with the other task's original
        let ids: Vec<BlockId> = grads[0].blocks.keys().copied().collect();
        for grp in scope.groups(&ids) {
            let gather = |g: &TaskGradient| -> Vec<f64> {
                grp.blocks.iter().flat_map(|id| g.blocks[id].data().to_vec()).collect()
            };
            for (i, j) in [(0, 1), (1, 0)] {
                let d = dot(&gather(&out.grads[i]), &gather(&grads[j]));
                prop_assert!(d >= -1e-12, "{} {d}", grp.label);
            }
        }
        // heads pass through untouched
        for (g, o) in grads.iter().zip(&out.grads) {
            prop_assert_eq!(&g.blocks[&BlockId::head(g.task)], &o.blocks[&BlockId::head(g.task)]);
        }
        prop_assert_eq!(out.floats_touched, 2 * 2 * (6 + 6));
    }

    #[test]
    fn adapter_text_round_trip(d in 1..6usize, k in 1..6usize, seed in any::<u64>(), alpha in 0.1..64.0f64) {
        let r = 1 + (seed as usize % d.min(k));
        let mut rng = Rng::new(seed);
        let mut adapter = LoraAdapter::init(d, k, r, 0.5, alpha, &mut rng).unwrap();
        *adapter.b_mut() = Matrix::gaussian(d, r, 1e-3, &mut rng).unwrap();
        prop_assert_eq!(LoraAdapter::from_text(&adapter.to_text()).unwrap(), adapter);
    }

    #[test]
    fn decay_schedule_is_monotone(total in 1..500usize, lr in 1e-6..1.0f64) {
        let mut prev = f64::INFINITY;
        for step in 0..total {
            let v = linear_decay_lr(step, total, lr).unwrap();
            prop_assert!(v <= prev && v > 0.0 && v <= lr);
            prev = v;
        }
    }

    #[test]
    fn recovery_endpoints(s in -100.0..100.0f64, j in -100.0..100.0f64) {
        prop_assume!(s != j);
        prop_assert!((recovery(s, j, s).unwrap() - 100.0).abs() < 1e-9);
        prop_assert_eq!(recovery(s, j, j).unwrap(), 0.0);
    }

    #[test]
    fn floats_survive_seventeen_digits(bits in any::<u64>()) {
        let x = f64::from_bits(bits);
        prop_assume!(x.is_finite());
        prop_assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
    }
}
