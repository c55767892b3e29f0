use atpinn_core::pde::{burgers_problem, poisson_problem};
use atpinn_core::sampling::{uniform, SampleSet};
use atpinn_core::training::{
    loss_and_grad, run_iterative_training, run_iterative_training_with, GenerationContext, Generated,
    SampleGenerator, SaisConfig,
};
use atpinn_core::{AttackConfig, MlpParams, Result, Strategy, TrainConfig};
use proptest::prelude::*;

fn config(strategy: Strategy, seed: u64, samples: Vec<usize>) -> TrainConfig {
    TrainConfig {
        lambda_boundary: 1.0,
        learning_rate: 1e-3,
        epochs: vec![3, 2],
        samples,
        n_boundary: 8,
        iterations: 3,
        strategy,
        attack: Some(AttackConfig { epsilon: 0.1, eta: 0.02, steps: 2, revisit: 1.0, random_init: true }),
        sais: SaisConfig { n_per_round: 20, p0: 0.1, max_rounds: 3 },
        rar_factor: 2.0,
        baseline_epochs: 4,
        initial_time_window: None,
        hidden_layers: 2,
        width: 5,
        seed,
    }
}

/// Ignores the strategy entirely and returns pre-generated points.
struct Fixed(Vec<SampleSet>);

impl SampleGenerator for Fixed {
    fn generate(&mut self, ctx: &GenerationContext<'_>) -> Result<Generated> {
        Ok(Generated { samples: self.0[ctx.k].clone(), candidates: None, pgd_warnings: 0 })
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn loss_is_non_negative_and_its_gradient_matches_fd(
        seed in any::<u64>(), pts in 1usize..12, lambda in 0.1f64..300.0,
        picks in prop::collection::vec(any::<prop::sample::Index>(), 20),
    ) {
        let p = burgers_problem();
        let params = MlpParams::init(&[2, 5, 5, 1], seed).unwrap();
        let x = uniform(pts, p.domain(), seed).unwrap();
        let b = p.boundary_points(6, &mut atpinn_core::sampling::seeded_rng(seed)).unwrap();
        let (loss, grads) = loss_and_grad(&params, &p, x.points(), Some(&b), lambda).unwrap();
        prop_assert!(loss >= 0.0);
        let flat_grad: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
        let flat = params.to_flat();
        let at = |f: &[f64]| {
            let mut q = params.clone();
            q.set_flat(f).unwrap();
            loss_and_grad(&q, &p, x.points(), Some(&b), lambda).unwrap().0
        };
        let h = 1e-6;
        for pick in picks {
            let j = pick.index(flat.len());
            let (mut a, mut c) = (flat.clone(), flat.clone());
            a[j] += h;
            c[j] -= h;
            let fd = (at(&a) - at(&c)) / (2.0 * h);
            prop_assert!((flat_grad[j] - fd).abs() <= 1e-4 * fd.abs().max(1e-3 * loss.max(1.0)),
                "param {}: {} vs {}", j, flat_grad[j], fd);
        }
    }

    #[test]
    fn dataset_size_is_the_running_sum(mut n in prop::collection::vec(1usize..8, 1..4), seed in 0u64..1000) {
        // AT-PINN cannot select more points than it attacks; keep N_0 largest
        n.sort_unstable_by(|a, b| b.cmp(a));
        let p = poisson_problem();
        for strategy in [Strategy::Uniform, Strategy::Rar, Strategy::AtPinn] {
            let mut c = config(strategy, seed, n.clone());
            c.epochs = vec![1];
            let out = run_iterative_training(&p, &c, &mut |_, _, _| Ok(())).unwrap();
            let mut total = 0;
            for (info, k) in out.iterations.iter().zip(0..) {
                total += c.samples_at(k);
                prop_assert_eq!(info.dataset_size, total);
            }
            prop_assert_eq!(out.history.iter().map(SampleSet::len).sum::<usize>(), total);
        }
    }
}

#[test]
fn strategies_are_isolated_from_training() {
    let p = poisson_problem();
    let fixed: Vec<SampleSet> = (0..4).map(|k| uniform(6, p.domain(), 100 + k).unwrap().with_tag(k as usize)).collect();
    let runs: Vec<_> = [Strategy::Uniform, Strategy::Rar, Strategy::Sais, Strategy::AtPinn]
        .into_iter()
        .map(|s| {
            let c = config(s, 5, vec![10, 6]);
            run_iterative_training_with(&p, &c, &mut Fixed(fixed.clone()), &mut |_, _, _| Ok(())).unwrap()
        })
        .collect();
    for r in &runs[1..] {
        assert_eq!(r.state.loss_history, runs[0].state.loss_history);
        assert_eq!(r.state.params.to_flat(), runs[0].state.params.to_flat());
    }
}

#[test]
fn fixed_seed_gives_identical_loss_history() {
    let p = burgers_problem();
    for s in [Strategy::Sais, Strategy::AtPinn, Strategy::LhsBaseline] {
        let c = config(s, 9, vec![10, 5]);
        let a = run_iterative_training(&p, &c, &mut |_, _, _| Ok(())).unwrap();
        let b = run_iterative_training(&p, &c, &mut |_, _, _| Ok(())).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.state.loss_history), bits(&b.state.loss_history), "{s}");
    }
}
