use physrec_core::dynamics::{builtin_system, SensingMask};
use physrec_core::neuralmr::{
    batch_loss_and_grad, ltc_derivative, ltc_derivative_time_constant_form, predict, Arch, Checkpoint, RecoveryProblem, TrainConfig, Trainer,
};
use physrec_core::odesolve::{solve, uniform_grid, InputSignal, SolverConfig};
use physrec_core::signal::{make_batches, BatchSet, Trace, Window};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar_traces(n: usize, seed: u64) -> Vec<Trace> {
    let (spec, theta) = builtin_system("scalar_decay").unwrap();
    let (k, dt) = (50, 0.1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut u = vec![0.0; k];
            for _ in 0..2 {
                u[rng.random_range(5..k - 5)] += rng.random_range(5.0..15.0);
            }
            let x0 = rng.random_range(0.5..2.0);
            let sig = InputSignal::new(0.0, dt, vec![u.clone()]).unwrap();
            let traj = solve(&spec, &theta, &[x0], &sig, &uniform_grid(0.0, dt, k), &SolverConfig::default(), &SensingMask::full(1)).unwrap();
            Trace::unlabeled(0.0, dt, vec![traj.state(0)], vec![u]).unwrap()
        })
        .collect()
}

fn scalar_problem() -> RecoveryProblem {
    let (spec, _) = builtin_system("scalar_decay").unwrap();
    RecoveryProblem::new(spec, SensingMask::full(1))
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 6,
        lr: 0.01,
        hidden: 8,
        head_hidden: vec![8],
        batch_size: 16,
        substeps: 2,
        init_coeff: 0.5,
        solver: SolverConfig::rk4(4),
        ..TrainConfig::default()
    }
}

fn batches(n: usize, seed: u64) -> BatchSet {
    make_batches(&scalar_traces(n, seed), 16, 50, 0.75, seed).unwrap()
}

#[test]
fn ltc_derivative_forms_agree_on_random_tuples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let h = rng.random_range(-5.0..5.0);
        let f = rng.random_range(0.0..5.0);
        let rho = rng.random_range(0.5..20.0);
        let a = rng.random_range(-5.0..5.0);
        let lhs = ltc_derivative(h, f, rho, a);
        let rhs = ltc_derivative_time_constant_form(h, f, rho, a);
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0), "{h} {f} {rho} {a}: {lhs} vs {rhs}");
    }
}

#[test]
fn composite_gradient_matches_end_to_end_differences() {
    let b = batches(24, 3);
    let mut cfg = small_config();
    cfg.dropout = 0.0;
    cfg.shift_search = true;
    let trainer = Trainer::new(Arch::Ltc, scalar_problem(), &b, cfg).unwrap();
    let problem = trainer.problem.clone();
    let loss_cfg = trainer.loss_config();
    let windows: Vec<&Window> = b.train().next().unwrap().windows.iter().collect();
    let loss_at = |m: &physrec_core::neuralmr::Model| batch_loss_and_grad(m, &problem, &windows, 2, &loss_cfg, None).0;
    let (_, grads, diverged) = batch_loss_and_grad(&trainer.model, &problem, &windows, 2, &loss_cfg, None);
    assert_eq!(diverged, 0);
    let mut model = trainer.model.clone();
    let eps = 1e-5;
    for (ti, g) in grads.iter().enumerate() {
        let mut numeric = vec![0.0; g.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = model.tensors()[ti].data[i];
            model.tensors_mut()[ti].data[i] = orig + eps;
            let plus = loss_at(&model);
            model.tensors_mut()[ti].data[i] = orig - eps;
            let minus = loss_at(&model);
            model.tensors_mut()[ti].data[i] = orig;
            *slot = (plus - minus) / (2.0 * eps);
        }
        let diff: f64 = g.data.iter().zip(&numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
        let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        assert!(diff <= 1e-3 * norm.max(1e-9), "tensor {ti}: |tape - fd| = {diff:e}, |fd| = {norm:e}");
    }
}

#[test]
fn shift_outputs_stay_inside_unit_interval() {
    let b = batches(24, 5);
    let mut cfg = small_config();
    cfg.shift_search = true;
    cfg.lr = 0.05;
    let mut trainer = Trainer::new(Arch::Ltc, scalar_problem(), &b, cfg).unwrap();
    let windows: Vec<&Window> = b.train_windows().collect();
    for _ in 0..6 {
        trainer.train_epoch(&b).unwrap();
        let (_, shifts) = predict(&trainer.model, &trainer.problem, &windows, 2);
        assert!(shifts.iter().flatten().all(|&d| d > 0.0 && d < 1.0));
    }
}

#[test]
fn estimates_respect_sign_constraints() {
    let (spec, theta) = builtin_system("lotka_volterra").unwrap();
    let (k, dt) = (20, 2.5);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let traces: Vec<Trace> = (0..16)
        .map(|_| {
            let u: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..2.0)).collect();
            let x0 = [100.0, rng.random_range(10.0..40.0)];
            let sig = InputSignal::new(0.0, dt, vec![u.clone()]).unwrap();
            let traj = solve(&spec, &theta, &x0, &sig, &uniform_grid(0.0, dt, k), &SolverConfig::rk4(25), &SensingMask::full(2)).unwrap();
            Trace::unlabeled(0.0, dt, vec![traj.state(0), traj.state(1)], vec![u]).unwrap()
        })
        .collect();
    let b = make_batches(&traces, 8, k, 0.75, 0).unwrap();
    let problem = RecoveryProblem::new(spec.clone(), SensingMask::full(2));
    for arch in Arch::ALL {
        let cfg = TrainConfig {
            epochs: 3,
            lr: 0.05,
            ..small_config()
        };
        let mut trainer = Trainer::new(arch, problem.clone(), &b, cfg).unwrap();
        trainer.run(&b).unwrap();
        let res = trainer.finish(&b).unwrap();
        for (v, s) in res.theta_est.values().iter().zip(spec.coeff_signs()) {
            assert!(s.admits(*v), "{arch}: {v} violates {s:?}");
        }
    }
}

#[test]
fn checkpoint_resume_is_bit_identical() {
    let b = batches(24, 9);
    let cfg = small_config();
    let mut straight = Trainer::new(Arch::Ltc, scalar_problem(), &b, cfg.clone()).unwrap();
    straight.run(&b).unwrap();

    let mut first = Trainer::new(Arch::Ltc, scalar_problem(), &b, cfg).unwrap();
    for _ in 0..3 {
        first.train_epoch(&b).unwrap();
    }
    let text = first.checkpoint().to_json();
    let mut resumed = Trainer::from_checkpoint(Checkpoint::from_json(&text).unwrap()).unwrap();
    resumed.run(&b).unwrap();

    let bits = |t: &Trainer| t.model.tensors().iter().flat_map(|x| x.data.iter().map(|v| v.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&straight), bits(&resumed));
    assert_eq!(
        straight.loss_history.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        resumed.loss_history.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn zero_epochs_reports_the_initial_head() {
    let b = batches(24, 11);
    let cfg = TrainConfig {
        epochs: 0,
        ..small_config()
    };
    let trainer = Trainer::new(Arch::Ltc, scalar_problem(), &b, cfg).unwrap();
    let res = trainer.finish(&b).unwrap();
    assert!(res.loss_history.is_empty());
    let test: Vec<&Window> = b.test_windows().collect();
    let (thetas, _) = predict(&trainer.model, &trainer.problem, &test, 2);
    let mean = thetas.iter().map(|t| t[0]).sum::<f64>() / thetas.len() as f64;
    assert!((res.theta_est.values()[0] - mean).abs() < 1e-12);
    assert!((mean - 0.5).abs() < 0.05, "initial head output {mean}");
}

#[test]
fn scalar_loss_moving_average_mostly_decreases() {
    let b = batches(64, 1);
    let cfg = TrainConfig {
        epochs: 200,
        dropout: 0.0,
        batch_size: 32,
        ..small_config()
    };
    let mut trainer = Trainer::new(Arch::Ltc, scalar_problem(), &b, cfg).unwrap();
    trainer.run(&b).unwrap();
    let h = &trainer.loss_history;
    let avg: Vec<f64> = h.windows(20).map(|w| w.iter().sum::<f64>() / 20.0).collect();
    let steps = avg.len() - 1;
    let down = avg.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(down as f64 >= 0.9 * steps as f64, "{down} of {steps} windows non-increasing");
}
