//! Estimator and optimizer behavior on quadratic and logistic objectives.

use std::sync::Arc;

use subzero::linalg::SymMatrix;
use subzero::optim::{
    adaptive_run, mezo_bcd_adam_run, mezo_bcd_run, perturb_parameters, softmax, spsa_gradient, update_block_idx,
    zo_sgd_run, AdamConfig, AdaptiveConfig, AdaptiveSelector, BlockOrder, DirectionMode, LrSchedule, MezoBcd,
    OptimConfig, ParamVector, RunLog, Sampler, Termination, ZerothOrderOptimizer,
};
use subzero::perturbation::{sample_low_rank, sample_sparse, BlockPartition, Perturbation, SparseMode};
use subzero::rng::{mix64, seeded, step_seed, GaussianStream};
use subzero::testbed::{
    generate_hessian, heterogeneous_block_hessian, Hessian, HessianSpec, Objective, QuadraticObjective,
};

use rand::Rng;

/// Random PSD `H = AAᵀ/d` built in test code.
fn random_psd(d: usize, seed: u64) -> SymMatrix {
    let mut g = GaussianStream::new(seed);
    let a: Vec<f64> = g.by_ref().take(d * d).collect();
    SymMatrix::from_fn(d, |i, j| (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum::<f64>() / d as f64)
}

fn quad(h: SymMatrix) -> QuadraticObjective {
    QuadraticObjective::new(Arc::new(Hessian::from_matrix(h).unwrap()))
}

fn dense_matvec(h: &SymMatrix, x: &[f64]) -> Vec<f64> {
    (0..h.dim()).map(|i| (0..h.dim()).map(|j| h.get(i, j) * x[j]).sum()).collect()
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn fig1_quadratic() -> QuadraticObjective {
    QuadraticObjective::new(Arc::new(
        generate_hessian(&HessianSpec {
            dim: 256,
            rank: 64,
            num_blocks: 1,
            max_eigenvals: vec![10.0],
            seed: 5,
        })
        .unwrap(),
    ))
}

#[test]
fn projected_gradient_is_exact_on_quadratics() {
    let d = 16;
    let h = random_psd(d, 1);
    let obj = quad(h.clone());
    let theta0: Vec<f64> = GaussianStream::new(2).vector(d);
    let ms = [
        Perturbation::Identity(d),
        sample_low_rank(d, 5, 3).unwrap(),
        sample_sparse(d, 6.0, SparseMode::Fixed, 4).unwrap(),
    ];
    for m in &ms {
        for mu in [1e-6, 1e-3, 1e-1] {
            for k in 0..10u64 {
                let seed = mix64(&[7, k]);
                let mut theta = theta0.clone();
                let pg = spsa_gradient(&obj, &mut theta, m, mu, seed, 0).unwrap();
                let v = m.apply(&GaussianStream::new(seed).vector(d)).unwrap();
                let hv = dense_matvec(&h, &v);
                let oracle = dotp(&theta0, &hv);
                // Relative to the directional scale |θ|·|Hv|, so a direction that is
                // nearly orthogonal to Hθ does not turn round-off into a large ratio.
                let scale = dotp(&theta0, &theta0).sqrt() * dotp(&hv, &hv).sqrt();
                assert!((pg - oracle).abs() <= 1e-9 * scale, "μ={mu}: {pg} vs {oracle}");
                let drift = theta.iter().zip(&theta0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                assert!(drift <= 1e-12, "θ not restored: {drift}");
            }
        }
    }
}

#[test]
fn spsa_is_unbiased_for_the_quadratic_gradient() {
    let d = 6;
    let h = random_psd(d, 10);
    let obj = quad(h.clone());
    let theta: Vec<f64> = GaussianStream::new(11).vector(d);
    let grad = dense_matvec(&h, &theta);
    let n = 50_000;
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for k in 0..n {
        let seed = mix64(&[0xB1A5, k as u64]);
        let mut th = theta.clone();
        let pg = spsa_gradient(&obj, &mut th, &Perturbation::Identity(d), 1e-3, seed, 0).unwrap();
        for (i, u) in GaussianStream::new(seed).take(d).enumerate() {
            let g = pg * u;
            sum[i] += g;
            sq[i] += g * g;
        }
    }
    for i in 0..d {
        let mean = sum[i] / n as f64;
        let se = ((sq[i] / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - grad[i]).abs() <= 3.0 * se, "coordinate {i}: {mean} vs {} (se {se})", grad[i]);
    }
}

#[test]
fn perturbation_roundtrips() {
    let theta: Vec<f64> = GaussianStream::new(1).vector(100);
    let mut x = theta.clone();
    perturb_parameters(&mut x, 0.0, 9);
    assert_eq!(x, theta);
    perturb_parameters(&mut x, 1e-3, 9);
    perturb_parameters(&mut x, -2e-3, 9);
    perturb_parameters(&mut x, 1e-3, 9);
    assert!(x.iter().zip(&theta).all(|(a, b)| (a - b).abs() <= 1e-12));
    let mut y = theta.clone();
    perturb_parameters(&mut y, 1e-3, 4);
    perturb_parameters(&mut y, -1e-3, 4);
    assert!(y.iter().zip(&theta).all(|(a, b)| (a - b).abs() <= 1e-15));
}

#[test]
fn update_reuses_the_perturbation_direction() {
    let obj = fig1_quadratic();
    let theta0: Vec<f64> = GaussianStream::new(3).vector(256);
    let cfg = OptimConfig {
        steps: 1,
        seed: 17,
        lr: LrSchedule::Constant(1e-2),
        ..OptimConfig::default()
    };
    let log = zo_sgd_run(&obj, &theta0, &cfg, Sampler::Identity).unwrap();
    let r = log.records[0];
    assert_eq!(r.step_seed, step_seed(17, 1));
    let u = GaussianStream::new(r.step_seed).vector(256);
    for i in 0..256 {
        let implied = (log.final_params[i] - theta0[i]) / (-1e-2 * r.projected_grad);
        assert!((implied - u[i]).abs() <= 1e-6 * (1.0 + u[i].abs()), "coordinate {i}");
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let obj = fig1_quadratic();
    let theta0: Vec<f64> = GaussianStream::new(8).vector(256);
    let cfg = OptimConfig {
        steps: 100,
        lr: LrSchedule::Constant(0.0),
        ..OptimConfig::default()
    };
    for sampler in [Sampler::Identity, Sampler::LowRank { s: 16 }] {
        let log = zo_sgd_run(&obj, &theta0, &cfg, sampler).unwrap();
        let drift = log.final_params.iter().zip(&theta0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(drift <= 1e-12, "drift {drift}");
    }
}

#[test]
fn single_block_matches_full_space_spsa() {
    let obj = fig1_quadratic();
    let theta0: Vec<f64> = GaussianStream::new(4).vector(256);
    let cfg = OptimConfig {
        steps: 200,
        seed: 5,
        block_order: BlockOrder::FlipFlop,
        ..OptimConfig::default()
    };
    let a = zo_sgd_run(&obj, &theta0, &cfg, Sampler::Identity).unwrap();
    let b = mezo_bcd_run(&obj, &ParamVector::single_block(theta0).unwrap(), &cfg).unwrap();
    for (x, y) in a.records.iter().zip(&b.records) {
        assert_eq!(x.loss_plus.to_bits(), y.loss_plus.to_bits());
        assert_eq!(x.loss_minus.to_bits(), y.loss_minus.to_bits());
        assert_eq!(y.active_block, Some(0));
    }
    assert_eq!(a.final_params, b.final_params);
}

fn assert_isolated(opt: &mut MezoBcd, steps: usize) -> Vec<usize> {
    let blocks = opt.partition().blocks().to_vec();
    let mut visited = Vec::new();
    for _ in 0..steps {
        let before = opt.params().to_vec();
        let r = opt.step();
        let j = r.active_block.expect("block methods always report a block");
        visited.push(j);
        for (k, range) in blocks.iter().enumerate().filter(|(k, _)| *k != j) {
            for i in range.clone() {
                assert_eq!(before[i].to_bits(), opt.params()[i].to_bits(), "step {} block {k}", r.step);
            }
        }
    }
    visited
}

#[test]
fn inactive_blocks_are_bit_identical() {
    let obj = fig1_quadratic();
    let theta = ParamVector::with_equal_blocks(GaussianStream::new(6).vector(256), 8).unwrap();
    for order in [BlockOrder::Ascending, BlockOrder::FlipFlop, BlockOrder::CyclicRandom, BlockOrder::Adaptive] {
        let cfg = OptimConfig {
            steps: 300,
            block_order: order,
            adaptive: AdaptiveConfig {
                warmup: Some(40),
                ..AdaptiveConfig::default()
            },
            ..OptimConfig::default()
        };
        assert_isolated(&mut MezoBcd::new(&obj, &theta, &cfg).unwrap(), 300);
        if order != BlockOrder::Adaptive {
            assert_isolated(&mut MezoBcd::with_adam(&obj, &theta, &cfg).unwrap(), 300);
        }
    }
}

#[test]
fn block_orders_follow_their_schedules() {
    let obj = fig1_quadratic();
    let theta = ParamVector::with_equal_blocks(GaussianStream::new(6).vector(256), 4).unwrap();
    let cfg = OptimConfig {
        steps: 8,
        block_order: BlockOrder::FlipFlop,
        ..OptimConfig::default()
    };
    let log = mezo_bcd_run(&obj, &theta, &cfg).unwrap();
    let blocks: Vec<usize> = log.records.iter().map(|r| r.active_block.unwrap() + 1).collect();
    assert_eq!(blocks, [1, 2, 3, 4, 3, 2, 1, 2]);

    let (n, k) = (4, 25);
    let cfg = OptimConfig {
        steps: n * k,
        block_order: BlockOrder::CyclicRandom,
        seed: 99,
        ..OptimConfig::default()
    };
    let log = mezo_bcd_run(&obj, &theta, &cfg).unwrap();
    for window in log.records.chunks(n) {
        let mut b: Vec<usize> = window.iter().map(|r| r.active_block.unwrap()).collect();
        b.sort_unstable();
        assert_eq!(b, [0, 1, 2, 3]);
    }
    for (t, r) in log.records.iter().enumerate() {
        assert_eq!(r.active_block.unwrap() + 1, update_block_idx(BlockOrder::CyclicRandom, t + 1, n, 99).unwrap());
    }
}

#[test]
fn adam_resets_at_every_interval_and_starts_from_the_raw_estimate() {
    let obj = fig1_quadratic();
    let theta = ParamVector::with_equal_blocks(GaussianStream::new(2).vector(256), 4).unwrap();
    let adam = AdamConfig {
        interval: 5,
        ..AdamConfig::default()
    };
    let eta = 1e-3;
    let cfg = OptimConfig {
        steps: 60,
        lr: LrSchedule::Constant(eta),
        block_order: BlockOrder::CyclicRandom,
        adam: adam.clone(),
        ..OptimConfig::default()
    };
    let mut opt = MezoBcd::with_adam(&obj, &theta, &cfg).unwrap();
    for t in 1..=60usize {
        let before = opt.params().to_vec();
        let r = opt.step();
        let state = opt.adam_state().unwrap();
        assert_eq!(state.local_step(), (t - 1) % 5 + 1);
        let range = opt.partition().block(r.active_block.unwrap());
        let g: Vec<f64> = GaussianStream::new(r.step_seed)
            .take(range.len())
            .map(|u| r.projected_grad * u)
            .collect();
        if state.local_step() == 1 {
            for (i, gi) in g.iter().enumerate() {
                assert!((state.m()[i] - (1.0 - adam.beta1) * gi).abs() <= 1e-15 * gi.abs().max(1.0));
                let x = range.start + i;
                let step = opt.params()[x] - before[x];
                let want = -eta * gi / (gi.abs() + adam.eps);
                assert!((step - want).abs() <= 1e-12, "t={t} i={i}: {step} vs {want}");
            }
        }
    }
}

#[test]
fn zero_betas_give_sign_normalized_steps() {
    let obj = fig1_quadratic();
    let theta = ParamVector::with_equal_blocks(GaussianStream::new(2).vector(256), 2).unwrap();
    let eta = 1e-3;
    let cfg = OptimConfig {
        steps: 20,
        lr: LrSchedule::Constant(eta),
        block_order: BlockOrder::Ascending,
        adam: AdamConfig {
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-8,
            interval: 7,
        },
        ..OptimConfig::default()
    };
    let mut opt = MezoBcd::with_adam(&obj, &theta, &cfg).unwrap();
    for _ in 0..20 {
        let before = opt.params().to_vec();
        let r = opt.step();
        let range = opt.partition().block(r.active_block.unwrap());
        for (i, u) in GaussianStream::new(r.step_seed).take(range.len()).enumerate() {
            let g = r.projected_grad * u;
            let x = range.start + i;
            let want = -eta * g / (g.abs() + 1e-8);
            assert!((opt.params()[x] - before[x] - want).abs() <= 1e-12);
        }
    }
}

#[test]
fn adaptive_probabilities_and_ema_locality() {
    let obj = fig1_quadratic();
    let n = 4;
    let theta = ParamVector::with_equal_blocks(GaussianStream::new(1).vector(256), n).unwrap();
    let cfg = OptimConfig {
        steps: 400,
        block_order: BlockOrder::Adaptive,
        ..OptimConfig::default()
    };
    let mut opt = MezoBcd::new(&obj, &theta, &cfg).unwrap();
    assert_eq!(opt.adaptive_selector().unwrap().warmup(), 10 * n);
    for _ in 0..400 {
        let before = opt.adaptive_selector().unwrap().ema().to_vec();
        let r = opt.step();
        let sel = opt.adaptive_selector().unwrap();
        let j = r.active_block.unwrap();
        for k in (0..n).filter(|&k| k != j) {
            assert_eq!(before[k].to_bits(), sel.ema()[k].to_bits());
        }
        let want = 0.1 * r.projected_grad.abs() + 0.9 * before[j];
        assert!((sel.ema()[j] - want).abs() <= 1e-12 * want.max(1.0));
        let p = sel.probabilities();
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
    assert_eq!(softmax(&[2.0; 5], 1.0), vec![0.2; 5]);
}

#[test]
fn flat_temperature_samples_uniformly() {
    let n = 4;
    let cfg = AdaptiveConfig {
        tau: 1e9,
        warmup: Some(0),
        ..AdaptiveConfig::default()
    };
    let mut sel = AdaptiveSelector::new(&cfg, n, 3).unwrap();
    let mut rng = seeded(5);
    for j in 0..n {
        sel.observe(j, rng.gen_range(0.0..100.0));
    }
    let mut counts = [0usize; 4];
    for t in 1..=10_000 {
        counts[sel.choose(t)] += 1;
    }
    for c in counts {
        assert!((c as f64 / 10_000.0 - 0.25).abs() <= 0.02, "{counts:?}");
    }
}

/// Fraction of 40 seeds whose blocks in `window` cover all `n` blocks.
fn coverage(obj: &QuadraticObjective, n: usize, tau: f64, window: impl Fn(&RunLog) -> Vec<usize>) -> f64 {
    let theta = ParamVector::with_equal_blocks(GaussianStream::new(1).vector(256), n).unwrap();
    let covered = (0..40u64)
        .filter(|&seed| {
            let cfg = OptimConfig {
                steps: 30 * n,
                seed,
                block_order: BlockOrder::Adaptive,
                adaptive: AdaptiveConfig {
                    tau,
                    ..AdaptiveConfig::default()
                },
                ..OptimConfig::default()
            };
            let log = adaptive_run(obj, &theta, &cfg).unwrap();
            assert_eq!(log.termination, Termination::Completed);
            let mut seen = vec![false; n];
            for j in window(&log) {
                seen[j] = true;
            }
            seen.iter().all(|&s| s)
        })
        .count();
    covered as f64 / 40.0
}

#[test]
fn adaptive_selection_covers_every_block() {
    let obj = fig1_quadratic();
    let n = 8;
    let first = |log: &RunLog| log.records[..20 * n].iter().map(|r| r.active_block.unwrap()).collect();
    assert!(coverage(&obj, n, 1.0, first) >= 0.95);
    // After warmup, τ must be on the scale of |ĝ| (tens here) for the
    // softmax not to lock onto one block.
    let after = |log: &RunLog| log.records[10 * n..].iter().map(|r| r.active_block.unwrap()).collect();
    assert!(coverage(&obj, n, 10.0, after) >= 0.95);
}

#[test]
fn adaptive_warmup_longer_than_budget_is_rejected() {
    let obj = fig1_quadratic();
    let theta = ParamVector::with_equal_blocks(vec![0.0; 256], 8).unwrap();
    let cfg = OptimConfig {
        steps: 50,
        ..OptimConfig::default()
    };
    assert!(adaptive_run(&obj, &theta, &cfg).is_err());
}

#[test]
fn loss_falls_below_the_stability_threshold() {
    let obj = fig1_quadratic();
    let theta0 = GaussianStream::new(12).vector(256);
    let cfg = OptimConfig {
        steps: 3000,
        lr: LrSchedule::Constant(1e-3),
        ..OptimConfig::default()
    };
    let log = zo_sgd_run(&obj, &theta0, &cfg, Sampler::Identity).unwrap();
    let means: Vec<f64> = log
        .records
        .chunks(100)
        .map(|c| c.iter().map(|r| r.loss()).sum::<f64>() / c.len() as f64)
        .collect();
    assert!(means.windows(2).all(|w| w[1] <= w[0]), "{means:?}");
}

fn mean_final(logs: &[RunLog]) -> f64 {
    logs.iter().map(|l| l.final_loss().unwrap()).sum::<f64>() / logs.len() as f64
}

#[test]
fn block_descent_matches_block_sparse_spsa() {
    let h = Arc::new(heterogeneous_block_hessian(1024, 16, 16, &[10.0, 40.0, 70.0, 100.0], 0).unwrap());
    let obj = QuadraticObjective::new(h);
    let part = Arc::new(BlockPartition::equal(1024, 16).unwrap());
    let (mut bcd, mut sparse) = (Vec::new(), Vec::new());
    for seed in 0..5u64 {
        let theta0 = GaussianStream::new(mix64(&[seed, 0x1417])).vector(1024);
        let cfg = OptimConfig {
            steps: 5000,
            lr: LrSchedule::Constant(1e-4),
            seed,
            block_order: BlockOrder::CyclicRandom,
            ..OptimConfig::default()
        };
        let p = ParamVector::new(theta0.clone(), Arc::clone(&part)).unwrap();
        bcd.push(mezo_bcd_run(&obj, &p, &cfg).unwrap());
        sparse.push(zo_sgd_run(&obj, &theta0, &cfg, Sampler::BlockSparse(Arc::clone(&part))).unwrap());
    }
    let (a, b) = (mean_final(&bcd), mean_final(&sparse));
    assert!((a / b - 1.0).abs() <= 0.10, "mezo-bcd {a} vs block-sparse zo-sgd {b}");
}

#[test]
fn block_adam_brings_no_meaningful_improvement() {
    let obj = fig1_quadratic();
    let part = Arc::new(BlockPartition::equal(256, 4).unwrap());
    let best = |rates: &[f64], adam: bool| {
        rates
            .iter()
            .map(|&lr| {
                let logs: Vec<RunLog> = (0..5u64)
                    .map(|seed| {
                        let p = ParamVector::new(GaussianStream::new(mix64(&[seed, 0x1417])).vector(256), Arc::clone(&part))
                            .unwrap();
                        let cfg = OptimConfig {
                            steps: 5000,
                            lr: LrSchedule::Constant(lr),
                            seed,
                            block_order: BlockOrder::CyclicRandom,
                            adam: AdamConfig {
                                interval: 50,
                                ..AdamConfig::default()
                            },
                            ..OptimConfig::default()
                        };
                        if adam { mezo_bcd_adam_run(&obj, &p, &cfg) } else { mezo_bcd_run(&obj, &p, &cfg) }.unwrap()
                    })
                    .collect();
                mean_final(&logs)
            })
            .fold(f64::INFINITY, f64::min)
    };
    let sgd = best(&[1e-3, 3e-3], false);
    let adam = best(&[3e-3, 1e-2, 3e-2], true);
    assert!(adam >= 0.5 * sgd, "block Adam {adam} vs plain {sgd}");
}

#[test]
fn divergence_and_non_finite_losses_stop_the_run() {
    let obj = fig1_quadratic();
    let theta0 = GaussianStream::new(1).vector(256);
    let cfg = OptimConfig {
        steps: 1000,
        lr: LrSchedule::Constant(1.0),
        ..OptimConfig::default()
    };
    let log = zo_sgd_run(&obj, &theta0, &cfg, Sampler::Identity).unwrap();
    assert!(matches!(log.termination, Termination::Diverged { .. } | Termination::NonFinite { .. }));
    assert_eq!(log.len(), log.records.last().unwrap().step);

    struct Cliff;
    impl Objective for Cliff {
        fn dim(&self) -> usize {
            2
        }
        fn loss(&self, theta: &[f64], _: u64) -> f64 {
            if theta[0] > 0.5 {
                f64::NAN
            } else {
                1.0 - theta[0]
            }
        }
        fn id(&self) -> String {
            "cliff".into()
        }
    }
    let cfg = OptimConfig {
        steps: 10_000,
        lr: LrSchedule::Constant(0.05),
        ..OptimConfig::default()
    };
    let log = zo_sgd_run(&Cliff, &[0.0, 0.0], &cfg, Sampler::Identity).unwrap();
    let Termination::NonFinite { step } = log.termination else {
        panic!("expected a non-finite stop, got {}", log.termination)
    };
    assert_eq!(log.len(), step);
}

#[test]
fn runs_are_deterministic_and_logged_in_order() {
    let obj = fig1_quadratic();
    let theta0 = GaussianStream::new(1).vector(256);
    let cfg = OptimConfig {
        steps: 50,
        seed: 77,
        rho_every: 5,
        direction: DirectionMode::Subspace,
        ..OptimConfig::default()
    };
    let a = zo_sgd_run(&obj, &theta0, &cfg, Sampler::LowRank { s: 8 }).unwrap();
    let b = zo_sgd_run(&obj, &theta0, &cfg, Sampler::LowRank { s: 8 }).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.final_params, b.final_params);
    assert!(a.records.iter().enumerate().all(|(i, r)| r.step == i + 1));
    assert_eq!(a.meta("direction"), Some("subspace"));
    assert_eq!(a.records.iter().filter(|r| r.rho.is_some()).count(), 10);

    let mut csv = Vec::new();
    a.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,loss_plus,loss_minus,projected_grad,active_block,step_seed"));
    assert_eq!(lines.count(), 50);
    assert!(text.lines().nth(1).unwrap().contains(",-1,"));
}

#[test]
fn inverse_time_schedule_scales_the_step() {
    assert_eq!(LrSchedule::InverseTime(2.0).rate(4), 0.5);
    assert_eq!(LrSchedule::Constant(0.1).rate(1000), 0.1);
}
