//! Statistical checks of the perturbation ensembles against closed-form oracles.

use std::sync::Arc;

use subzero::linalg::{eig_sym, SymMatrix};
use subzero::perturbation::{
    alignment_rho, block_tail_probability, controlled_projection, expected_rho, rho_distribution,
    sample_block_sparse, sample_low_rank, sample_sparse, BlockPartition, ControlledSampler, Ensemble, Perturbation,
    SparseMode,
};
use subzero::rng::{mix64, seeded, GaussianStream};
use subzero::testbed::{generate_hessian, heterogeneous_block_hessian, Hessian, HessianSpec};

use rand::Rng;

/// Entrywise mean and standard error of `draws` dense `d×d` matrices.
fn entry_stats(d: usize, draws: usize, mut sample: impl FnMut(u64) -> Perturbation) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; d * d];
    let mut sq = vec![0.0; d * d];
    for k in 0..draws {
        let m = sample(k as u64).to_dense();
        for (i, v) in m.as_slice().iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
    }
    let n = draws as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let se = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| ((q / n - m * m).max(0.0) * n / (n - 1.0) / n).sqrt())
        .collect();
    (mean, se)
}

/// Entrywise z-scores of `E[M] − (s/d)I`, checked as a family: an unbiased
/// ensemble puts about 0.27% of entries beyond 3 SE and none beyond 4 SE.
/// Off-diagonal entries of masks are exactly zero and checked as such.
fn assert_mean_is_scaled_identity(name: &str, d: usize, s: f64, mean: &[f64], se: &[f64]) {
    let mut beyond3 = 0;
    let mut z2 = Vec::new();
    for i in 0..d {
        for j in 0..d {
            let target = if i == j { s / d as f64 } else { 0.0 };
            let k = i * d + j;
            let dev = (mean[k] - target).abs();
            if se[k] == 0.0 {
                assert!(dev <= 1e-12, "{name}: constant entry ({i},{j}) = {} vs {target}", mean[k]);
                continue;
            }
            let z = dev / se[k];
            assert!(z <= 4.0, "{name}: E[M]({i},{j}) = {} vs {target}, {z:.2} SE", mean[k]);
            beyond3 += usize::from(z > 3.0);
            z2.push(z * z);
        }
    }
    assert!(beyond3 as f64 <= 0.01 * (d * d) as f64, "{name}: {beyond3} entries beyond 3 SE");
    // Mean squared z-score ~ χ²ₙ/n: mean 1, sd √(2/n); allow 4 sd.
    let n = z2.len() as f64;
    let msq = z2.iter().sum::<f64>() / n;
    let band = 4.0 * (2.0 / n).sqrt();
    assert!((msq - 1.0).abs() <= band, "{name}: mean squared z-score {msq} over {n} entries");
}

#[test]
fn low_rank_mean_is_scaled_identity() {
    let (d, s) = (16, 4);
    let (mean, se) = entry_stats(d, 2000, |k| sample_low_rank(d, s, mix64(&[11, k])).unwrap());
    assert_mean_is_scaled_identity("low-rank", d, s as f64, &mean, &se);
}

#[test]
fn sparse_means_are_scaled_identity() {
    let (d, s) = (16, 4.0);
    for mode in [SparseMode::Fixed, SparseMode::Bernoulli] {
        let (mean, se) = entry_stats(d, 2000, |k| sample_sparse(d, s, mode, mix64(&[12, k])).unwrap());
        assert_mean_is_scaled_identity("sparse", d, s, &mean, &se);
    }
}

#[test]
fn block_sparse_mean_is_scaled_identity() {
    let d = 16;
    let p = Arc::new(BlockPartition::with_block_size(d, 4).unwrap());
    let (mean, se) = entry_stats(d, 2000, |k| sample_block_sparse(&p, mix64(&[13, k])).unwrap());
    assert_mean_is_scaled_identity("block-sparse", d, 4.0, &mean, &se);
}

#[test]
fn bernoulli_cardinality_within_three_sigma_for_most_seeds() {
    let (d, s) = (1000, 100.0);
    let sigma = (100.0f64 * 0.9).sqrt();
    let inside = (0..200u64)
        .filter(|&seed| match sample_sparse(d, s, SparseMode::Bernoulli, seed).unwrap() {
            Perturbation::SparseMask { cardinality, .. } => (cardinality as f64 - 100.0).abs() <= 3.0 * sigma,
            _ => false,
        })
        .count();
    assert!(inside >= 198, "{inside}/200 seeds inside 3σ");
}

/// Random diagonal PSD Hessian with an equal-size partition.
fn random_block_problem(seed: u64) -> (Hessian, BlockPartition, f64) {
    let mut rng = seeded(seed);
    let block = rng.gen_range(1..=4);
    let n = rng.gen_range(2..=8);
    let diag: Vec<f64> = (0..block * n)
        .map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..5.0) })
        .collect();
    let mut diag = diag;
    diag[0] = 5.0;
    let h = Hessian::from_matrix(SymMatrix::from_diag(&diag)).unwrap();
    let rho_hat = rng.gen_range(-0.2..block as f64);
    (h, BlockPartition::with_block_size(block * n, block).unwrap(), rho_hat)
}

#[test]
fn block_tail_matches_monte_carlo() {
    for case in 0..5u64 {
        let (h, partition, rho_hat) = random_block_problem(mix64(&[0x7A11, case]));
        let exact = block_tail_probability(&h, &partition, rho_hat).unwrap().value();
        let p = Arc::new(partition);
        let lambda = h.lambda_max();
        let hits = (0..20_000u64)
            .filter(|&k| {
                let m = sample_block_sparse(&p, mix64(&[case, k])).unwrap();
                alignment_rho(&m, &h).unwrap() * lambda >= rho_hat * lambda
            })
            .count();
        let freq = hits as f64 / 20_000.0;
        assert!((freq - exact).abs() <= 0.01, "case {case}: {freq} vs {exact}");
    }
}

#[test]
fn tail_ties_count_as_qualifying() {
    let h = Hessian::from_matrix(SymMatrix::from_diag(&[2.0, 2.0, 1.0, 1.0])).unwrap();
    let p = BlockPartition::with_block_size(4, 2).unwrap();
    assert_eq!(block_tail_probability(&h, &p, 2.0).unwrap().value(), 0.5);
    assert_eq!(block_tail_probability(&h, &p, 0.0).unwrap().value(), 1.0);
}

fn fig1_hessian() -> Hessian {
    generate_hessian(&HessianSpec {
        dim: 256,
        rank: 64,
        num_blocks: 1,
        max_eigenvals: vec![10.0],
        seed: 3,
    })
    .unwrap()
}

#[test]
fn controlled_columns_include_hessian_eigenvectors() {
    let h = fig1_hessian();
    let lambda = h.lambda_max();
    for gamma in [0.2, 0.5, 1.0] {
        let m = controlled_projection(&h, 64, gamma, 9).unwrap();
        let Perturbation::LowRank(u) = &m else { panic!("low-rank expected") };
        let eigen_like = (0..u.cols())
            .filter(|&j| {
                let v = u.col(j);
                let hv = h.matvec(v);
                let ray: f64 = hv.iter().zip(v).map(|(a, b)| a * b).sum();
                let res: f64 = hv.iter().zip(v).map(|(a, b)| (a - ray * b).powi(2)).sum::<f64>().sqrt();
                ray > 1e-9 && res <= 1e-7 * lambda
            })
            .count();
        let k = (64.0 * gamma - 1e-9).ceil() as usize;
        assert!(eigen_like >= k, "γ={gamma}: {eigen_like} eigenvector columns, want {k}");
    }
}

#[test]
fn controlled_full_alignment_equals_intdim() {
    let h = fig1_hessian();
    let m = controlled_projection(&h, 64, 1.0, 4).unwrap();
    let rho = alignment_rho(&m, &h).unwrap();
    let intdim = h.trace() / h.lambda_max();
    assert!((rho - intdim).abs() <= 1e-6 * intdim, "{rho} vs {intdim}");
}

#[test]
fn controlled_mean_alignment_increases_with_gamma() {
    let h = fig1_hessian();
    let mut means = Vec::new();
    for gamma in [0.0, 0.2, 0.4, 0.7, 1.0] {
        let sampler = ControlledSampler::new(&h, 64, gamma).unwrap();
        let mean = (0..500u64)
            .map(|k| sampler.alignment(&sampler.sample(mix64(&[0xC0DE, k])).unwrap()))
            .sum::<f64>()
            / 500.0;
        means.push(mean);
    }
    assert!(means.windows(2).all(|w| w[1] > w[0]), "{means:?}");
    let e0 = expected_rho(&h, 64.0).unwrap();
    assert!((means[0] - e0).abs() < 0.05 * e0, "γ=0 mean {} vs {e0}", means[0]);
}

#[test]
fn ensembles_share_the_expected_alignment() {
    let h = heterogeneous_block_hessian(128, 8, 4, &[10.0, 40.0, 70.0, 100.0], 21).unwrap();
    for s in [8.0, 16.0, 32.0] {
        let e = expected_rho(&h, s).unwrap();
        for ens in Ensemble::ALL {
            let rhos: Vec<f64> = rho_distribution(ens, &h, s, 1000, 5).unwrap().iter().map(|a| a.rho).collect();
            let n = rhos.len() as f64;
            let mean = rhos.iter().sum::<f64>() / n;
            let var = rhos.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let se = (var / n).sqrt();
            assert!((mean - e).abs() <= 3.0 * se + 1e-12, "{ens} s={s}: {mean} vs {e} (se {se})");
        }
    }
}

#[test]
fn identity_hessian_gives_rho_equal_to_srank() {
    let h = Hessian::from_matrix(SymMatrix::identity(32)).unwrap();
    for ens in Ensemble::ALL {
        for r in rho_distribution(ens, &h, 8.0, 20, 1).unwrap() {
            assert!((r.rho - 8.0).abs() <= 1e-9, "{ens}: {}", r.rho);
        }
    }
}

#[test]
fn alignment_respects_the_min_bound() {
    let h = heterogeneous_block_hessian(64, 4, 3, &[10.0, 100.0], 8).unwrap();
    let intdim = h.trace() / h.lambda_max();
    let mut g = GaussianStream::new(2);
    for k in 0..50u64 {
        let s = 1 + (g.sample().abs() * 10.0) as usize % 64;
        let m = sample_low_rank(64, s, k).unwrap();
        let rho = alignment_rho(&m, &h).unwrap();
        assert!(rho >= 0.0 && rho <= intdim.min(s as f64) + 1e-9, "s={s}: {rho}");
    }
    let eig = eig_sym(h.matrix()).unwrap();
    assert!((eig.lambda_max() - h.lambda_max()).abs() < 1e-9);
}
