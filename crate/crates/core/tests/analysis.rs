//! Cost models and log summaries checked against hand-computed values.

use subzero::analysis::{
    iterations_to_target, min_loss, peak_memory_params, summarize_rho, traffic_per_step, write_memory_csv,
    write_traffic_csv, LayerShape, Method, Summary,
};
use subzero::optim::{RunLog, StepRecord, Termination};
use subzero::perturbation::{AlignmentSample, Ensemble, SparseMode};
use subzero::rng::seeded;

use rand::Rng;

fn log_with_losses(losses: &[f64]) -> RunLog {
    RunLog {
        records: losses
            .iter()
            .enumerate()
            .map(|(i, &l)| StepRecord {
                step: i + 1,
                loss_plus: l + 0.5,
                loss_minus: l - 0.5,
                projected_grad: 0.0,
                active_block: None,
                step_seed: 0,
                rho: None,
            })
            .collect(),
        metadata: Vec::new(),
        termination: Termination::Completed,
        final_params: Vec::new(),
        wall_time: Default::default(),
    }
}

#[test]
fn two_layer_table() {
    let layers = [LayerShape::new(4, 4), LayerShape::new(2, 2)];
    let peaks: Vec<u64> = Method::ALL
        .iter()
        .map(|&m| peak_memory_params(m, &layers, Some(1), Some(&[0, 1])).unwrap().peak)
        .collect();
    // total 20; mezo +16; sparse +32; lozo +max(4,2)+(4+2); bcd +16.
    assert_eq!(peaks, [36, 52, 30, 36]);
}

#[test]
fn lozo_matches_its_factor_count() {
    let mut rng = seeded(3);
    for _ in 0..50 {
        let layers: Vec<LayerShape> = (0..rng.gen_range(1..10))
            .map(|_| LayerShape::new(rng.gen_range(1..300), rng.gen_range(1..300)))
            .collect();
        let r = rng.gen_range(1..8);
        let total: u64 = layers.iter().map(|l| l.m * l.n).sum();
        let u = layers.iter().map(|l| l.m * r).max().unwrap();
        let v: u64 = layers.iter().map(|l| l.n * r).sum();
        let report = peak_memory_params(Method::Lozo, &layers, Some(r), None).unwrap();
        assert_eq!(report.peak, total + u + v);
    }
}

#[test]
fn bcd_peak_equals_mezo_for_random_assignments() {
    let mut rng = seeded(4);
    for _ in 0..50 {
        let n = rng.gen_range(1..16);
        let layers: Vec<LayerShape> = (0..n)
            .map(|_| LayerShape::new(rng.gen_range(1..1000), rng.gen_range(1..1000)))
            .collect();
        let blocks = rng.gen_range(1..=n);
        let assign: Vec<usize> = (0..n).map(|_| rng.gen_range(0..blocks)).collect();
        let mezo = peak_memory_params(Method::Mezo, &layers, None, None).unwrap();
        let bcd = peak_memory_params(Method::MezoBcd, &layers, None, Some(&assign)).unwrap();
        assert_eq!(mezo.peak, bcd.peak);
    }
}

#[test]
fn traffic_approaches_two_loads_per_parameter() {
    let d = 1_000_000;
    assert_eq!(traffic_per_step(Method::Mezo, d, 7).unwrap(), 5e6);
    let far = traffic_per_step(Method::MezoBcd, d, 1_000_000).unwrap();
    assert!((far - 2e6).abs() <= 2e6 * 1e-5);
    assert_eq!(traffic_per_step(Method::MezoBcd, 100, 4).unwrap(), 275.0);
    assert!(traffic_per_step(Method::MezoBcd, 0, 4).is_err());
}

#[test]
fn target_search_uses_the_loss_proxy() {
    let log = log_with_losses(&[5.0, 4.0, 3.5, 3.0, 3.2, 2.9]);
    assert_eq!(iterations_to_target(&log, 3.0).unwrap(), Some(4));
    assert_eq!(iterations_to_target(&log, 10.0).unwrap(), Some(1));
    assert_eq!(iterations_to_target(&log, 1.0).unwrap(), None);
    assert_eq!(min_loss(&log).unwrap(), 2.9);
    assert!(iterations_to_target(&log_with_losses(&[]), 1.0).is_err());
}

#[test]
fn rho_groups_keep_first_appearance_order() {
    let mk = |ensemble, srank, trial, rho| AlignmentSample {
        ensemble,
        srank,
        trial,
        rho,
    };
    let sparse = Ensemble::Sparse(SparseMode::Fixed);
    let samples = [
        mk(sparse, 8.0, 0, 1.0),
        mk(Ensemble::LowRank, 8.0, 0, 2.0),
        mk(sparse, 8.0, 1, 3.0),
        mk(Ensemble::LowRank, 8.0, 1, 6.0),
    ];
    let groups = summarize_rho(&samples);
    assert_eq!(groups.len(), 2);
    assert_eq!(groups[0].ensemble, sparse);
    assert_eq!(groups[0].summary, Summary::of(&[1.0, 3.0]).unwrap());
    assert_eq!(groups[1].summary.mean, 4.0);
    assert_eq!(groups[1].summary.variance, 8.0);
}

#[test]
fn report_csvs_have_fixed_headers() {
    let layers = [LayerShape::new(4, 4), LayerShape::new(2, 2)];
    let report = peak_memory_params(Method::Mezo, &layers, None, None).unwrap();
    let mut buf = Vec::new();
    write_memory_csv(&[report], &mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "method,total,auxiliary,peak\nmezo,20,16,36\n");
    let mut buf = Vec::new();
    write_traffic_csv(&[(Method::MezoBcd, 100, 4, 275.0)], &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let row = text.lines().nth(1).unwrap();
    assert!(row.starts_with("mezo-bcd,100,4,"));
    assert_eq!(row.rsplit(',').next().unwrap().parse::<f64>().unwrap(), 275.0);
}
