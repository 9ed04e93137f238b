//! One test per acceptance criterion. Each prints a `[PASS]` or `[FAIL]`
//! line; run with `--nocapture` to see them.

use std::path::Path;
use std::time::{Duration, Instant};

use dpsign::experiment::{
    csv_body, load_data, run_with_data, DatasetSource, ExperimentConfig, LoadedData, Preset,
    TABLE1_EPSILONS,
};
use dpsign::federation::{ef_aggregate, Algorithm, ResidualScale};
use dpsign::model::{Batch, MlpModel};
use dpsign::privacy::{agm_condition, calibrate_sigma, normal_cdf};
use dpsign::SignVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DELTA: f64 = 1e-5;
const SEEDS: [u64; 3] = [0, 1, 2];

fn report(name: &str, pass: bool, detail: &str) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

fn subset() -> LoadedData {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-subset");
    let source = DatasetSource::Mnist {
        dir: Some(dir),
        train_limit: None,
        test_limit: None,
    };
    load_data(&source, 0).unwrap()
}

fn final_accuracy(config: &ExperimentConfig, data: &LoadedData) -> f64 {
    run_with_data(config, data, |_| {}).unwrap().final_accuracy()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// Reference normal CDF for the scan oracle: Maclaurin series for erf near
// the origin, a continued fraction for erfc in the tails.
fn erfc_ref(z: f64) -> f64 {
    if z < 0.0 {
        return 2.0 - erfc_ref(-z);
    }
    if z < 2.5 {
        let (mut term, mut sum, mut n) = (z, z, 0.0);
        while term.abs() > 1e-17 * sum.abs() {
            n += 1.0;
            term *= -z * z / n;
            sum += term / (2.0 * n + 1.0);
        }
        return 1.0 - 2.0 / std::f64::consts::PI.sqrt() * sum;
    }
    let mut frac = z;
    for n in (1..80).rev() {
        frac = z + (n as f64 / 2.0) / frac;
    }
    (-z * z).exp() / std::f64::consts::PI.sqrt() / frac
}

fn phi_ref(x: f64) -> f64 {
    0.5 * erfc_ref(-x / std::f64::consts::SQRT_2)
}

fn condition_ref(eps: f64, sens: f64, sigma: f64) -> f64 {
    let a = sens / (2.0 * sigma) - eps * sigma / sens;
    let b = -sens / (2.0 * sigma) - eps * sigma / sens;
    phi_ref(a) - eps.exp() * phi_ref(b)
}

/// Smallest σ on a grid of relative spacing 1e−6 with the reference
/// condition at most δ.
fn scan_sigma(eps: f64, sens: f64) -> f64 {
    let mut hi = 0.01 * sens;
    while condition_ref(eps, sens, hi) > DELTA {
        hi *= 1.01;
    }
    let lo = hi / 1.01;
    let steps = 20_000;
    (0..=steps)
        .map(|k| lo + (hi - lo) * k as f64 / steps as f64)
        .find(|&s| condition_ref(eps, sens, s) <= DELTA)
        .unwrap()
}

#[test]
fn calibration() {
    let mut failures = Vec::new();
    let start = Instant::now();
    let mut sigmas = Vec::new();
    for eps in TABLE1_EPSILONS {
        for sens in [1.0, 4.0] {
            sigmas.push((eps, sens, calibrate_sigma(eps, DELTA, sens).unwrap()));
        }
    }
    let elapsed = start.elapsed();
    for &(eps, sens, sigma) in &sigmas {
        if agm_condition(eps, DELTA, sens, sigma).unwrap() > DELTA {
            failures.push(format!("condition violated at ε={eps}, Δ={sens}"));
        }
        if agm_condition(eps, DELTA, sens, sigma * (1.0 - 1e-6)).unwrap() <= DELTA {
            failures.push(format!("not minimal at ε={eps}, Δ={sens}"));
        }
        let classical = sens * (2.0 * (1.25 / DELTA).ln()).sqrt() / eps;
        if eps >= 1.0 && sigma > classical {
            failures.push(format!("above classical bound at ε={eps}, Δ={sens}"));
        }
        let scanned = scan_sigma(eps, sens);
        if ((sigma - scanned) / scanned).abs() > 2e-6 {
            failures.push(format!("ε={eps}, Δ={sens}: {sigma} vs scan {scanned}"));
        }
    }
    if elapsed >= Duration::from_secs(1) {
        failures.push(format!("took {elapsed:?}"));
    }
    let detail = if failures.is_empty() {
        format!("10 budgets valid, minimal and within 2e-6 of the scan oracle ({elapsed:?})")
    } else {
        failures.join("; ")
    };
    report("calibration", failures.is_empty(), &detail);
}

#[test]
fn dp_bound_suite() {
    let start = Instant::now();
    let mut checked = 0;
    let mut worst = f64::NEG_INFINITY;
    for eps in TABLE1_EPSILONS {
        for sens in [1.0, 4.0] {
            let sigma = calibrate_sigma(eps, DELTA, sens).unwrap();
            let e = eps.exp();
            for k in [-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0] {
                let a = k * sens;
                for b in [a - sens, a + sens] {
                    let pa = normal_cdf(a / sigma).unwrap();
                    let pb = normal_cdf(b / sigma).unwrap();
                    worst = worst.max(pa - e * pb - DELTA);
                    worst = worst.max((1.0 - pa) - e * (1.0 - pb) - DELTA);
                    checked += 2;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 0.0 && elapsed < Duration::from_secs(1);
    report(
        "dp bound suite",
        pass,
        &format!("{checked} inequalities, worst slack {worst:.3e} ({elapsed:?})"),
    );
}

#[test]
fn gradient_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let dims = [8, 4, 3];
    let n_params = MlpModel::zeros(&dims).unwrap().num_params();
    let params: Vec<f64> = (0..n_params).map(|_| rng.random_range(-1.0..1.0)).collect();
    let model = MlpModel::from_flat(&dims, params.clone()).unwrap();
    let inputs = (0..5 * 8).map(|_| rng.random::<f32>()).collect();
    let labels = (0..5).map(|_| rng.random_range(0..3)).collect();
    let batch = Batch::new(8, inputs, labels).unwrap();

    let analytic = model.per_example_gradients(&batch).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..n_params {
        let mut plus = params.clone();
        plus[i] += h;
        let mut minus = params.clone();
        minus[i] -= h;
        let (lp, _) = MlpModel::from_flat(&dims, plus).unwrap().forward(&batch).unwrap();
        let (lm, _) = MlpModel::from_flat(&dims, minus).unwrap().forward(&batch).unwrap();
        for (k, grad) in analytic.iter().enumerate() {
            let fd = (lp[k] - lm[k]) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-7);
            worst = worst.max(rel);
        }
    }
    let elapsed = start.elapsed();
    report(
        "gradient correctness",
        worst < 1e-4 && elapsed < Duration::from_secs(1),
        &format!("max relative error {worst:.2e} over 5 examples x {n_params} params ({elapsed:?})"),
    );
}

#[test]
fn ef_algebra() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst: f64 = 0.0;
    let mut sign_mismatches = 0;
    for instance in 0..1000 {
        let voters = rng.random_range(1..40);
        let d = rng.random_range(1..50);
        let lambda = if instance % 10 == 0 { f64::from(instance % 20 == 0) } else { rng.random() };
        let scale = if instance % 2 == 0 { ResidualScale::InverseVoters } else { ResidualScale::Unit };
        let votes: Vec<SignVector> = (0..voters)
            .map(|_| SignVector::new((0..d).map(|_| if rng.random() { 1 } else { -1 }).collect()).unwrap())
            .collect();
        let residual: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let (agg, next) = ef_aggregate(&votes, &residual, lambda, scale).unwrap();

        let k = match scale {
            ResidualScale::InverseVoters => 1.0 / voters as f64,
            ResidualScale::Unit => 1.0,
        };
        for i in 0..d {
            let s = votes.iter().map(|v| f64::from(v.as_slice()[i])).sum::<f64>() / voters as f64;
            let e = residual[i];
            let g = if s + e < 0.0 { -1.0 } else { 1.0 };
            if f64::from(agg.as_slice()[i]) != g {
                sign_mismatches += 1;
            }
            let want = lambda * e + (1.0 - lambda) * (s - k * g);
            worst = worst.max((next[i] - want).abs());
        }
    }
    let elapsed = start.elapsed();
    report(
        "ef algebra",
        worst <= 1e-12 && sign_mismatches == 0 && elapsed < Duration::from_secs(1),
        &format!("1000 instances, max residual error {worst:.1e}, {sign_mismatches} sign mismatches ({elapsed:?})"),
    );
}

#[test]
fn communication() {
    let data = subset();
    let mut logged = Vec::new();
    for algorithm in Algorithm::ALL {
        let config = ExperimentConfig {
            algorithm,
            rounds: 1,
            ..ExperimentConfig::default()
        };
        let report = run_with_data(&config, &data, |_| {}).unwrap();
        let d = report.num_params;
        logged.push((algorithm, d, report.metrics[0].uplink_bytes));
    }
    let d = logged[0].1;
    let sign_ok = logged
        .iter()
        .all(|&(a, _, b)| b == if a == Algorithm::FedAvg { 4 * d } else { d.div_ceil(8) });
    let sign = logged.iter().find(|l| l.0 == Algorithm::DpSignSgd).unwrap().2;
    let float = logged.iter().find(|l| l.0 == Algorithm::FedAvg).unwrap().2;
    let ratio = float as f64 / sign as f64;
    report(
        "communication",
        sign_ok && (31.0..=33.0).contains(&ratio),
        &format!("d = {d}: sign {sign} B, fedavg {float} B per party per round, ratio {ratio:.3}"),
    );
}

fn inversions(acc: &[f64]) -> (usize, f64) {
    let drops: Vec<f64> = acc.windows(2).map(|w| w[0] - w[1]).filter(|&x| x > 0.0).collect();
    (drops.len(), drops.iter().cloned().fold(0.0, f64::max))
}

#[test]
fn trend_reproduction() {
    let data = subset();
    let start = Instant::now();
    let mut table = Vec::new();
    for algorithm in [Algorithm::DpSignSgd, Algorithm::EfDpSignSgd] {
        let mut row = Vec::new();
        for eps in TABLE1_EPSILONS {
            let accs: Vec<f64> = SEEDS
                .iter()
                .map(|&seed| {
                    let config = ExperimentConfig {
                        algorithm,
                        epsilon: eps,
                        seed,
                        ..ExperimentConfig::default()
                    };
                    final_accuracy(&config, &data)
                })
                .collect();
            row.push(100.0 * mean(&accs));
        }
        println!("  {algorithm:>14}: {}", fmt_row(&row));
        table.push(row);
    }
    let elapsed = start.elapsed();

    let mut failures = Vec::new();
    for (algorithm, row) in ["dp-signsgd", "ef-dp-signsgd"].iter().zip(&table) {
        let (count, largest) = inversions(row);
        if count > 1 || largest > 1.0 {
            failures.push(format!("{algorithm}: {count} inversions, largest {largest:.2} pts"));
        }
    }
    for (i, eps) in TABLE1_EPSILONS.iter().enumerate() {
        if table[1][i] < table[0][i] - 0.5 {
            failures.push(format!(
                "ε={eps}: ef {:.2} below dp {:.2} by more than 0.5 pts",
                table[1][i], table[0][i]
            ));
        }
    }
    let detail = if failures.is_empty() {
        format!("monotone in ε and EF never behind DP by more than 0.5 pts ({elapsed:.0?})")
    } else {
        failures.join("; ")
    };
    report("trend reproduction", failures.is_empty(), &detail);
}

fn fmt_row(row: &[f64]) -> String {
    row.iter().map(|a| format!("{a:6.2}")).collect::<Vec<_>>().join(" ")
}

#[test]
fn byzantine_stability() {
    let data = subset();
    let start = Instant::now();
    let run = |frac: f64| -> Vec<f64> {
        SEEDS
            .iter()
            .map(|&seed| {
                let config = ExperimentConfig {
                    algorithm: Algorithm::EfDpSignSgd,
                    epsilon: 1.0,
                    labels_per_party: 10,
                    byzantine_frac: frac,
                    seed,
                    ..ExperimentConfig::default()
                };
                final_accuracy(&config, &data)
            })
            .collect()
    };
    let clean = mean(&run(0.0));
    let attacked = mean(&run(0.4));
    let ratio = attacked / clean;
    let elapsed = start.elapsed();
    report(
        "byzantine stability",
        ratio >= 0.75 && elapsed < Duration::from_secs(600),
        &format!(
            "mean final accuracy {:.2}% clean vs {:.2}% with 40% negative adversaries, ratio {ratio:.3} (need >= 0.75; {elapsed:.0?})",
            100.0 * clean,
            100.0 * attacked
        ),
    );
}

#[test]
fn determinism() {
    let data = subset();
    let base = ExperimentConfig {
        rounds: 3,
        ..ExperimentConfig::default()
    };
    let mut runs = 0;
    let mut mismatched = Vec::new();
    for preset in [Preset::Table1, Preset::Byzantine, Preset::Baselines] {
        for (name, config) in preset.runs(&base) {
            let a = run_with_data(&config, &data, |_| {}).unwrap().csv_string();
            let b = run_with_data(&config, &data, |_| {}).unwrap().csv_string();
            runs += 1;
            if csv_body(&a) != csv_body(&b) {
                mismatched.push(name);
            }
        }
    }
    report(
        "determinism",
        mismatched.is_empty(),
        &if mismatched.is_empty() {
            format!("{runs} preset runs rerun with byte-identical CSV bodies")
        } else {
            format!("differing bodies: {}", mismatched.join(", "))
        },
    );
}
