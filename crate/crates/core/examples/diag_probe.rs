//! Prints rank-sweep R² and task-row correlation structure for one depth.
//!
//! Usage: cargo run --release -p amnesia-core --example diag_probe [depth] [task_size] [noise] [ft_lr] [ft_epochs]

use amnesia_core::lowrank::{fit_svd, goodness_of_fit};
use amnesia_core::oracle::{run_experiment, DataSource, OracleConfig};
use amnesia_core::stats::pearson;
use amnesia_core::AssociationMatrix;

fn row(m: &AssociationMatrix, i: usize) -> Vec<f64> {
    m.row(i).to_vec()
}

fn describe(name: &str, m: &AssociationMatrix) {
    print!("{name}: rank-sweep ");
    for r in 1..=5 {
        let model = fit_svd(m, r).unwrap();
        print!("r{}={:.4} ", r, goodness_of_fit(m, &model).unwrap().r2);
    }
    println!();
    let t = m.num_tasks();
    let mut adjacent = Vec::new();
    let mut far = Vec::new();
    let mut all = Vec::new();
    for i in 0..t {
        for j in (i + 1)..t {
            let c = pearson(&row(m, i), &row(m, j)).unwrap();
            all.push(c);
            if j == i + 1 {
                adjacent.push(c);
            }
            if j >= i + t / 2 {
                far.push(c);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
    println!(
        "  row corr: mean={:.3} min={:.3} adjacent-mean={:.3} far-mean={:.3}",
        mean(&all),
        min(&all),
        mean(&adjacent),
        mean(&far)
    );
    let n = m.num_examples();
    let mut col_mean = vec![0.0; n];
    for i in 0..t {
        let r = row(m, i);
        for (j, cm) in col_mean.iter_mut().enumerate() {
            *cm += r[j] / t as f64;
        }
    }
    let mut task_scale: Vec<f64> = (0..t)
        .map(|i| {
            let r = row(m, i);
            r.iter().sum::<f64>() / n as f64
        })
        .collect();
    task_scale.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "  task mean-fgt range: [{:+.4}, {:+.4}]  col-mean spread: std={:.4}",
        task_scale[0],
        task_scale[t - 1],
        {
            let m0 = mean(&col_mean);
            (col_mean.iter().map(|v| (v - m0).powi(2)).sum::<f64>() / n as f64).sqrt()
        }
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let depth: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(4);
    let task_size: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(500);
    let noise: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    let ft_arg: Option<f64> = args.get(4).map(|s| s.parse().unwrap());
    let ft_epochs: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(1);
    let base_size: usize = args
        .get(6)
        .map(|s| s.parse().unwrap())
        .unwrap_or(20 * task_size);

    let ft_lr = match ft_arg {
        Some(v) if v < -4.5 => Some((0.05 / 2f64.powi(depth as i32 - 1)).max(0.05 / 8.0)),
            Some(v) if v < -3.5 => Some(if depth == 1 { 0.05 } else { 0.05 / (2.0 * (depth as f64 - 1.0)) }),
            Some(v) if v < -2.5 => Some(0.05 / depth as f64),
            Some(v) if v < 0.0 => Some(0.05 / 2f64.powi(depth as i32 - 1)),
        other => other,
    };
    let cfg = OracleConfig {
        depth,
        task_size,
        finetune_learning_rate: ft_lr,
        finetune_epochs: ft_epochs,
        source: DataSource::SyntheticBlobs { base_size, noise },
        master_seed: 0,
        ..OracleConfig::default()
    };
    println!("depth={depth} task_size={task_size} noise={noise} ft_lr={ft_lr:?} ft_epochs={ft_epochs} base={base_size}");
    let (overlap, disjoint) = run_experiment(&cfg).unwrap();
    describe("overlap ", &overlap);
    describe("disjoint", &disjoint);
}
