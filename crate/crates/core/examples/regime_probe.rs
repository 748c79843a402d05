//! Prints rank-1 R² for both fine-tuning regimes across network depths.
//!
//! Usage: cargo run --release -p amnesia-core --example regime_probe [task_size] [noise] [lr] [epochs]

use amnesia_core::lowrank::{fit_svd, goodness_of_fit};
use amnesia_core::oracle::{run_experiment, DataSource, OracleConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let task_size: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(500);
    let noise: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.08);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.05);
    let epochs: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(20);
    let ft_arg: Option<f64> = args.get(5).map(|s| s.parse().unwrap());
    let ft_epochs: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(1);
    let seed: u64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(0);
    let base_size: usize = args
        .get(8)
        .map(|s| s.parse().unwrap())
        .unwrap_or(20 * task_size);

    println!(
        "task_size={task_size} noise={noise} lr={lr} pretrain_epochs={epochs} ft_lr={ft_arg:?} ft_epochs={ft_epochs} seed={seed} base={base_size}"
    );
    for depth in 1..=5 {
        // Negative sentinel: depth-scaled fine-tune rate.
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
            learning_rate: lr,
            finetune_learning_rate: ft_lr,
            pretrain_epochs: epochs,
            finetune_epochs: ft_epochs,
            source: DataSource::SyntheticBlobs { base_size, noise },
            master_seed: seed,
            ..OracleConfig::default()
        };
        let t0 = std::time::Instant::now();
        let base = cfg.load_source().unwrap();
        let pre = amnesia_core::oracle::pretrain(&cfg, &base).unwrap();
        let mean_ce = pre.snapshot.scores().iter().sum::<f64>()
            / pre.snapshot.scores().len() as f64;
        let (overlap, disjoint) = run_experiment(&cfg).unwrap();
        let r2 = |m: &amnesia_core::AssociationMatrix| {
            let model = fit_svd(m, 1).unwrap();
            goodness_of_fit(m, &model).unwrap().r2
        };
        let mean = |m: &amnesia_core::AssociationMatrix| {
            m.values().iter().sum::<f64>() / (m.num_tasks() * m.num_examples()) as f64
        };
        println!(
            "depth {depth}: overlap R2={:.4} disjoint R2={:.4}  mean_fgt overlap={:+.4} disjoint={:+.4}  acc={:.3} ce={:.4}  ({:.1}s)",
            r2(&overlap),
            r2(&disjoint),
            mean(&overlap),
            mean(&disjoint),
            pre.upstream_accuracy(),
            mean_ce,
            t0.elapsed().as_secs_f64()
        );
    }
}
