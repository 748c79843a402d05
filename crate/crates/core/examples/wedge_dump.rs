use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn main() {
    for seed in [1u64, 2, 3, 5, 7, 9, 23] {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut wedges = Vec::new();
        for _ in 0..5 {
            let w: f64 = rng.random_range(0.0..std::f64::consts::FRAC_PI_2);
            wedges.push(w);
            for _ in 0..3 {
                let _: f64 = rng.random_range(0.5..1.0);
            }
            for _ in 0..3 {
                let _: f64 = rng.random_range(0.82..1.12);
            }
        }
        let degs: Vec<String> = wedges.iter().map(|w| format!("{:5.1}", w.to_degrees())).collect();
        let mut sorted = wedges.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let gaps: Vec<String> = sorted
            .windows(2)
            .map(|p| format!("{:4.1}", (p[1] - p[0]).to_degrees()))
            .collect();
        println!("seed {seed:2}: wedges[deg] = {}  gaps = {}", degs.join(" "), gaps.join(" "));
    }
}
