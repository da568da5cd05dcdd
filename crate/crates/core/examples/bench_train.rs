use std::time::Instant;

use sdt_core::envs::{default_mix, generate_dataset, EnvConfig, EnvKind};
use sdt_core::train::{train, TrainConfig};

fn main() {
    let env = EnvConfig::new(EnvKind::Run);
    let t0 = Instant::now();
    let mut ds = generate_dataset(&env, 2000, &default_mix(EnvKind::Run), 1).unwrap();
    println!("gen 2000 trajs: {:?}", t0.elapsed());
    let t0 = Instant::now();
    ds.annotate().unwrap();
    println!("annotate: {:?}", t0.elapsed());
    let stats = ds.stats.as_ref().unwrap();
    println!("satisfaction fraction: {:.3} (n_safe {})", stats.satisfaction_fraction, stats.n_safe);
    if let Some(safe) = &stats.safe {
        println!("r_min {:.2} r_max {:.2} p90 {:.2} med+suffix {:.4}", safe.r_min, safe.r_max, safe.target_reward_p90, safe.median_positive_suffix);
    }

    for (embed, layers, k, batch) in [(32usize, 1usize, 4usize, 16usize), (48, 1, 6, 24), (64, 2, 8, 64)] {
        let cfg = TrainConfig {
            steps: 50,
            batch_size: batch,
            context: k,
            lr: 1e-3,
            embed_dim: embed,
            layers,
            heads: 1,
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let out = train(&ds, &cfg).unwrap();
        let per_step = t0.elapsed().as_secs_f64() / 50.0;
        println!(
            "embed {embed} L{layers} K{k} B{batch}: {:.1} ms/step -> 20k steps ~ {:.1} min (loss {:.3} -> {:.3})",
            per_step * 1e3,
            per_step * 20_000.0 / 60.0,
            out.log.first().unwrap().loss,
            out.log.last().unwrap().loss,
        );
    }
}
