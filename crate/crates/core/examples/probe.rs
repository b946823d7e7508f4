//! Scratch probe for pinning acceptance-test constants. Not part of the
//! deliverable surface; run with `cargo run --release --example probe`.

use std::time::Instant;

use banditlab::*;

fn base(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        algorithm: Algorithm::EpsMofulIps,
        k: 20,
        d: 5,
        horizon: 5000,
        n_ua: 0.2,
        l: 12,
        offline_size: 2_500_000,
        sigma: 2.0,
        lambda: 1.0,
        delta: 0.05,
        s_x: 5f64.sqrt(),
        s_theta: 2.0 * 5f64.sqrt(),
        dataset_source: DatasetSource::Synthetic,
        noisy_rewards: false,
        clip_m_rule: ClipRule::Percentile,
        reward_call_budget: None,
        below_threshold_attribution: Attribution::PiPlus,
        reward_clip: None,
    }
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "c1".into());
    match which.as_str() {
        "c1" => criterion1(),
        "c2" => criterion2(),
        "c4" => criterion4(),
        "c9" => criterion9(),
        "eps" => epsilon_size(),
        "trend" => trend(),
        "c4b" => criterion4_bases(),
        _ => eprintln!("unknown probe {which}"),
    }
}

fn epsilon_size() {
    // How big must the offline set be for max parameter error ~ 0.05?
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    for &n in &[1_000_000usize, 2_000_000, 2_500_000] {
        for seed in 0..3u64 {
            let t0 = Instant::now();
            let mut rng = ChaCha8Rng::seed_from_u64(7_000 + seed);
            let model = gen_synthetic_model(&mut rng, 20, 5, 2.0).unwrap();
            let contexts = Contexts::sample_uniform(&mut rng, n, 5);
            let policy = gen_logging_policy(&mut rng, n, 20, 0.2).unwrap();
            let dataset = gen_offline_dataset(&mut rng, &model, &policy, &contexts).unwrap();
            let support = build_epsilon_support(&dataset, 12, Some(&model)).unwrap();
            println!(
                "n={n} seed={seed} epsilon_hat={:.4} elapsed={:?}",
                support.epsilon_hat().unwrap(),
                t0.elapsed()
            );
        }
    }
}

fn criterion1() {
    let t0 = Instant::now();
    let mut ips_calls = Vec::new();
    let mut eps_calls = Vec::new();
    for seed in 0..10u64 {
        let mut cfg = base(100 + seed);
        let m_ips = run_experiment(&cfg).unwrap();
        cfg.algorithm = Algorithm::EpsMoful;
        let m_eps = run_experiment(&cfg).unwrap();
        println!(
            "seed {seed}: ips calls {} eps calls {} (T'' {} eps-skips {})",
            m_ips.reward_calls, m_eps.reward_calls, m_ips.below_threshold_skips,
            m_ips.epsilon_skips
        );
        ips_calls.push(m_ips.reward_calls as f64);
        eps_calls.push(m_eps.reward_calls as f64);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "mean ips calls {:.1} ({:.3} of T), mean eps calls {:.1}, elapsed {:?}",
        mean(&ips_calls),
        mean(&ips_calls) / 5000.0,
        mean(&eps_calls),
        t0.elapsed()
    );
}

fn criterion2() {
    let t0 = Instant::now();
    let mut r1k = Vec::new();
    let mut r10k = Vec::new();
    for seed in 0..10u64 {
        let mut cfg = base(200 + seed);
        cfg.algorithm = Algorithm::Moful;
        cfg.l = 0;
        cfg.offline_size = 0;
        cfg.horizon = 1000;
        r1k.push(run_experiment(&cfg).unwrap().final_regret() / 1000.0);
        cfg.horizon = 10_000;
        r10k.push(run_experiment(&cfg).unwrap().final_regret() / 10_000.0);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!(
        "R_T/T at 1k {:.4}, at 10k {:.4}, ratio {:.3}, elapsed {:?}",
        mean(&r1k),
        mean(&r10k),
        mean(&r10k) / mean(&r1k),
        t0.elapsed()
    );
}

fn criterion4() {
    let t0 = Instant::now();
    let clip: f64 = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1.0);
    for sigma in [2.0, 1.0, 0.5] {
        for budget in [400u64, 800, 1500] {
            let mut report = String::new();
            for algorithm in [
                Algorithm::Opr,
                Algorithm::Moful,
                Algorithm::EpsMoful,
                Algorithm::EpsMofulIps,
            ] {
                let mut rewards = Vec::new();
                for seed in 0..10u64 {
                    let mut cfg = base(300 + seed);
                    cfg.sigma = sigma;
                    cfg.n_ua = 0.4;
                    cfg.offline_size = 200_000;
                    cfg.algorithm = algorithm;
                    cfg.reward_call_budget = Some(budget);
                    if clip > 1.0 {
                        cfg.clip_m_rule = ClipRule::Fixed(clip);
                    }
                    cfg.l = match algorithm {
                        Algorithm::Moful | Algorithm::Opr => 0,
                        _ => 12,
                    };
                    let m = run_experiment(&cfg).unwrap();
                    rewards.push(m.average_reward);
                }
                let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
                let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>()
                    / 10.0)
                    .sqrt();
                report.push_str(&format!(
                    " {}={:.4}(se {:.4})",
                    algorithm.as_str(),
                    mean,
                    std / 10f64.sqrt()
                ));
            }
            println!("sigma {sigma} budget {budget}:{report}");
        }
    }
    println!("elapsed {:?}", t0.elapsed());
}

fn criterion4_bases() {
    let t0 = Instant::now();
    for l in [12usize, 16] {
        for base_seed in [300u64, 4000, 9000, 12345] {
            let mut means = Vec::new();
            for algorithm in [
                Algorithm::Opr,
                Algorithm::Moful,
                Algorithm::EpsMoful,
                Algorithm::EpsMofulIps,
            ] {
                let mut rewards = Vec::new();
                for seed in 0..10u64 {
                    let mut cfg = base(base_seed + seed);
                    cfg.sigma = 0.5;
                    cfg.n_ua = 0.4;
                    cfg.offline_size = 200_000;
                    cfg.algorithm = algorithm;
                    cfg.reward_call_budget = Some(400);
                    cfg.clip_m_rule = ClipRule::Fixed(3.0);
                    cfg.l = match algorithm {
                        Algorithm::Moful | Algorithm::Opr => 0,
                        _ => l,
                    };
                    rewards.push(run_experiment(&cfg).unwrap().average_reward);
                }
                means.push(rewards.iter().sum::<f64>() / rewards.len() as f64);
            }
            println!(
                "l={l} base={base_seed}: opr {:.4} moful {:.4} eps {:.4} ips {:.4} | moful<=eps {} eps<=ips {} (gap {:+.5})",
                means[0], means[1], means[2], means[3],
                means[1] <= means[2],
                means[2] <= means[3],
                means[3] - means[2]
            );
        }
    }
    println!("elapsed {:?}", t0.elapsed());
}

fn trend() {
    // Monotone savings at a noise scale where confidence widths can converge
    // within the horizon.
    let t0 = Instant::now();
    let sigma = 0.3;
    for l in [0usize, 4, 8, 12] {
        let mut calls = Vec::new();
        for seed in 0..10u64 {
            let mut cfg = base(500 + seed);
            cfg.sigma = sigma;
            cfg.offline_size = 100_000;
            cfg.horizon = 3000;
            cfg.l = l;
            let m = run_experiment(&cfg).unwrap();
            calls.push(m.reward_calls as f64);
        }
        let mean = calls.iter().sum::<f64>() / calls.len() as f64;
        println!("sigma {sigma} l={l}: mean calls {mean:.1} ({:.3} of T)", mean / 3000.0);
    }
    for clip in [1.0f64, 10.0, 14.0] {
        for n_ua in [0.2, 0.4, 0.6] {
            let mut calls = Vec::new();
            for seed in 0..10u64 {
                let mut cfg = base(600 + seed);
                cfg.sigma = sigma;
                cfg.offline_size = 100_000;
                cfg.horizon = 3000;
                cfg.l = 4;
                cfg.n_ua = n_ua;
                if clip > 1.0 {
                    cfg.clip_m_rule = ClipRule::Fixed(clip);
                }
                let m = run_experiment(&cfg).unwrap();
                calls.push(m.reward_calls as f64);
            }
            let mean = calls.iter().sum::<f64>() / calls.len() as f64;
            println!("sigma {sigma} clip {clip} n_ua={n_ua}: mean calls {mean:.1}");
        }
    }
    println!("elapsed {:?}", t0.elapsed());
}

fn criterion9() {
    let t0 = Instant::now();
    let mut opr_err = Vec::new();
    let mut ips_err = Vec::new();
    for seed in 0..10u64 {
        let mut cfg = base(400 + seed);
        cfg.k = 6;
        cfg.d = 8;
        cfg.horizon = 1400;
        cfg.n_ua = 0.4;
        cfg.l = 3;
        cfg.sigma = 0.5;
        cfg.s_x = 1.0;
        cfg.s_theta = 2.0;
        cfg.offline_size = 0;
        cfg.dataset_source = DatasetSource::Csv {
            path: concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/multiclass_2000.csv").into(),
            label_column: None,
            normalize: true,
            split_fraction: 0.7,
        };
        cfg.algorithm = Algorithm::Opr;
        opr_err.push(run_experiment(&cfg).unwrap().classification_error.unwrap());
        cfg.algorithm = Algorithm::EpsMofulIps;
        ips_err.push(run_experiment(&cfg).unwrap().classification_error.unwrap());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let se = |v: &[f64]| {
        let m = mean(v);
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
            / (v.len() as f64).sqrt()
    };
    println!(
        "opr err {:.4} (se {:.4}), ips err {:.4} (se {:.4}), elapsed {:?}",
        mean(&opr_err),
        se(&opr_err),
        mean(&ips_err),
        se(&ips_err),
        t0.elapsed()
    );
}
