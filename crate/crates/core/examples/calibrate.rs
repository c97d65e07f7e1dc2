//! Scratch calibration runs (removed before release).

use std::time::Instant;

use seven_core::data;
use seven_core::diagnostics::{mean_gradient, rgv, snapshot_gradients};
use seven_core::model::TransformerConfig;
use seven_core::optim::OptimKind;
use seven_core::runner::{run, Method, RunPlan};
use seven_core::score::ScoreVariant;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn rgv_mode(t_total: usize, lr: f64, k: usize, sparsity: f64, warmup: usize) {
    let cfg = TransformerConfig {
        layers: 2,
        d_model: 32,
        heads: 4,
        ffn_hidden: 64,
        seq_len: 6,
        vocab: 2,
        classes: 2,
    };
    let mut wins = 0;
    for seed in 1..=5u64 {
        let d = data::parity(cfg.seq_len, 512, 256, seven_core::rng::subseed(seed, "data"));
        let base = RunPlan {
            method: Method::SevenPre,
            variant: ScoreVariant::Seven,
            sparsity,
            prune_steps: k,
            prune_start: 0,
            total_steps: t_total,
            warmup_steps: warmup,
            alpha1: 0.8,
            alpha2: 0.9,
            epsilon: 1e-8,
            lr,
            optimizer: OptimKind::Adam,
            batch_size: 16,
            seed,
            resurrection: false,
            eval_every: 0,
        };
        // Post-warmup dense snapshot = plain dense run of `warmup` steps.
        let mut dense = base.clone();
        dense.method = Method::Magnitude;
        dense.sparsity = 0.0;
        dense.warmup_steps = 0;
        dense.total_steps = warmup;
        let (dense_out, _) = run(&dense, &cfg, &d).unwrap();

        let (seven_out, _) = run(&base, &cfg, &d).unwrap();
        let mut snip = base.clone();
        snip.method = Method::Snip;
        let (snip_out, _) = run(&snip, &cfg, &d).unwrap();

        let med = |mask: &seven_core::mask::Mask| {
            let snaps =
                snapshot_gradients(&dense_out.store, &cfg, &d, Some(mask), 16, 16, seed ^ 99)
                    .unwrap();
            let g_full = mean_gradient(&snaps).unwrap();
            let keep = mask.flat();
            let l1s: Vec<f64> = snaps
                .iter()
                .map(|s| {
                    let r = rgv(&s.grad, &g_full, 1e-12).unwrap();
                    r.values
                        .iter()
                        .zip(&keep)
                        .filter(|(_, &k)| k)
                        .map(|(v, _)| v.abs())
                        .sum::<f64>()
                })
                .collect();
            median(l1s)
        };
        let m7 = med(&seven_out.mask);
        let ms = med(&snip_out.mask);
        if m7 <= ms {
            wins += 1;
        }
        println!(
            "seed {seed}: seven med|RGV|1 = {m7:.4e}  snip = {ms:.4e}  {}",
            if m7 <= ms { "SEVEN<=SNIP" } else { "snip lower" }
        );
    }
    println!("seven wins {wins}/5");
}

fn main() {
    if std::env::var("RGV").is_ok() {
        let args: Vec<String> = std::env::args().collect();
        let t_total: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
        let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
        let k: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(100);
        let sparsity: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.6);
        let warmup: usize = std::env::var("WARMUP").ok().and_then(|s| s.parse().ok()).unwrap_or(600);
        rgv_mode(t_total, lr, k, sparsity, warmup);
        return;
    }
    let args: Vec<String> = std::env::args().collect();
    let t_total: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let k: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(40);
    let sparsity: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.6);
    let dense_only = std::env::var("DENSE_ONLY").is_ok();
    let ffn: usize = std::env::var("FFN").ok().and_then(|s| s.parse().ok()).unwrap_or(64);
    let seq: usize = std::env::var("SEQ").ok().and_then(|s| s.parse().ok()).unwrap_or(8);
    let bs: usize = std::env::var("BS").ok().and_then(|s| s.parse().ok()).unwrap_or(16);
    let train_n: usize = std::env::var("TRAIN").ok().and_then(|s| s.parse().ok()).unwrap_or(512);
    let seeds: Vec<u64> = if dense_only { vec![1, 2, 3, 4, 5] } else { std::env::var("SEEDS").map(|s| s.split(",").map(|x| x.parse().unwrap()).collect()).unwrap_or(vec![1, 2, 3, 4, 5]) };

    let cfg = TransformerConfig {
        layers: 2,
        d_model: 32,
        heads: 4,
        ffn_hidden: ffn,
        seq_len: seq,
        vocab: 2,
        classes: 2,
    };

    let methods: Vec<Option<Method>> = if dense_only {
        vec![None]
    } else {
        vec![
            None,
            Some(Method::SevenPre),
            Some(Method::Magnitude),
            Some(Method::Random),
            Some(Method::Snip),
        ]
    };
    for method in methods {
        let mut accs = Vec::new();
        let start = Instant::now();
        for &seed in &seeds {
            let d = data::parity(cfg.seq_len, train_n, 256, seven_core::rng::subseed(seed, "data"));
            let plan = RunPlan {
                method: method.unwrap_or(Method::Magnitude),
                variant: ScoreVariant::Seven,
                sparsity: if method.is_none() { 0.0 } else { sparsity },
                prune_steps: k,
                prune_start: 0,
                warmup_steps: std::env::var("WARMUP").ok().and_then(|s| s.parse().ok()).unwrap_or(0),
                total_steps: t_total,
                alpha1: 0.8,
                alpha2: 0.9,
                epsilon: 1e-8,
                lr,
                optimizer: OptimKind::Adam,
                batch_size: bs,
                seed,
                resurrection: false,
                eval_every: 0,
            };
            let (out, records) = run(&plan, &cfg, &d).unwrap();
            if dense_only || std::env::var("VERBOSE").is_ok() {
                let losses: Vec<f64> = records
                    .iter()
                    .filter(|r| r.iteration % (t_total / 8).max(1) == 0)
                    .map(|r| (r.loss * 1000.0).round() / 1000.0)
                    .collect();
                println!("  seed {seed}: acc={:.3} loss trace {losses:?}", out.final_eval_acc);
                if method.is_some() {
                    let mut kinds: std::collections::BTreeMap<String, (usize, usize)> =
                        Default::default();
                    for e in out.mask.entries() {
                        let kind = e
                            .name
                            .split('.')
                            .last()
                            .unwrap()
                            .to_string();
                        let k = kinds.entry(kind).or_default();
                        k.0 += e.bits.iter().filter(|&&b| b).count();
                        k.1 += e.bits.len();
                    }
                    let summary: Vec<String> = kinds
                        .iter()
                        .map(|(k, (kept, tot))| format!("{k}:{:.2}", *kept as f64 / *tot as f64))
                        .collect();
                    println!("    kept fractions {}", summary.join(" "));
                }
            }
            accs.push(out.final_eval_acc);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let label = method.map(|m| m.name()).unwrap_or("dense");
        println!(
            "{label:10} s={:.2} mean={mean:.4} accs={:?} elapsed={:.1?}",
            if method.is_none() { 0.0 } else { sparsity },
            accs.iter().map(|a| (a * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            start.elapsed()
        );
    }
}
