//! Quick behavioral measurements used while tuning defaults.
//!
//! Usage: cargo run --release -p invlab-core --example calibrate -- <scenario>
//! Scenarios: erm-balanced, erm-biased, bias-model, irmcon, ordering, irm

use invlab_core::data::{generate, FactorSpec, SplitSizes};
use invlab_core::eval::{bias_head_probe, forward_chunked, ProbeConfig, ProbeTarget};
use invlab_core::pipelines::{
    train_bias_model, train_erm, train_erm_grouped, train_irm, train_irmcon, train_irmcon_ipw,
    train_lff_ipw, Method, TrainConfig,
};
use std::time::Instant;

fn env_f64(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn data(rho: f64, train: usize, seed: u64) -> invlab_core::data::DatasetTriple {
    let cs = env_f64("CAL_CLASS_SCALE", 1.3);
    let xs = env_f64("CAL_CTX_SCALE", 2.6);
    let train = env_usize("CAL_TRAIN", train);
    let spec = FactorSpec::vector_concat(10, 10, 8, 8, 0.25, cs, xs, seed).unwrap();
    generate(&spec, rho, SplitSizes { train, val: 2000, test: 8000 }, seed).unwrap()
}

fn main() {
    let scenario = std::env::args().nth(1).unwrap_or_else(|| "erm-biased".into());
    let t0 = Instant::now();
    match scenario.as_str() {
        "erm-balanced" => {
            let d = data(0.1, 5000, 1);
            let cfg = TrainConfig { method: Method::Erm, epochs: 60, eval_every: 5, ..Default::default() };
            let r = train_erm(&d, &cfg).unwrap();
            println!("ERM balanced: test {:.4} (best epoch {})", r.test_accuracy, r.best_epoch);
        }
        "erm-biased" => {
            for rho in [0.95, 0.99, 0.999] {
                let d = data(rho, 10_000, 1);
                let cfg = TrainConfig { method: Method::Erm, epochs: 60, eval_every: 5, seed: 1, ..Default::default() };
                let r = train_erm(&d, &cfg).unwrap();
                println!(
                    "ERM rho={rho}: test {:.4} aligned {:.4} conflicting {:.4} (epoch {}) [{:.1}s]",
                    r.test_accuracy, r.aligned_accuracy, r.conflicting_accuracy, r.best_epoch,
                    t0.elapsed().as_secs_f64()
                );
            }
        }
        "bias-model" => {
            let d = data(0.999, 10_000, 1);
            let cfg = TrainConfig { method: Method::Erm, epochs: 60, ..Default::default() };
            let (phi_b, f_b) = train_bias_model(&d.train, &cfg).unwrap();
            let feats = forward_chunked(&phi_b, &d.test.all_observations(), 256);
            let logits = forward_chunked(&f_b, &feats, 256);
            let ctx_agree = (0..logits.rows())
                .filter(|&r| {
                    let row = logits.row(r);
                    let mut best = 0;
                    for (i, v) in row.iter().enumerate() {
                        if *v > row[best] { best = i; }
                    }
                    best == d.test.samples[r].c
                })
                .count() as f64 / d.test.len() as f64;
            println!("bias model context agreement on balanced test: {:.4} [{:.1}s]", ctx_agree, t0.elapsed().as_secs_f64());
        }
        "irmcon" => {
            for (lam, label) in [(env_f64("CAL_LAMBDA", 1.0), "tuned"), (0.0, "ablation")] {
                let d = data(0.95, 5000, 1);
                let cfg = TrainConfig {
                    method: Method::IrmconIpw, epochs: 60, lambda: lam,
                    seed: env_usize("CAL_SEED", 1) as u64,
                    context_feat_dim: env_usize("CAL_CTX_FEAT", 8),
                    sigma_aug: env_f64("CAL_SIGMA_AUG", 0.05),
                    ..Default::default()
                };
                let m = train_irmcon(&d.train, &cfg).unwrap();
                let probe_cfg = ProbeConfig::default();
                let ctx = bias_head_probe(&m.phi_t, &d.train, &d.test, ProbeTarget::Context, &probe_cfg, 1).unwrap();
                let cls = bias_head_probe(&m.phi_t, &d.train, &d.test, ProbeTarget::Class, &probe_cfg, 1).unwrap();
                println!(
                    "IRMCon λ={lam} ({label}): context probe {:.4}, class probe {:.4} [{:.1}s]",
                    ctx.final_test_accuracy, cls.final_test_accuracy, t0.elapsed().as_secs_f64()
                );
            }
        }
        "ordering" => {
            for rho in [0.95, 0.99, 0.999] {
                let d = data(rho, 10_000, 1);
                let base = TrainConfig { epochs: 60, eval_every: 5, seed: 1, ..Default::default() };
                let erm = train_erm(&d, &TrainConfig { method: Method::Erm, ..base.clone() }).unwrap();
                let lff = train_lff_ipw(&d, &TrainConfig { method: Method::LffIpw, ..base.clone() }).unwrap();
                let ipw = train_irmcon_ipw(&d, &TrainConfig { method: Method::IrmconIpw, ..base.clone() }).unwrap();
                println!(
                    "rho={rho}: ERM {:.4} | LfF-IPW {:.4} | IRMCon-IPW {:.4} [{:.1}s]",
                    erm.test_accuracy, lff.test_accuracy, ipw.test_accuracy,
                    t0.elapsed().as_secs_f64()
                );
            }
        }
        "weights" => {
            let d = data(0.99, 5000, 1);
            let base = TrainConfig { epochs: env_usize("CAL_EPOCHS", 60), eval_every: 10, seed: 1, ..Default::default() };
            let lff = train_lff_ipw(&d, &TrainConfig { method: Method::LffIpw, ..base.clone() }).unwrap();
            let ipw = train_irmcon_ipw(&d, &TrainConfig { method: Method::IrmconIpw, ..base.clone() }).unwrap();
            for (name, rec) in [("LfF", &lff), ("IRMCon", &ipw)] {
                let table = rec.weight_table.as_ref().unwrap();
                let aligned: Vec<f64> = d.train.samples.iter().filter(|s| s.is_aligned())
                    .map(|s| table.weight(s.id).unwrap()).collect();
                let conf: Vec<f64> = d.train.samples.iter().filter(|s| !s.is_aligned())
                    .map(|s| table.weight(s.id).unwrap()).collect();
                let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
                println!(
                    "{name}: test {:.4} | aligned w mean {:.4} (n={}) | conflicting w mean {:.4} (n={}) | ratio {:.1}",
                    rec.test_accuracy, mean(&aligned), aligned.len(), mean(&conf), conf.len(),
                    mean(&conf) / mean(&aligned)
                );
                let series: Vec<String> = rec
                    .metric_series("test", "accuracy")
                    .iter()
                    .map(|(e, v)| format!("{e}:{v:.3}"))
                    .collect();
                println!("  test curve: {}", series.join(" "));
                let vseries: Vec<String> = rec
                    .metric_series("val", "accuracy")
                    .iter()
                    .map(|(e, v)| format!("{e}:{v:.3}"))
                    .collect();
                println!("  val curve:  {}", vseries.join(" "));
            }
        }
        "stage2" => {
            use invlab_core::losses::{cross_entropy_values, gce_loss};
            use invlab_core::nn::Mlp;
            use invlab_core::optim::Optimizer;
            use invlab_core::rng::rng_for;
            use invlab_core::tape::Tape;
            use invlab_core::tensor::Tensor;
            let d = data(0.99, 5000, 1);
            let cfg = TrainConfig { method: Method::IrmconIpw, epochs: 60, seed: 1, ..Default::default() };
            let m = train_irmcon(&d.train, &cfg).unwrap();
            let xt = forward_chunked(&m.phi_t, &d.train.all_observations(), 256);
            let norms: Vec<f64> = (0..5).map(|i| xt.row(i).iter().map(|v| v*v).sum::<f64>().sqrt()).collect();
            println!("x_t row norms (first 5): {norms:?}");
            let labels: Vec<usize> = d.train.samples.iter().map(|s| s.y).collect();
            let mut head = Mlp::new(&[cfg.context_feat_dim, 10], &mut rng_for(1, "dbg")).unwrap();
            let mut opt = Optimizer::adam(cfg.lr);
            let mut order: Vec<usize> = (0..d.train.len()).collect();
            use rand::seq::SliceRandom;
            let mut rng = rng_for(1, "dbg-shuffle");
            for epoch in 0..env_usize("CAL_S2", 240) {
                order.shuffle(&mut rng);
                for batch in order.chunks(cfg.batch_size) {
                    let mut xdata = Vec::new();
                    for &i in batch { xdata.extend_from_slice(xt.row(i)); }
                    let xs = Tensor::matrix(batch.len(), cfg.context_feat_dim, xdata);
                    let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                    let tape = Tape::new();
                    let hv = head.attach(&tape);
                    let logits = hv.forward(&tape.constant(xs)).unwrap();
                    let loss = gce_loss(&logits, &ys, cfg.q).unwrap();
                    let grads = loss.backward().unwrap();
                    let gl: Vec<Tensor> = hv.params().iter().map(|v| grads.wrt(v)).collect();
                    opt.step(&mut head.params_mut(), &gl).unwrap();
                }
                if (epoch + 1) % (env_usize("CAL_S2", 240) / 6) == 0 {
                    let logits = forward_chunked(&head, &xt, 256);
                    let ce = cross_entropy_values(&logits, &labels).unwrap();
                    let (mut am, mut an, mut cm, mut cn) = (0.0, 0, 0.0, 0);
                    for (i, s) in d.train.samples.iter().enumerate() {
                        if s.is_aligned() { am += ce[i]; an += 1; } else { cm += ce[i]; cn += 1; }
                    }
                    println!("epoch {epoch}: ce aligned {:.4} (n={an}) conflicting {:.4} (n={cn})", am / an as f64, cm / cn as f64);
                }
            }
        }
        "irm" => {
            let d = data(0.99, 10_000, 1);
            for lam in [0.1, 1.0, 10.0, 100.0] {
                let cfg = TrainConfig { method: Method::Irm, epochs: 60, eval_every: 5, lambda: lam, seed: 1, ..Default::default() };
                let r = train_irm(&d, &cfg).unwrap();
                println!("IRM λ={lam}: test {:.4} (epoch {}) [{:.1}s]", r.test_accuracy, r.best_epoch, t0.elapsed().as_secs_f64());
            }
            let cfg = TrainConfig { method: Method::Erm, epochs: 60, eval_every: 5, seed: 1, ..Default::default() };
            let g = train_erm_grouped(&d, &cfg).unwrap();
            println!("grouped ERM: test {:.4}", g.test_accuracy);
        }
        other => eprintln!("unknown scenario {other}"),
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
}
