//! Timing probe: forward+backward+AdamW steps of the desk-scale model.

use gazeshift_core::model::{AblationFlags, ModelConfig, RedirectionModel};
use gazeshift_core::objectives::{loss_on_graph, LossConfig};
use gazeshift_core::optim::AdamW;
use gazeshift_core::tensor::Graph;
use ndarray::Array4;
use rand::Rng;
use rand::SeedableRng;
use std::time::Instant;

fn main() {
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0);
    let size: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(96);
    let batch: usize = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(30);
    let steps: usize = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(10);
    let cfg = ModelConfig::synth(size, size);
    let prof = gazeshift_core::profile::profile_model(&cfg).unwrap();
    println!(
        "model: {} params, {:.2} MMACs/image forward",
        prof.params(),
        prof.macs() as f64 / 1e6
    );
    let mut model = RedirectionModel::<f32>::new(cfg, AblationFlags::full(), 1).unwrap();
    let mut opt = AdamW::new(1e-4, 0.05);
    let xs = Array4::<f32>::from_shape_fn((batch, 1, size, size), |_| rng.gen_range(-1.0..1.0));
    let xt = Array4::<f32>::from_shape_fn((batch, 1, size, size), |_| rng.gen_range(-1.0..1.0));
    let loss_cfg = LossConfig::default();
    // warmup
    for _ in 0..2 {
        run_step(&mut model, &mut opt, &xs, &xt, &loss_cfg);
    }
    let t0 = Instant::now();
    for _ in 0..steps {
        run_step(&mut model, &mut opt, &xs, &xt, &loss_cfg);
    }
    let dt = t0.elapsed().as_secs_f64() / steps as f64;
    println!(
        "{size}x{size} batch {batch}: {:.3} s/step  ({:.1} steps/min)",
        dt,
        60.0 / dt
    );
}

fn run_step(
    model: &mut RedirectionModel<f32>,
    opt: &mut AdamW<f32>,
    xs: &Array4<f32>,
    xt: &Array4<f32>,
    loss_cfg: &LossConfig,
) {
    let mut g = Graph::<f32>::train();
    let s = g.constant(xs.clone().into_dyn());
    let t = g.constant(xt.clone().into_dyn());
    let out = model.forward_train(&mut g, s, t);
    let attn = out.attn.map(|a| (a, out.grid));
    let loss = loss_on_graph(&mut g, loss_cfg, out.recon, t, attn).unwrap();
    let mut grads = g.backward(loss);
    let pg = g.param_grads(&mut grads);
    opt.step(model.params_mut(), &pg);
}
