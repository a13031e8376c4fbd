//! Temporary diagnostic for the criterion-10 training recipe.

use std::time::Instant;

use dp_diffusion::dm::DmConfig;
use dp_diffusion::dp::{train, AdamSpec, PrivacySpec, TrainOptions};
use dp_diffusion::gmm::{h_vicinity, sample_data, GmmSpec, LabeledSample};
use dp_diffusion::net::{DenoiserParams, NetSpec};
use dp_diffusion::samplers::{
    churn_sample, ddim_sample, ChurnSpec, DdimMode, ModelDenoiser, ScheduleSpec,
};

#[test]
#[ignore]
fn diag_nonprivate_recipe() {
    let t0 = Instant::now();
    let gmm = GmmSpec::default_nine();
    let cfg = DmConfig::edm();
    let net = NetSpec::toy_default();
    let strip = |s: LabeledSample| LabeledSample {
        point: s.point,
        label: None,
    };
    let n_data = 50_000;
    let data: Vec<LabeledSample> = sample_data(&gmm, n_data, 1000)
        .into_iter()
        .map(strip)
        .collect();
    let privacy = PrivacySpec {
        clip_c: f64::INFINITY,
        sigma_dp: 0.0,
        subsample_q: 256.0 / n_data as f64,
        total_steps: 5000,
        delta: 1e-5,
    };
    let opts = TrainOptions {
        noise_multiplicity: 2,
        ema_decay: 0.999,
        cond_dropout: 0.0,
        seed: 1001,
    };
    let out = train(&data, &cfg, net, &privacy, &AdamSpec::default(), &opts).unwrap();
    println!("train time: {:.0}s", t0.elapsed().as_secs_f64());
    for w in [0, 1000, 2000, 3000, 4000] {
        let mean: f64 = out.log.steps[w..w + 1000]
            .iter()
            .map(|s| s.loss_mean)
            .sum::<f64>()
            / 1000.0;
        println!("loss window {}..{}: {:.4}", w, w + 1000, mean);
    }
    let ema = out.ema.as_params(net).unwrap();
    let raw = out.params.clone();
    let eval = |name: &str, params: &DenoiserParams| {
        let model = ModelDenoiser {
            params,
            cfg: &cfg,
            label: None,
        };
        let t = Instant::now();
        let det = ddim_sample(
            &model,
            &ScheduleSpec::with_steps(100),
            DdimMode::Deterministic,
            10_000,
            2,
        )
        .unwrap();
        let chu = churn_sample(
            &model,
            &ScheduleSpec::with_steps(100),
            &ChurnSpec::default(),
            10_000,
            4,
        )
        .unwrap();
        println!("--- {name} (eval {:.0}s)", t.elapsed().as_secs_f64());
        for (s, pts) in [("ddim-det-100", &det), ("churn-100", &chu)] {
            let h3 = h_vicinity(&gmm, pts, 3.0).unwrap();
            let h4 = h_vicinity(&gmm, pts, 4.0).unwrap();
            let h6 = h_vicinity(&gmm, pts, 6.0).unwrap();
            println!("{s}: h3 = {h3:.4}, h4 = {h4:.4}, h6 = {h6:.4}");
        }
    };
    eval("EMA", &ema);
    eval("RAW", &raw);
    println!("total: {:.0}s", t0.elapsed().as_secs_f64());
}
