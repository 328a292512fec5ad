//! Calibration probe: quick reads of the centered-variance slope and of the
//! trained-ensemble accuracy on the synthetic corpus.

use predvar::data::{self, Split, TargetMode};
use predvar::experiments::{self, ScalingConfig};
use predvar::gd_models::{build_gd_ensemble, GdVariant, GdVariantSpec};
use predvar::metrics::ensemble_accuracy;
use predvar::nn::{Activation, MlpArchitecture, TrainConfig};
use predvar::ntk::InitKind;
use predvar::seeds;

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "slope".into());
    if which == "slope" || which == "both" {
        let cfg = ScalingConfig {
            widths: vec![64, 128, 256, 1024],
            ensemble_size: 50,
            mean_kernel_samples: 120,
            kernel_samples: 12,
            eval_points: 150,
            ..Default::default()
        };
        let r = experiments::run_scaling(&cfg, 1, None).unwrap();
        for row in &r.rows {
            println!("w={} v_c={:.5} v_i={:.6} v_a={:.5} v_res={:.6}", row.width, row.v_c, row.v_i, row.v_a, row.v_res_abs);
        }
        println!("slopes: v_c {:.3} v_i {:.3} v_a {:.3} v_res {:.3}", r.slope_v_c, r.slope_v_i, r.slope_v_a, r.slope_v_res);
    }
    if which == "acc" || which == "both" {
        let root = data::data_root().unwrap();
        let train_raw = data::load_named(&root, "mnist", Split::Train).unwrap();
        let test_raw = data::load_named(&root, "mnist", Split::Test).unwrap();
        let train = data::subset(&train_raw, 1000, seeds::seed_for(0, seeds::ROLE_DATA, 0), true)
            .unwrap()
            .into_dataset(10, TargetMode::CenteredOnehot, "mnist-1000")
            .unwrap();
        let test = data::subset(&test_raw, 1000, seeds::seed_for(0, seeds::ROLE_DATA, 1), false).unwrap();
        let arch = MlpArchitecture::mlp(784, 512, 3, 10, Activation::Softplus);
        let spec = GdVariantSpec {
            variant: GdVariant::Gd,
            shared_seed: None,
            member_seeds: seeds::stream(0, seeds::ROLE_ENSEMBLE, 3),
            train_cfg: TrainConfig::default(),
            jitter: 1e-10,
            init: InitKind::Standard,
        };
        let t0 = std::time::Instant::now();
        let ens = build_gd_ensemble(&spec, &arch, &train.xs, &train.ys, &test.images).unwrap();
        for m in &ens.members {
            println!("member seed {} steps {} mse {:.4} converged {}", m.seed, m.steps, m.final_mse, m.converged);
        }
        let acc = ensemble_accuracy(&ens.predictions, &test.labels).unwrap();
        println!("accuracy (3-member ensemble): {:.4}, runtime {:.0}s", acc.accuracy, t0.elapsed().as_secs_f64());
    }
}
