//! Second pilot: hunts for the smallest configuration where the
//! loss-robustness separation is measurable, before freezing the
//! acceptance fixture. Records go to docs/PILOT.md.

use segrobust::attack::{evaluate_robustness, AttackConfig, Recompute, Replacement, Selection};
use segrobust::data::{generate_synthetic, Dataset, SynthConfig};
use segrobust::experiment::{clean_mean_dice, run_sweep, SweepDef};
use segrobust::loss::LossSpec;
use segrobust::nn::{build_unet, train, Model, TrainConfig, UNetConfig};
use segrobust::rng;

fn data_for(extent: usize, noise: f64) -> (Dataset, Dataset) {
    let train_cfg = SynthConfig {
        count: 64,
        height: extent,
        width: extent,
        noise,
        ..SynthConfig::default()
    };
    let val_cfg = SynthConfig {
        count: 16,
        seed: rng::derive_seed(train_cfg.seed, 0, 1),
        ..train_cfg.clone()
    };
    (
        generate_synthetic(&train_cfg).unwrap(),
        generate_synthetic(&val_cfg).unwrap(),
    )
}

fn train_one(
    spec: &LossSpec,
    label: &str,
    master: u64,
    epochs: usize,
    extent: usize,
    data: &(Dataset, Dataset),
) -> Model {
    let tc = TrainConfig {
        epochs,
        seed: master,
        ..TrainConfig::default()
    };
    let config = UNetConfig {
        input_height: extent,
        input_width: extent,
        ..UNetConfig::default()
    };
    let mut model = build_unet(&config, rng::derive_seed(master, 0, 1)).unwrap();
    model.label = label.to_string();
    train(model, &data.0, &data.1, spec, &tc).unwrap().0
}

fn main() {
    let losses = LossSpec::standard_four();
    let (dice_label, dice_spec) = losses[1].clone();
    let (combo_label, combo_spec) = losses[2].clone();
    let sledge = AttackConfig {
        k: 5,
        selection: Selection::ByAbs,
        replacement: Replacement::Fixed { value: 1.0 },
        recompute: Recompute::Off,
        retain_images: false,
    };

    for extent in [16usize, 24] {
        for noise in [0.08f64, 0.25] {
            for epochs in [10usize, 25, 60] {
                let data = data_for(extent, noise);
                let mut sledge_wins = 0;
                let mut auc_wins = 0;
                let mut rows = Vec::new();
                for seed in [1u64, 2, 3] {
                    let dice_m = train_one(&dice_spec, &dice_label, seed, epochs, extent, &data);
                    let combo_m =
                        train_one(&combo_spec, &combo_label, seed, epochs, extent, &data);
                    let clean_d = clean_mean_dice(&dice_m, &data.1).unwrap();
                    let clean_c = clean_mean_dice(&combo_m, &data.1).unwrap();

                    let rd = evaluate_robustness(&dice_m, &data.1, &sledge).unwrap();
                    let rc = evaluate_robustness(&combo_m, &data.1, &sledge).unwrap();
                    if rc.attacked_mean > rd.attacked_mean {
                        sledge_wins += 1;
                    }

                    let grid = SweepDef::pixel_count_fixed();
                    let auc_d = run_sweep(&dice_m, "d", &data.1, &grid, rng::derive_seed(seed, 0, 2))
                        .unwrap()
                        .auc();
                    let auc_c = run_sweep(&combo_m, "c", &data.1, &grid, rng::derive_seed(seed, 1, 2))
                        .unwrap()
                        .auc();
                    if auc_c > auc_d {
                        auc_wins += 1;
                    }
                    rows.push(format!(
                        "    seed {seed}: clean D {clean_d:.3} C {clean_c:.3} | v1k5 D {:.3} C {:.3} | auc D {auc_d:.2} C {auc_c:.2}",
                        rd.attacked_mean, rc.attacked_mean
                    ));
                }
                println!(
                    "extent {extent} noise {noise} epochs {epochs}: sledge {sledge_wins}/3 auc {auc_wins}/3"
                );
                for row in rows {
                    println!("{row}");
                }
            }
        }
    }
}
