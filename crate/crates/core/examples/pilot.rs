//! Timing and trend pilot behind the frozen acceptance thresholds.
//! Reproduce with `cargo run --release -p segrobust --example pilot`;
//! the observed numbers are recorded in docs/PILOT.md.

use std::time::Instant;

use segrobust::attack::{evaluate_robustness, AttackConfig, Recompute, Replacement, Selection};
use segrobust::data::{generate_synthetic, SynthConfig};
use segrobust::experiment::{clean_mean_dice, run_sweep, SweepDef};
use segrobust::loss::LossSpec;
use segrobust::nn::{build_unet, forward_graph, param_specs, train, Model, TrainConfig, UNetConfig};
use segrobust::rng;
use segrobust::tensor::gradcheck::check_gradients;
use segrobust::tensor::Tensor;

fn default_data() -> (segrobust::data::Dataset, segrobust::data::Dataset) {
    let train_cfg = SynthConfig::default();
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
    label: &str,
    spec: &LossSpec,
    master: u64,
    epochs: usize,
    data: &(segrobust::data::Dataset, segrobust::data::Dataset),
) -> (Model, Vec<f64>, f64) {
    let tc = TrainConfig {
        epochs,
        seed: master,
        ..TrainConfig::default()
    };
    let mut model = build_unet(&UNetConfig::default(), rng::derive_seed(master, 0, 1)).unwrap();
    model.label = label.to_string();
    let start = Instant::now();
    let (model, history) = train(model, &data.0, &data.1, spec, &tc).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let dices = history.epochs.iter().map(|r| r.val_dice).collect();
    (model, dices, secs)
}

fn main() {
    println!("== phase A: epochs to 0.85 val Dice, default config, master seed 42 ==");
    let data = default_data();
    let mut phase_a_models = Vec::new();
    let mut total_secs = 0.0;
    for (label, spec) in LossSpec::standard_four() {
        let (model, dices, secs) = train_one(&label, &spec, 42, 60, &data);
        total_secs += secs;
        let reach = dices.iter().position(|&d| d >= 0.85).map(|i| i + 1);
        let best = dices.iter().cloned().fold(0.0, f64::max);
        println!(
            "  {label:<16} reach85 {:>4}  final {:.4}  best {:.4}  {secs:.1}s / 60 epochs",
            reach.map_or("none".to_string(), |e| e.to_string()),
            dices.last().unwrap(),
            best
        );
        phase_a_models.push((label, model));
    }
    println!("  total 4-model 60-epoch wall time: {total_secs:.1}s");

    println!("== phase B: full-model gradient check cost (depth 2, base 4, 8×8) ==");
    let gc_config = UNetConfig {
        base_channels: 4,
        input_height: 8,
        input_width: 8,
        ..UNetConfig::default()
    };
    let probe = build_unet(&gc_config, 5).unwrap();
    let specs = param_specs(&gc_config);
    let n_params: usize = specs.iter().map(|s| s.shape.iter().product::<usize>()).sum();
    println!("  parameter scalars: {n_params}");
    let mask = {
        let mut m = Tensor::<f64>::zeros(&[1, 8, 8]);
        for r in 2..6 {
            for c in 2..6 {
                m.data_mut()[r * 8 + c] = 1.0;
            }
        }
        m
    };
    let image = {
        let mut stream = rng::stream(17);
        let mut img = Tensor::<f64>::zeros(&[1, 8, 8]);
        for v in img.data_mut() {
            *v = rng::uniform_f64(&mut stream, 0.0, 0.2);
        }
        img
    };
    for (label, spec) in LossSpec::standard_four() {
        let mut inputs: Vec<(&str, Tensor<f64>)> = probe
            .params()
            .iter()
            .map(|(name, t)| (name.as_str(), t.map(|v| v as f64)))
            .collect();
        inputs.push(("image", image.clone()));
        let cfg = gc_config;
        let mask = mask.clone();
        let spec2 = spec.clone();
        let start = Instant::now();
        let report = check_gradients(&inputs, 1e-5, move |tape, vars| {
            let (img_var, param_vars) = vars.split_last().unwrap();
            let logits = forward_graph(tape, &cfg, param_vars, *img_var)?;
            let probs = tape.sigmoid(logits);
            let y = tape.input(mask.clone());
            spec2.build(tape, probs, y)
        })
        .unwrap();
        println!(
            "  {label:<16} max rel err {:.3e}  passed {}  {:.1}s",
            report.max_rel_error(),
            report.passed(),
            start.elapsed().as_secs_f64()
        );
    }

    println!("== phase C: trend probes at master seeds 1..3 ==");
    let dice_spec = LossSpec::standard_four().remove(1);
    let combo_spec = LossSpec::standard_four().remove(2);
    let mut seed_models = Vec::new();
    for seed in [1u64, 2, 3] {
        let (dice_model, dices_d, _) = train_one(&dice_spec.0, &dice_spec.1, seed, 60, &data);
        let (combo_model, dices_c, _) = train_one(&combo_spec.0, &combo_spec.1, seed, 60, &data);
        println!(
            "  seed {seed}: Dice final val {:.4}, BCE+Dice final val {:.4}",
            dices_d.last().unwrap(),
            dices_c.last().unwrap()
        );

        let sledge = AttackConfig {
            k: 5,
            selection: Selection::ByAbs,
            replacement: Replacement::Fixed { value: 1.0 },
            recompute: Recompute::Off,
            retain_images: false,
        };
        let rd = evaluate_robustness(&dice_model, &data.1, &sledge).unwrap();
        let rc = evaluate_robustness(&combo_model, &data.1, &sledge).unwrap();
        println!(
            "    v=1.0 k=5: Dice {:.4} vs BCE+Dice {:.4}  → combo ahead: {}",
            rd.attacked_mean,
            rc.attacked_mean,
            rc.attacked_mean > rd.attacked_mean
        );

        let grid = SweepDef::pixel_count_fixed();
        let cd = run_sweep(&dice_model, "Dice", &data.1, &grid, rng::derive_seed(seed, 0, 2)).unwrap();
        let cc = run_sweep(&combo_model, "BCE+Dice", &data.1, &grid, rng::derive_seed(seed, 1, 2)).unwrap();
        println!(
            "    auc over N: Dice {:.4} vs BCE+Dice {:.4}  → combo ahead: {}",
            cd.auc(),
            cc.auc(),
            cc.auc() > cd.auc()
        );
        seed_models.push((seed, dice_model, combo_model));
    }

    println!("== phase D: 100-iteration stability at N ∈ {{5, 30}} ==");
    let (_, _, combo1) = &seed_models[0];
    for n in [5usize, 30] {
        let run = |sweep_seed: u64| {
            let ac = AttackConfig {
                k: n,
                selection: Selection::ByAbs,
                replacement: Replacement::RandomUniform {
                    lo: 0.0,
                    hi: 1.0,
                    iterations: 100,
                    seed: sweep_seed,
                },
                recompute: Recompute::Off,
                retain_images: false,
            };
            evaluate_robustness(combo1, &data.1, &ac).unwrap()
        };
        let start = Instant::now();
        let a = run(101);
        let b = run(202);
        let se = ((a.attacked_std.powi(2) + b.attacked_std.powi(2)) / 100.0).sqrt();
        println!(
            "  N={n:<3} mean(seed 101) {:.5}  mean(seed 202) {:.5}  |Δ| {:.2e}  3·SE {:.2e}  within: {}  ({:.1}s for both)",
            a.attacked_mean,
            b.attacked_mean,
            (a.attacked_mean - b.attacked_mean).abs(),
            3.0 * se,
            (a.attacked_mean - b.attacked_mean).abs() <= 3.0 * se,
            start.elapsed().as_secs_f64()
        );
    }

    println!("== phase E: clean scores of the phase A models ==");
    for (label, model) in &phase_a_models {
        println!(
            "  {label:<16} clean val Dice {:.4}",
            clean_mean_dice(model, &data.1).unwrap()
        );
    }
}
