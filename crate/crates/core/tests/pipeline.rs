use pseudo3d::analysis::{regions, slice_centroids, structure_depth, DepthReduction, FEATURES_HEADER};
use pseudo3d::data::io::save_volume;
use pseudo3d::data::{extract_stack, generate_set, LabeledVolume, PhantomPreset, PhantomSpec, SliceStackSample};
use pseudo3d::experiment::{run_grid, ExperimentConfig};
use pseudo3d::losses::{loss_node, one_hot, LossKind, DICE_EPSILON};
use pseudo3d::models::{BackboneKind, Mode, Model, ModelSpec};
use pseudo3d::tensor::{Graph, Tensor};
use pseudo3d::training::{
    run_training, score_samples, train_step, AdamConfig, AdamState, SampleValidation, TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::process::Command;
use std::rc::Rc;

fn phantoms(preset: PhantomPreset, dims: [usize; 3], count: usize, seed: u64) -> Vec<LabeledVolume> {
    generate_set(&PhantomSpec::preset(preset, dims, seed), count)
        .unwrap()
        .into_iter()
        .map(|(v, _)| v)
        .collect()
}

#[test]
fn phantom_metadata_matches_the_rasterized_masks() {
    for preset in [PhantomPreset::Brain, PhantomPreset::Kidney, PhantomPreset::Prostate] {
        let spec = PhantomSpec::preset(preset, [20, 48, 48], 3);
        for (volume, metas) in generate_set(&spec, 3).unwrap() {
            for meta in &metas {
                let found = regions(&volume.labels, volume.dims, meta.class);
                assert_eq!(found.len(), 1, "class {} split into {} regions", meta.class, found.len());
                let r = &found[0];
                assert_eq!(r.voxels, meta.voxel_count);
                assert_eq!(r.first_slice, meta.first_slice);
                assert_eq!(r.depth(), meta.depth);

                let centroids = slice_centroids(&volume, meta.class);
                for &(z, cy, cx) in &meta.centre_path {
                    let (y, x) = centroids[z].expect("occupied slice");
                    assert!((y - cy).abs() < 0.5 && (x - cx).abs() < 0.5, "slice {z}: ({y}, {x}) vs ({cy}, {cx})");
                }
                let depth = structure_depth(std::slice::from_ref(&volume), meta.class, DepthReduction::RegionMean).unwrap();
                assert_eq!(depth, meta.depth as f64);
            }
        }
    }
}

fn stacks(volumes: &[LabeledVolume], d: usize) -> Vec<SliceStackSample> {
    volumes
        .iter()
        .flat_map(|v| (0..v.dims[0]).map(move |z| extract_stack(v, z, d).unwrap()))
        .collect()
}

#[test]
fn retained_checkpoint_has_the_lowest_validation_loss() {
    let volumes = phantoms(PhantomPreset::Kidney, [6, 16, 16], 3, 1);
    let train = stacks(&volumes[..2], 3);
    let val = stacks(&volumes[2..], 3);
    let spec = ModelSpec::new(Mode::Proposed, BackboneKind::UNet, 3, 1, 3).with_base_filters(2);
    let mut model = Model::new(&spec, 4).unwrap();
    let config = TrainConfig {
        max_epochs: 6,
        initial_lr: 3e-3,
        ..TrainConfig::default()
    };
    let mut validation = SampleValidation {
        samples: &val,
        config: &config,
    };
    let history = run_training(&mut model, &train, &mut validation, &config, None).unwrap();
    let kept = score_samples(&model, &val, &config).unwrap().loss;
    assert!(kept <= history.baseline_val_loss);
    for r in &history.epochs {
        assert!(kept <= r.val_loss, "epoch {}: {} < {kept}", r.epoch, r.val_loss);
    }
}

#[test]
fn weight_decay_changes_updates_but_not_reported_loss() {
    let volumes = phantoms(PhantomPreset::Prostate, [4, 16, 16], 1, 2);
    let samples = stacks(&volumes, 1);
    let refs: Vec<_> = samples.iter().collect();
    let batch = pseudo3d::data::assemble_batch(&refs, 2).unwrap();
    let spec = ModelSpec::new(Mode::End2End2d, BackboneKind::UNet, 1, 1, 2).with_base_filters(2);
    let step = |l2: f64| {
        let mut model = Model::new(&spec, 0).unwrap();
        let mut adam = AdamState::new(model.params(), AdamConfig { l2, ..AdamConfig::default() });
        let config = TrainConfig::default();
        let mut losses = Vec::new();
        for _ in 0..2 {
            losses.push(
                train_step(&mut model, &mut adam, batch.input.clone(), batch.target.clone(), 1e-3, &config).unwrap(),
            );
        }
        (losses, model.params().values().to_vec())
    };
    let (plain, p_plain) = step(0.0);
    let (decayed, p_decayed) = step(1e-1);
    assert_eq!(plain[0], decayed[0]);
    assert!(p_plain.iter().zip(&p_decayed).any(|(a, b)| a.max_abs_diff(b) > 0.0));
}

#[test]
fn combined_loss_descends_on_a_fixed_sample() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut logits = Tensor::uniform(&[1, 3, 1, 6, 6], -1.0, 1.0, &mut rng);
    let labels: Vec<u8> = (0..36).map(|i| (i / 12) as u8).collect();
    let target = Rc::new(one_hot(&labels, 3, 1, &[1, 6, 6]).unwrap());
    let mut previous = f64::INFINITY;
    for _ in 0..50 {
        let mut g = Graph::new();
        let x = g.leaf(logits.clone(), true);
        let p = g.softmax(x).unwrap();
        let l = loss_node(&mut g, p, Rc::clone(&target), LossKind::Combined, DICE_EPSILON).unwrap();
        let value = g.value(l).data()[0];
        assert!(value <= previous, "{value} after {previous}");
        previous = value;
        let grad = g.backward(l).unwrap().take(x);
        for (w, d) in logits.data_mut().iter_mut().zip(grad.data()) {
            *w -= 0.5 * d;
        }
    }
}

fn tiny_grid(out: &Path) -> ExperimentConfig {
    ExperimentConfig::parse(&format!(
        r#"
output_dir = "{}"
folds = 2
[source.phantom]
preset = "prostate"
dims = [8, 16, 16]
count = 4
[grid]
modes = ["end2end_2d", "proposed", "channel_based", "end2end_3d"]
backbones = ["unet", "segnet"]
depths = [3]
patch_depth = 8
base_filters = 2
[train]
max_epochs = 1
"#,
        out.display()
    ))
    .unwrap()
}

#[test]
fn every_cell_appears_once_in_the_aggregate_table() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tiny_grid(tmp.path());
    let summary = run_grid(&config, &mut |_| {}).unwrap();
    let table = std::fs::read_to_string(&summary.aggregate_path).unwrap();
    let mut keys: Vec<String> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').take(3).collect::<Vec<_>>().join(","))
        .collect();
    assert_eq!(keys.len(), 8);
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), 8);
    for line in table.lines().skip(1) {
        assert_eq!(line.split(',').nth(3), Some("2"));
    }
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_pseudo3d")).args(args).output().unwrap()
}

#[test]
fn command_line_verbs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let config_path = tmp.path().join("grid.toml");
    std::fs::write(&config_path, tiny_grid(&out).to_toml().unwrap()).unwrap();
    let config = config_path.to_str().unwrap();

    let run = cli(&["run", config]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let table = String::from_utf8(run.stdout).unwrap();
    assert_eq!(table.lines().count(), 9);

    let agg = cli(&["aggregate", out.to_str().unwrap()]);
    assert!(agg.status.success());
    assert_eq!(String::from_utf8(agg.stdout).unwrap(), table);

    let profile = cli(&["profile", config, "--repeats", "0"]);
    assert!(profile.status.success());
    let profile = String::from_utf8(profile.stdout).unwrap();
    assert_eq!(profile.lines().count(), 9);
    assert!(profile.lines().next().unwrap().starts_with("label,input_shape,parameter_count"));

    let data = tmp.path().join("data");
    std::fs::create_dir(&data).unwrap();
    let volumes = phantoms(PhantomPreset::Kidney, [8, 24, 24], 2, 6);
    for v in &volumes {
        save_volume(v, &data).unwrap();
    }
    let features = cli(&["features", data.to_str().unwrap()]);
    assert!(features.status.success(), "{}", String::from_utf8_lossy(&features.stderr));
    let features = String::from_utf8(features.stdout).unwrap();
    assert_eq!(features.lines().next(), Some(FEATURES_HEADER));
    assert_eq!(features.lines().count(), 1 + 2 + 3);

    let image = data.join(format!("{}.image.ssv", volumes[0].id));
    let ppm = tmp.path().join("slice.ppm");
    let render = cli(&["render", image.to_str().unwrap(), "4", ppm.to_str().unwrap()]);
    assert!(render.status.success(), "{}", String::from_utf8_lossy(&render.stderr));
    let bytes = std::fs::read(&ppm).unwrap();
    assert!(bytes.starts_with(b"P6\n24 24\n255\n"));
    assert_eq!(bytes.len(), 13 + 3 * 24 * 24);

    std::fs::write(&config_path, "output_dir = \"x\"\n[train]\nmax_epoch = 3\n").unwrap();
    let bad = cli(&["run", config]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("train.max_epoch"));
}
