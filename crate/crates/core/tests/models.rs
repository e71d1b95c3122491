use proptest::prelude::*;
use pseudo3d::analysis::{count_flops, count_params};
use pseudo3d::data::{assemble_batch, extract_patch, extract_stack, generate_set, PhantomPreset, PhantomSpec};
use pseudo3d::losses::{loss_node, one_hot, LossKind, DICE_EPSILON};
use pseudo3d::models::{BackboneKind, Mode, Model, ModelSpec, Phase};
use pseudo3d::tensor::{ConvGeometry, Graph, Tensor};
use pseudo3d::training::{train_step, AdamConfig, AdamState, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

const DEPTHS: [usize; 6] = [3, 5, 7, 9, 11, 13];

/// The fourteen variants of one backbone; the volumetric one takes 8-slice
/// patches to stay small.
fn variants(backbone: BackboneKind, c: usize, k: usize) -> Vec<ModelSpec> {
    let mut out = vec![ModelSpec::new(Mode::End2End2d, backbone, 1, c, k)];
    for mode in [Mode::Proposed, Mode::ChannelBased] {
        out.extend(DEPTHS.iter().map(|&d| ModelSpec::new(mode, backbone, d, c, k)));
    }
    out.push(ModelSpec::new(Mode::End2End3d, backbone, 8, c, k));
    out.into_iter().map(|s| s.with_base_filters(2)).collect()
}

fn random_input(spec: &ModelSpec, n: usize, plane: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[n, spec.in_channels, spec.depth, plane, plane], -1.0, 1.0, &mut rng)
}

#[test]
fn one_step_moves_every_parameter_tensor() {
    let config = TrainConfig::default();
    for backbone in [BackboneKind::UNet, BackboneKind::SegNet] {
        for spec in variants(backbone, 2, 3) {
            let mut model = Model::new(&spec, 1).unwrap();
            let before = model.params().clone();
            let mut adam = AdamState::new(model.params(), AdamConfig::default());
            let input = random_input(&spec, 2, 16, 2);
            let out_depth = if spec.mode == Mode::End2End3d { spec.depth } else { 1 };
            let labels: Vec<u8> = (0..2 * out_depth * 256).map(|i| (i * 7 % 3) as u8).collect();
            let target = one_hot(&labels, 3, 2, &[out_depth, 16, 16]).unwrap();
            train_step(&mut model, &mut adam, input, target, 1e-3, &config).unwrap();
            for ((name, a), b) in before.names().iter().zip(before.values()).zip(model.params().values()) {
                assert!(a.max_abs_diff(b) > 0.0, "{}: {name} did not move", spec.label());
            }
        }
    }
}

#[test]
fn every_mode_outputs_a_distribution_per_pixel() {
    for backbone in [BackboneKind::UNet, BackboneKind::SegNet] {
        for spec in variants(backbone, 1, 4) {
            let model = Model::new(&spec, 3).unwrap();
            let mut g = Graph::new();
            let x = g.leaf(random_input(&spec, 1, 16, 4), false);
            let out = model.forward(&mut g, x, Phase::Infer, false).unwrap();
            let probs = g.value(out.probs);
            let depth_out = if spec.mode == Mode::End2End3d { 8 } else { 1 };
            assert_eq!(probs.shape(), [1, 4, depth_out, 16, 16], "{}", spec.label());
            let n = depth_out * 256;
            for p in 0..n {
                let s: f64 = (0..4).map(|c| probs.data()[c * n + p]).sum();
                assert!((s - 1.0).abs() < 1e-12, "{}: pixel {p} sums to {s}", spec.label());
            }
        }
    }
}

#[test]
fn parameter_counts_depend_only_on_the_spec() {
    for spec in variants(BackboneKind::UNet, 4, 4) {
        let a = Model::new(&spec, 0).unwrap();
        let b = Model::new(&spec, 99).unwrap();
        assert_eq!(count_params(&a), count_params(&b));
        assert_eq!(count_params(&a), a.params().numel());
    }
}

#[test]
fn flops_scale_with_the_plane() {
    for spec in variants(BackboneKind::UNet, 1, 2) {
        let model = Model::new(&spec, 0).unwrap();
        let base = count_flops(&model, [1, 1, spec.depth, 16, 16]).unwrap();
        assert_eq!(count_flops(&model, [1, 1, spec.depth, 32, 16]).unwrap(), 2 * base);
        assert_eq!(count_flops(&model, [1, 1, spec.depth, 32, 32]).unwrap(), 4 * base);
    }
}

#[test]
fn backward_is_bit_reproducible() {
    let spec = ModelSpec::new(Mode::Proposed, BackboneKind::UNet, 5, 1, 3).with_base_filters(4);
    let model = Model::new(&spec, 5).unwrap();
    let volume = generate_set(&PhantomSpec::preset(PhantomPreset::Kidney, [8, 16, 16], 0), 1)
        .unwrap()
        .remove(0)
        .0;
    let samples: Vec<_> = (2..6).map(|z| extract_stack(&volume, z, 5).unwrap()).collect();
    let grads = || {
        let refs: Vec<_> = samples.iter().collect();
        let batch = assemble_batch(&refs, 3).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(batch.input, false);
        let out = model.forward(&mut g, x, Phase::Train, true).unwrap();
        let l = loss_node(&mut g, out.probs, Rc::new(batch.target), LossKind::Combined, DICE_EPSILON).unwrap();
        let mut gr = g.backward(l).unwrap();
        out.param_vars
            .iter()
            .flat_map(|&v| gr.take(v).into_data())
            .map(f64::to_bits)
            .collect::<Vec<_>>()
    };
    assert_eq!(grads(), grads());
}

#[test]
fn volumetric_patches_feed_the_3d_model() {
    let volume = generate_set(&PhantomSpec::preset(PhantomPreset::Prostate, [12, 16, 16], 0), 1)
        .unwrap()
        .remove(0)
        .0;
    let spec = ModelSpec::new(Mode::End2End3d, BackboneKind::SegNet, 8, 1, 3).with_base_filters(2);
    let model = Model::new(&spec, 0).unwrap();
    let patch = extract_patch(&volume, 4, 8).unwrap();
    let batch = assemble_batch(&[&patch], 3).unwrap();
    let mut g = Graph::new();
    let x = g.leaf(batch.input, false);
    let out = model.forward(&mut g, x, Phase::Infer, false).unwrap();
    assert_eq!(g.value(out.probs).shape(), [1, 3, 8, 16, 16]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unpadded_depth_shrinks_by_two_and_padded_axes_keep_extent(d in 3usize..8, h in 3usize..8, w in 3usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64((d * 100 + h * 10 + w) as u64);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::uniform(&[1, 2, d, h, w], -1.0, 1.0, &mut rng), false);
        let k = g.leaf(Tensor::uniform(&[3, 2, 3, 3, 3], -1.0, 1.0, &mut rng), false);
        let b = g.leaf(Tensor::zeros(&[3]), false);
        let y = g.conv(x, k, b, ConvGeometry::volumetric(3, [false, true, true])).unwrap();
        prop_assert_eq!(g.value(y).shape(), &[1, 3, d - 2, h, w]);
        let y = g.conv(x, k, b, ConvGeometry::volumetric(3, [true, false, true])).unwrap();
        prop_assert_eq!(g.value(y).shape(), &[1, 3, d, h - 2, w]);
    }

    #[test]
    fn softmax_sums_to_one(seed in 0u64..1000, k in 2usize..6, scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::uniform(&[2, k, 2, 3, 3], -scale, scale, &mut rng), false);
        let p = g.softmax(x).unwrap();
        let probs = g.value(p).data();
        let n = 18;
        for b in 0..2 {
            for s in 0..n {
                let total: f64 = (0..k).map(|c| probs[(b * k + c) * n + s]).sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
            }
        }
    }
}
