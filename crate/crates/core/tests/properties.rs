use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use resattunet::attention::{Cbam, CbamConfig};
use resattunet::loss::{
    class_weights_from_counts, cross_entropy, dice_loss, focal_loss, weighted_cross_entropy, ClassWeights,
};
use resattunet::metrics::{per_class, precision_recall_f1, Averaging, ConfusionMatrix, MetricReport};
use resattunet::model::ResidualBlock;
use resattunet::nn::{init_rng, Builder, ParameterStore};
use resattunet::train::load_weights;
use resattunet::{ModelConfig, ResAttUNet, Tape, Tensor};

fn random(seed: u64, shape: &[usize], scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

fn labels(seed: u64, n: usize, k: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..=k) as u8).collect()
}

fn bits<T: Copy + Into<f64>>(xs: &[T]) -> Vec<u64> {
    xs.iter().map(|&x| x.into().to_bits()).collect()
}

fn cbam_with_random_weights(seed: u64, channels: usize, cfg: &CbamConfig) -> (Cbam, ParameterStore<f64>) {
    let mut store = ParameterStore::new();
    let mut init = init_rng(seed);
    let cbam = Cbam::new(&mut Builder::new(&mut store, &mut init), channels, cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in store.iter_mut() {
        for x in p.value.data_mut() {
            *x = rng.gen_range(-2.0..2.0);
        }
    }
    (cbam, store)
}

/// Runs CBAM and returns (input, channel gate, spatial gate, output).
fn run_cbam(cbam: &Cbam, store: &ParameterStore<f64>, x: &Tensor<f64>) -> [Tensor<f64>; 4] {
    let mut tape = Tape::new();
    let params = store.bind(&mut tape);
    let f = tape.leaf(x.clone());
    let t = cbam.trace(&mut tape, &params, f).unwrap();
    [f, t.channel_gate, t.spatial_gate, t.output].map(|v| tape.value(v).clone())
}

fn cbam_cfg() -> CbamConfig {
    CbamConfig {
        ratio: 2,
        spatial_kernel: 3,
        slope: 0.01,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cbam_contracts_for_any_weights(seed in any::<u64>()) {
        // Weights this large saturate the sigmoid to exactly 0 or 1 in
        // floating point, so only the closed interval is guaranteed here.
        let (cbam, store) = cbam_with_random_weights(seed, 4, &cbam_cfg());
        let [f, mc, ms, out] = run_cbam(&cbam, &store, &random(seed, &[2, 4, 5, 5], 3.0));
        for (a, b) in f.data().iter().zip(out.data()) {
            prop_assert!(b.abs() <= a.abs());
        }
        for g in mc.data().iter().chain(ms.data()) {
            prop_assert!((0.0..=1.0).contains(g));
        }
    }

    #[test]
    fn initialized_cbam_gates_are_strictly_inside_unit_interval(seed in any::<u64>()) {
        let mut store = ParameterStore::new();
        let mut init = init_rng(seed);
        let cbam = Cbam::new(&mut Builder::new(&mut store, &mut init), 8, &CbamConfig::default()).unwrap();
        let [f, mc, ms, out] = run_cbam(&cbam, &store, &random(seed, &[1, 8, 6, 6], 3.0));
        for (a, b) in f.data().iter().zip(out.data()) {
            prop_assert!(b.abs() <= a.abs());
        }
        for g in mc.data().iter().chain(ms.data()) {
            prop_assert!(*g > 0.0 && *g < 1.0);
        }
    }

    #[test]
    fn cbam_is_batch_equivariant(seed in any::<u64>()) {
        let (cbam, store) = cbam_with_random_weights(seed, 4, &cbam_cfg());
        let x = random(seed, &[3, 4, 4, 4], 1.0);
        let out = run_cbam(&cbam, &store, &x)[3].clone();
        // Reverse the batch.
        let plane = 4 * 16;
        let rev: Vec<f64> = x.data().chunks(plane).rev().flatten().copied().collect();
        let out_rev = run_cbam(&cbam, &store, &Tensor::new(vec![3, 4, 4, 4], rev).unwrap())[3].clone();
        let back: Vec<f64> = out_rev.data().chunks(plane).rev().flatten().copied().collect();
        prop_assert_eq!(bits(out.data()), bits(&back));
    }

    #[test]
    fn channel_gate_ignores_spatial_permutation(seed in any::<u64>()) {
        let (cbam, store) = cbam_with_random_weights(seed, 4, &cbam_cfg());
        let x = random(seed, &[1, 4, 3, 3], 1.0);
        // Transpose every 3×3 plane.
        let t = Tensor::from_fn(&[1, 4, 3, 3], |i| {
            let (c, y, xx) = (i / 9, (i % 9) / 3, i % 3);
            x.data()[c * 9 + xx * 3 + y]
        });
        let a = run_cbam(&cbam, &store, &x)[1].clone();
        let b = run_cbam(&cbam, &store, &t)[1].clone();
        prop_assert!(a.max_abs_diff(&b) < 1e-14);
    }

    #[test]
    fn focal_gamma_zero_and_uniform_weights_equal_plain_xent(seed in any::<u64>(), k in 2usize..6) {
        let logits = random(seed, &[2, k, 3, 4], 4.0);
        let mut y = labels(seed, 24, k);
        y[0] = 1;
        let plain = cross_entropy(&logits, &y).unwrap();
        let focal = focal_loss(&logits, &y, 0.0).unwrap();
        let uniform = weighted_cross_entropy(&logits, &y, &ClassWeights::new(vec![2.5; k]).unwrap()).unwrap();
        prop_assert_eq!(plain.loss.value.to_bits(), focal.loss.value.to_bits());
        prop_assert_eq!(plain.loss.value.to_bits(), uniform.loss.value.to_bits());
        prop_assert_eq!(bits(plain.grad.data()), bits(focal.grad.data()));
        prop_assert_eq!(bits(plain.grad.data()), bits(uniform.grad.data()));
    }

    #[test]
    fn losses_are_nonnegative(seed in any::<u64>()) {
        let logits = random(seed, &[1, 3, 4, 4], 5.0);
        let mut y = labels(seed, 16, 3);
        y[0] = 2;
        let w = ClassWeights::new(vec![0.5, 1.0, 4.0]).unwrap();
        prop_assert!(weighted_cross_entropy(&logits, &y, &w).unwrap().loss.value >= 0.0);
        prop_assert!(focal_loss(&logits, &y, 2.0).unwrap().loss.value >= 0.0);
        prop_assert!(dice_loss(&logits, &y, 1.0).unwrap().loss.value >= 0.0);
    }

    #[test]
    fn ignoring_a_pixel_removes_exactly_its_contribution(seed in any::<u64>(), drop in 0usize..12) {
        let logits = random(seed, &[1, 3, 3, 4], 3.0);
        let mut y = labels(seed, 12, 3);
        y[(drop + 1) % 12] = 1;
        let w = ClassWeights::new(vec![0.5, 1.0, 4.0]).unwrap();
        let full = weighted_cross_entropy(&logits, &y, &w).unwrap().loss;
        let was = y[drop];
        y[drop] = 0;
        let less = weighted_cross_entropy(&logits, &y, &w).unwrap().loss;
        prop_assert!(less.valid_pixels <= full.valid_pixels);
        if was != 0 {
            // Rebuild the dropped pixel's weighted term from its own logits.
            let col: Vec<f64> = (0..3).map(|c| logits.data()[c * 12 + drop]).collect();
            let lse = col.iter().map(|v| v.exp()).sum::<f64>().ln();
            let wc = w.weight(was);
            let term = wc * (lse - col[was as usize - 1]);
            let total = less.value * less.weight_mass + term;
            prop_assert!((total / full.weight_mass - full.value).abs() < 1e-12);
            prop_assert_eq!(less.valid_pixels + 1, full.valid_pixels);
        } else {
            prop_assert_eq!(less, full);
        }
    }

    #[test]
    fn class_weights_are_scale_invariant(counts in prop::collection::vec(0u64..1_000_000, 1..16), scale in 1u64..5000) {
        prop_assume!(counts.iter().any(|&c| c > 0));
        let a = class_weights_from_counts(&counts).unwrap();
        let scaled: Vec<u64> = counts.iter().map(|c| c * scale).collect();
        let b = class_weights_from_counts(&scaled).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs());
        }
    }

    #[test]
    fn micro_scores_equal_subset_accuracy(seed in any::<u64>(), k in 1usize..7, n in 1usize..200) {
        let y = labels(seed, n, k);
        let p: Vec<u8> = labels(seed ^ 1, n, k).into_iter().map(|v| v.max(1)).collect();
        prop_assume!(y.iter().any(|&v| v != 0));
        let cm = ConfusionMatrix::from_labels(&y, &p, k).unwrap();
        let r = MetricReport::from_confusion(&cm).unwrap();
        // Counting oracle.
        let valid: Vec<(u8, u8)> = y.iter().zip(&p).filter(|(t, _)| **t != 0).map(|(t, q)| (*t, *q)).collect();
        let acc = valid.iter().filter(|(t, q)| t == q).count() as f64 / valid.len() as f64;
        prop_assert_eq!(r.subset_accuracy, acc);
        prop_assert_eq!(r.micro_precision, acc);
        prop_assert_eq!(r.micro_recall, acc);
        prop_assert_eq!(r.micro_f1, acc);
        prop_assert_eq!(r.weighted_recall, r.micro_recall);
        for c in 1..=k as u8 {
            let tp = valid.iter().filter(|&&(t, q)| t == c && q == c).count() as u64;
            let row = valid.iter().filter(|&&(t, _)| t == c).count() as u64;
            let col = valid.iter().filter(|&&(_, q)| q == c).count() as u64;
            prop_assert_eq!(cm.get(c as usize, c as usize), tp);
            let s = per_class(&cm)[c as usize - 1];
            prop_assert_eq!(s.support, row);
            if col > 0 {
                prop_assert_eq!(s.precision, tp as f64 / col as f64);
            }
        }
    }

    #[test]
    fn class_permutation_permutes_per_class_scores(seed in any::<u64>(), k in 2usize..6, shift in 1usize..5) {
        let y = labels(seed, 150, k);
        let p: Vec<u8> = labels(seed ^ 2, 150, k).into_iter().map(|v| v.max(1)).collect();
        prop_assume!(y.iter().any(|&v| v != 0));
        let perm = |v: u8| if v == 0 { 0 } else { ((v as usize - 1 + shift) % k + 1) as u8 };
        let a = ConfusionMatrix::from_labels(&y, &p, k).unwrap();
        let b = ConfusionMatrix::from_labels(
            &y.iter().map(|&v| perm(v)).collect::<Vec<_>>(),
            &p.iter().map(|&v| perm(v)).collect::<Vec<_>>(),
            k,
        ).unwrap();
        let (sa, sb) = (per_class(&a), per_class(&b));
        for c in 0..k {
            prop_assert_eq!(sa[c], sb[(c + shift) % k]);
        }
        for avg in [Averaging::Micro, Averaging::Macro] {
            let (x, y) = (precision_recall_f1(&a, avg).unwrap(), precision_recall_f1(&b, avg).unwrap());
            // Macro sums run in a different order.
            prop_assert!((x.f1 - y.f1).abs() < 1e-12 && (x.recall - y.recall).abs() < 1e-12);
        }
    }

    #[test]
    fn ignored_pixels_never_change_metrics(seed in any::<u64>(), extra in 1usize..50) {
        let mut y = labels(seed, 60, 4);
        y[0] = 3;
        let mut p: Vec<u8> = labels(seed ^ 3, 60, 4).into_iter().map(|v| v.max(1)).collect();
        let before = MetricReport::from_confusion(&ConfusionMatrix::from_labels(&y, &p, 4).unwrap()).unwrap();
        y.extend(std::iter::repeat_n(0, extra));
        p.extend((0..extra).map(|i| (i % 4 + 1) as u8));
        let after = MetricReport::from_confusion(&ConfusionMatrix::from_labels(&y, &p, 4).unwrap()).unwrap();
        prop_assert_eq!(before, after);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn model_output_matches_input_extent(seed in any::<u64>(), hm in 1usize..4, wm in 1usize..4, b in 1usize..3) {
        let model = ResAttUNet::<f32>::new(ModelConfig::miniature(3, 5), seed).unwrap();
        let x = random(seed, &[b, 3, 4 * hm, 4 * wm], 1.0).cast::<f32>();
        let y = model.logits(&x).unwrap();
        prop_assert_eq!(y.shape(), &[b, 5, 4 * hm, 4 * wm][..]);
    }
}

#[test]
fn model_is_batch_equivariant_and_deterministic() {
    let model = ResAttUNet::<f32>::new(ModelConfig::miniature(3, 4), 9).unwrap();
    let x = random(1, &[3, 3, 8, 8], 1.0).cast::<f32>();
    let batched = model.logits(&x).unwrap();
    assert_eq!(bits(batched.data()), bits(model.logits(&x).unwrap().data()));
    let per = 3 * 64;
    let out_per = 4 * 64;
    for i in 0..3 {
        let xi = Tensor::new(vec![1, 3, 8, 8], x.data()[i * per..(i + 1) * per].to_vec()).unwrap();
        let yi = model.logits(&xi).unwrap();
        for (a, b) in yi.data().iter().zip(&batched.data()[i * out_per..(i + 1) * out_per]) {
            assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
        }
    }
}

#[test]
fn forward_backward_leaves_parameters_untouched() {
    let model = ResAttUNet::<f64>::new(ModelConfig::miniature(2, 3), 4).unwrap();
    let before = model.params().clone();
    let mut tape = Tape::new();
    let x = tape.leaf(random(3, &[1, 2, 4, 4], 1.0));
    let (y, _) = model.forward(&mut tape, x).unwrap();
    let seed = Tensor::full(tape.value(y).shape(), 1.0);
    tape.backward(y, seed).unwrap();
    for (a, b) in model.params().iter().zip(before.iter()) {
        assert_eq!(bits(a.value.data()), bits(b.value.data()));
    }
}

#[test]
fn zeroed_residual_blocks_are_the_identity() {
    let cfg = ModelConfig::miniature(3, 4);
    let mut store = ParameterStore::<f32>::new();
    let mut init = init_rng(0);
    let mut b = Builder::new(&mut store, &mut init);
    let blocks: Vec<ResidualBlock> = (0..3)
        .map(|i| ResidualBlock::new(&mut b.scope(&format!("r{i}")), 8, &cfg).unwrap())
        .collect();
    for p in store.iter_mut() {
        p.value.fill(0.0);
    }
    let x = random(5, &[2, 8, 4, 4], 10.0).cast::<f32>();
    let mut tape = Tape::new();
    let params = store.bind(&mut tape);
    let mut h = tape.leaf(x.clone());
    for block in &blocks {
        h = block.forward(&mut tape, &params, h).unwrap();
    }
    assert_eq!(bits(tape.value(h).data()), bits(x.data()));
}

#[test]
fn zeroed_bottleneck_network_equals_network_without_bottleneck() {
    let cfg = ModelConfig::miniature(3, 4);
    let mut model = ResAttUNet::<f32>::new(cfg.clone(), 2).unwrap();
    for p in model.params_mut().iter_mut().filter(|p| p.name.starts_with("residual")) {
        p.value.fill(0.0);
    }
    let mut bare = ResAttUNet::<f32>::new(ModelConfig { residual_blocks: 0, ..cfg }, 0).unwrap();
    let records: Vec<(String, Tensor<f32>)> =
        model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    load_weights(bare.params_mut(), &records).unwrap();
    let x = random(6, &[1, 3, 8, 8], 1.0).cast::<f32>();
    assert_eq!(
        bits(model.logits(&x).unwrap().data()),
        bits(bare.logits(&x).unwrap().data())
    );
}
