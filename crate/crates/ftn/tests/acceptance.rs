//! Acceptance suite: one test per verification criterion, each printing
//! a PASS line with its measured numbers (run with `-- --nocapture` to
//! see them).

use ftn::analysis::{
    attention_score_macs, count_params, derive_variants, estimate_flops, FLOPS_GEOMETRY,
    FLOPS_TOLERANCE, PARAM_TOLERANCE,
};
use ftn::attention::{AttentionSpec, GroupAttention, MultiHeadAttention, APPLY_LABEL, SCORES_LABEL};
use ftn::data::generate_toy_set;
use ftn::decoder::{FusionMode, FPTConfig};
use ftn::encoder::{PGTConfig, Variant, STAGES};
use ftn::gradcheck::relative_error;
use ftn::model::{segmentation_loss, FtnModel, Mode, ModelConfig};
use ftn::tape::Tape;
use ftn::tensor::Tensor;
use ftn::train::{evaluate_miou, train_toy, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(data, shape).unwrap()
}

#[test]
fn criterion_01_parameter_budget_reproduction() {
    let derivations = derive_variants().expect("derivation succeeds");
    for d in &derivations {
        assert!(
            d.param_miss <= PARAM_TOLERANCE,
            "{}: {} params misses budget by {:.2}%",
            d.variant.name(),
            d.params,
            d.param_miss * 100.0
        );
        // The frozen configs are the pinned outcome of the search; every
        // run re-verifies they still qualify and still match.
        assert_eq!(d.chosen, PGTConfig::variant(d.variant));
        let cfg = &d.chosen;
        assert_eq!(cfg.groups, [64, 16, 1, 1]);
        assert_eq!(cfg.mlp_ratios, [4; 4]);
        for i in 0..STAGES {
            assert_eq!(cfg.head_dim(i), 32, "head dim at stage {}", i + 1);
            assert_eq!(cfg.dims[i], cfg.dims[0] << i, "channel doubling");
        }
    }
    let summary: Vec<String> = derivations
        .iter()
        .map(|d| format!("{}={}({:+.2}%)", d.variant.name(), d.params, d.param_miss * 100.0))
        .collect();
    println!("criterion 1 PASS: parameter budgets within +-5%: {}", summary.join(" "));
}

#[test]
fn criterion_02_flops_reproduction() {
    let mut summary = Vec::new();
    for v in Variant::ALL {
        let (_, f_budget) = v.budget();
        let report = estimate_flops(&PGTConfig::variant(v), FLOPS_GEOMETRY).unwrap();
        let miss = (report.macs_total() as f64 - f_budget).abs() / f_budget;
        assert!(
            miss <= FLOPS_TOLERANCE,
            "{}: {:.3} GMACs vs {:.1} G budget ({:.2}%)",
            v.name(),
            report.gflops(),
            f_budget / 1e9,
            miss * 100.0
        );
        summary.push(format!("{}={:.3}G({:+.2}%)", v.name(), report.gflops(), miss * 100.0));
    }
    println!("criterion 2 PASS: GFLOPs at 224x224 within +-15%: {}", summary.join(" "));
}

#[test]
fn criterion_03_stage_shape_law() {
    // Exact law on all four variants, analytically.
    for v in Variant::ALL {
        let cfg = PGTConfig::variant(v);
        for hw in [224usize, 256, 512] {
            let shapes = cfg.stage_shapes(hw, hw).unwrap();
            for (i, s) in shapes.iter().enumerate() {
                let want_tokens = hw * hw / (1 << (2 * i + 4));
                assert_eq!(s.tokens(), want_tokens, "{} at {hw}: stage {}", v.name(), i + 1);
                assert_eq!(s.dim, cfg.dims[0] << i);
            }
        }
    }
    // And on real tensors through a micro instantiation at each size.
    let micro = PGTConfig::custom(8, [1, 1, 1, 1], [16, 4, 1, 1], [1, 2, 4, 8]).unwrap();
    let mut init = ftn::nn::Init::new(3);
    let enc: ftn::encoder::PgtEncoder<f32> =
        ftn::encoder::PgtEncoder::new(&mut init, &micro, 3).unwrap();
    for hw in [224usize, 256, 512] {
        let img = Tensor::full(&[1, hw, hw, 3], 0.5);
        let pyramid = enc.forward(&mut Tape::inference(), &img, None).unwrap();
        for (i, f) in pyramid.stages.iter().enumerate() {
            let s = f.shape();
            assert_eq!(s[1] * s[2], hw * hw / (1 << (2 * i + 4)), "{hw} stage {}", i + 1);
            assert_eq!(s[3], micro.dims[i]);
        }
    }
    println!("criterion 3 PASS: stage shape law exact for all variants at 224/256/512 and on real tensors");
}

#[test]
fn criterion_04_single_group_equals_global_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let heads = 1 + trial % 3;
        let head_dim = [2usize, 4, 8][trial % 3];
        let dim = heads * head_dim;
        let side = [4usize, 6, 8][trial % 3];
        let mut init = ftn::nn::Init::new(1000 + trial as u64);
        let spec = AttentionSpec::new(heads, head_dim, 1, true).unwrap();
        let layer: GroupAttention<f64> = GroupAttention::new(&mut init, spec);
        let x = rand_tensor(&mut rng, &[1, side, side, dim], -2.0, 2.0);
        let mut tape = Tape::inference();
        let grouped = layer.forward(&mut tape, &x).unwrap();
        let flat = tape.reshape(&x, &[1, side * side, dim]).unwrap();
        let global = layer.attn.forward(&mut tape, &flat).unwrap();
        let global = tape.reshape(&global, &[1, side, side, dim]).unwrap();
        let diff = grouped.max_abs_diff(&global).unwrap();
        assert!(diff <= 1e-6, "trial {trial}: max abs diff {diff}");
        worst = worst.max(diff);
    }
    println!("criterion 4 PASS: G=1 equals global attention on 20 instances (worst diff {worst:.2e})");
}

#[test]
fn criterion_05_group_locality() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    for groups in [4usize, 16, 64] {
        let side = 16usize;
        let c = 8usize;
        let grid_side = (groups as f64).sqrt() as usize;
        let cell = side / grid_side;
        let mut init = ftn::nn::Init::new(groups as u64);
        let spec = AttentionSpec::new(2, c / 2, groups, true).unwrap();
        let layer: GroupAttention<f64> = GroupAttention::new(&mut init, spec);
        let x = rand_tensor(&mut rng, &[1, side, side, c], -1.0, 1.0);

        // Forward isolation: perturb every pixel of group (0, 0).
        let mut bumped = x.data().to_vec();
        for y in 0..cell {
            for xx in 0..cell {
                for ch in 0..c {
                    bumped[(y * side + xx) * c + ch] += 0.25;
                }
            }
        }
        let x2 = Tensor::from_vec(bumped, &[1, side, side, c]).unwrap();
        let y1 = layer.forward(&mut Tape::inference(), &x).unwrap();
        let y2 = layer.forward(&mut Tape::inference(), &x2).unwrap();
        let mut outside_equal = true;
        for y in 0..side {
            for xx in 0..side {
                let inside = y < cell && xx < cell;
                for ch in 0..c {
                    let i = (y * side + xx) * c + ch;
                    if inside {
                        continue;
                    }
                    outside_equal &= y1.data()[i].to_bits() == y2.data()[i].to_bits();
                }
            }
        }
        assert!(outside_equal, "G={groups}: perturbation leaked across groups");
        assert!(y1.data()[0] != y2.data()[0], "G={groups}: perturbed group unchanged");

        // Gradient isolation: loss over group (0, 0) outputs only.
        let mut tape = Tape::new();
        let out = layer.forward(&mut tape, &x).unwrap();
        let mut mask = vec![0.0f64; side * side * c];
        for y in 0..cell {
            for xx in 0..cell {
                for ch in 0..c {
                    mask[(y * side + xx) * c + ch] = 1.0;
                }
            }
        }
        let mask = Tensor::from_vec(mask, &[1, side, side, c]).unwrap();
        let masked = tape.mul(&out, &mask).unwrap();
        let loss = tape.sum_all(&masked).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let gx = grads.grad(&x).unwrap();
        for y in 0..side {
            for xx in 0..side {
                let inside = y < cell && xx < cell;
                for ch in 0..c {
                    let g = gx[(y * side + xx) * c + ch];
                    if inside {
                        continue;
                    }
                    assert_eq!(g, 0.0, "G={groups}: cross-group gradient at ({y},{xx},{ch})");
                }
            }
        }
    }
    println!("criterion 5 PASS: bit-exact forward isolation and exactly-zero cross-group gradients for G in {{4,16,64}}");
}

#[test]
fn criterion_06_end_to_end_gradcheck() {
    let config = ModelConfig::micro(2);
    let mut model: FtnModel<f64> = FtnModel::new(&config, 606).unwrap();
    model.set_mode(Mode::Train);
    let params_total = model.param_count();
    assert!(params_total <= 100_000, "micro config has {params_total} params");

    let mut rng = ChaCha8Rng::seed_from_u64(607);
    let img = rand_tensor(&mut rng, &[1, 32, 32, 3], 0.0, 1.0);
    let labels: Vec<usize> = (0..32 * 32).map(|_| rng.gen_range(0..2)).collect();

    // Analytic gradients in one pass.
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &img, None).unwrap();
    let parts = segmentation_loss(&mut tape, &out, &labels).unwrap();
    let grads = tape.backward(&parts.total).unwrap();
    let params = model.named_params();
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, t)| grads.grad(t).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    // Sample 200 coordinates across the whole parameter vector.
    let total: usize = params.iter().map(|(_, t)| t.numel()).sum();
    let mut coords: Vec<usize> = Vec::new();
    while coords.len() < 200 {
        let c = rng.gen_range(0..total);
        if !coords.contains(&c) {
            coords.push(c);
        }
    }

    let h = 1e-3;
    let loss_with = |model: &FtnModel<f64>| -> f64 {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &img, None).unwrap();
        let parts = segmentation_loss(&mut tape, &out, &labels).unwrap();
        parts.total.item().unwrap()
    };
    let mut worst = 0.0f64;
    for &coord in &coords {
        // Locate the owning parameter.
        let mut idx = coord;
        let mut which = 0usize;
        while idx >= params[which].1.numel() {
            idx -= params[which].1.numel();
            which += 1;
        }
        let name = params[which].0.clone();
        let eval = |delta: f64| -> f64 {
            let mut bumped = model.clone();
            bumped.visit_params(&mut |n, t| {
                if n == name {
                    let mut data = t.data().to_vec();
                    data[idx] += delta;
                    *t = Tensor::param(data, t.shape()).unwrap();
                }
            });
            loss_with(&bumped)
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let rel = relative_error(analytic[which][idx], numeric);
        assert!(
            rel < 1e-3,
            "{name}[{idx}]: analytic {} vs numeric {numeric} (rel {rel:.2e})",
            analytic[which][idx]
        );
        worst = worst.max(rel);
    }
    println!(
        "criterion 6 PASS: end-to-end gradcheck on {} params, 200 coordinates, max rel err {worst:.2e}",
        params_total
    );
}

#[test]
fn criterion_07_toy_training() {
    let mut model: FtnModel<f32> = FtnModel::new(&ModelConfig::toy(2), 7).unwrap();
    let train_set = generate_toy_set(200, 4, 64, 64, 2).unwrap();
    let eval_set = generate_toy_set(201, 4, 64, 64, 2).unwrap();
    let cfg = TrainConfig::default();
    assert_eq!(cfg.steps, 300);
    let trace = train_toy(&mut model, &train_set, &cfg).unwrap();

    let ln_k = (2.0f64).ln();
    let init_main = trace[0].main_loss;
    assert!(
        (init_main - ln_k).abs() <= 0.1 * ln_k,
        "initial main loss {init_main} vs ln K {ln_k}"
    );
    let init = trace[0].loss;
    let final_loss = trace.last().unwrap().loss;
    assert!(
        final_loss < 0.5 * init,
        "loss only fell from {init} to {final_loss}"
    );
    let miou_train = evaluate_miou(&model, &train_set).unwrap();
    let miou_eval = evaluate_miou(&model, &eval_set).unwrap();
    assert!(miou_eval >= 0.80, "held-out mIoU {miou_eval}");
    println!(
        "criterion 7 PASS: init main loss {init_main:.4} (~ln 2), total loss {init:.4} -> {final_loss:.4}, mIoU train {miou_train:.3} / held-out {miou_eval:.3}"
    );
}

#[test]
fn criterion_08_decoder_configuration_fidelity() {
    let enc = PGTConfig::variant(Variant::S);
    let base = FPTConfig::new(60);
    assert_eq!(base.embed_dim, 512);
    assert_eq!(base.depths, [1, 1, 1]);
    assert_eq!(base.sr_ratios, [2, 2, 2]);
    assert_eq!(base.fusion, FusionMode::Sum);
    let d = base.embed_dim as u64;

    let base_params = count_params(&enc, Some(&base)).unwrap().params_total();

    // Concat fusion adds exactly the 4D -> D projection.
    let mut concat = base.clone();
    concat.fusion = FusionMode::Concat;
    let concat_params = count_params(&enc, Some(&concat)).unwrap().params_total();
    assert_eq!(concat_params - base_params, 4 * d * d + d);

    // Depth <1-2-1> adds one stride-16 block to each branch that passes
    // stride 16 (stages 3 and 4).
    let mut deeper = base.clone();
    deeper.depths = [1, 2, 1];
    let deeper_params = count_params(&enc, Some(&deeper)).unwrap().params_total();
    let block = {
        // One decoder block at ratio 2: norms, attention, reduction, MLP.
        let lin = |i: u64, o: u64| i * o + o;
        2 * d + 4 * lin(d, d) + 2 * d + lin(4 * d, d) + 2 * d + lin(d, 4 * d) + lin(4 * d, d)
    };
    assert_eq!(deeper_params - base_params, 2 * block);

    // The same deltas hold on instantiated micro models.
    let micro_enc = ModelConfig::micro(3).encoder;
    let micro_base = FPTConfig {
        embed_dim: 16,
        depths: [1, 1, 1],
        sr_ratios: [2, 2, 2],
        fusion: FusionMode::Sum,
        num_classes: 3,
    };
    let tally = |dec: &FPTConfig| -> u64 {
        FtnModel::<f32>::new(
            &ModelConfig {
                encoder: micro_enc.clone(),
                decoder: dec.clone(),
            },
            1,
        )
        .unwrap()
        .param_count()
    };
    let analytic = |dec: &FPTConfig| -> u64 {
        let r = count_params(&micro_enc, Some(dec)).unwrap();
        r.params_total() + r.train_only_params()
    };
    let mut micro_concat = micro_base.clone();
    micro_concat.fusion = FusionMode::Concat;
    let mut micro_deeper = micro_base.clone();
    micro_deeper.depths = [1, 2, 1];
    for variant in [&micro_base, &micro_concat, &micro_deeper] {
        assert_eq!(tally(variant), analytic(variant));
    }
    assert_eq!(
        tally(&micro_concat) - tally(&micro_base),
        analytic(&micro_concat) - analytic(&micro_base)
    );
    println!(
        "criterion 8 PASS: default decoder is <1-1-1>/512/<2-2-2>/sum; concat delta {} and depth<1-2-1> delta {} params, analytic == instantiated",
        concat_params - base_params,
        deeper_params - base_params
    );
}

#[test]
fn criterion_09_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    for seed in 0..10u64 {
        let model: FtnModel<f32> = FtnModel::new(&ModelConfig::micro(2), seed).unwrap();
        let img = {
            let data: Vec<f32> = (0..32 * 32 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
            Tensor::from_vec(data, &[1, 32, 32, 3]).unwrap()
        };
        let before = model.forward(&mut Tape::inference(), &img, None).unwrap();
        let path = dir.path().join(format!("model_{seed}.ftnc"));
        ftn::checkpoint::save(&model, &path).unwrap();
        let loaded = ftn::checkpoint::load(&path).unwrap();
        let after = loaded.forward(&mut Tape::inference(), &img, None).unwrap();
        assert_eq!(before.logits.shape(), after.logits.shape());
        for (a, b) in before.logits.data().iter().zip(after.logits.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "seed {seed}");
        }
    }
    println!("criterion 9 PASS: save -> load -> forward bit-identical on 10 random micro models");
}

#[test]
fn criterion_10_grouped_attention_cost_law() {
    // Stage-1 geometry at 224x224: a 56x56 token map.
    let (side, c) = (56usize, 32usize);
    let tokens = side * side;
    let measure = |groups: usize| -> u64 {
        let mut init = ftn::nn::Init::new(10);
        let spec = AttentionSpec::new(1, c, groups, true).unwrap();
        let layer: GroupAttention<f32> = GroupAttention::new(&mut init, spec);
        let x = Tensor::full(&[1, side, side, c], 0.1);
        let mut tape = Tape::inference();
        layer.forward(&mut tape, &x).unwrap();
        tape.macs_for(SCORES_LABEL) + tape.macs_for(APPLY_LABEL)
    };
    let global = measure(1);
    assert_eq!(global, attention_score_macs(tokens, c, 1));
    for groups in [4u64, 16, 64] {
        let grouped = measure(groups as usize);
        assert_eq!(
            global,
            grouped * groups,
            "measured attention MACs not exactly 1/{groups} of global"
        );
        assert_eq!(grouped, attention_score_macs(tokens, c, groups as usize));
    }
    // The global route is plain multi-head attention; its measured cost
    // matches the same analytic law (sanity for the instrumentation).
    let mut init = ftn::nn::Init::new(11);
    let mha: MultiHeadAttention<f32> = MultiHeadAttention::new(&mut init, 1, c, true);
    let x = Tensor::full(&[1, tokens, c], 0.1);
    let mut tape = Tape::inference();
    mha.forward(&mut tape, &x).unwrap();
    assert_eq!(
        tape.macs_for(SCORES_LABEL) + tape.macs_for(APPLY_LABEL),
        attention_score_macs(tokens, c, 1)
    );
    println!(
        "criterion 10 PASS: measured attention MACs scale exactly as 1/G (global {global}, G=64 ratio exactly 64)"
    );
}
