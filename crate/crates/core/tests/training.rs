use adcless::checkpoint::Checkpoint;
use adcless::crossbar::{AdcModel, Mapping};
use adcless::dataset::{generate, GenConfig, Sample, Splits};
use adcless::netspec::NetworkSpec;
use adcless::train::metrics::cross_entropy;
use adcless::train::model::{Exec, ExecPlan, Net, Params, RunOpts};
use adcless::train::pipeline::*;
use adcless::train::Stage;
use adcless::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TINY: &str = r#"
name = "tiny"
input = [2, 8, 8]
classes = 4
time_steps = 6

[[layer]]
kind = "conv"
out = 4
bits = 8
periphery = "hp"

[[layer]]
kind = "lif"

[[layer]]
kind = "sew"
bits = 4
periphery = "adcless"

[[layer]]
kind = "maxpool"

[[layer]]
kind = "linear"
out = 4
bits = 8
periphery = "hp"
"#;

const TOY: &str = r#"
name = "toy"
input = [2, 5, 5]
classes = 3
time_steps = 4
reset = "hard"

[[layer]]
kind = "conv"
out = 3
bits = 8
periphery = "hp"

[[layer]]
kind = "lif"
v_th = 0.6
leak = 0.8

[[layer]]
kind = "linear"
out = 3
bits = 8
periphery = "hp"
"#;

fn net(src: &str) -> Net {
    Net::new(NetworkSpec::from_toml(src).unwrap()).unwrap()
}

fn data(n: usize) -> Splits {
    generate(&GenConfig { samples: n, time_steps: 6, height: 8, width: 8, speed: [1.0, 1.5], bar_width: [1.5, 2.5], ..GenConfig::default() }).unwrap()
}

fn cfg(stage: Stage) -> TrainConfig {
    TrainConfig { epochs: 2, batch_size: 8, lr: 0.05, ..TrainConfig::new(stage) }
}

#[test]
fn zero_weights_give_uniform_loss() {
    let n = net(TINY);
    let p = n.zero_params();
    let d = data(40);
    let batch: Vec<&Sample> = (0..4).map(|c| d.train.samples.iter().find(|s| s.label == c).unwrap()).collect();
    for plan in [ExecPlan::for_stage(&n, Stage::Fp, 32, Mapping::SplitColumns, None), ExecPlan::for_stage(&n, Stage::Qat, 32, Mapping::SplitColumns, None)] {
        let prep = n.prepare(&p, &plan).unwrap();
        let mean: f64 = batch.iter().map(|s| cross_entropy(&n.run(&p, &prep, s, RunOpts::default()).unwrap().logits, s.label as usize).0).sum::<f64>() / 4.0;
        assert!((mean - 4f64.ln()).abs() < 1e-12, "{mean}");
    }
}

#[test]
fn single_sample_overfits() {
    let n = net(TINY);
    let d = data(40);
    let mut p = n.init_params(1, 1.0);
    let c = TrainConfig { lr: 0.05, ..cfg(Stage::Fp) };
    let losses = fit_batch(&n, &mut p, &c, &d.train.samples[..1], 200).unwrap();
    let end = fit_batch(&n, &mut p, &TrainConfig { lr: 0.0, ..c }, &d.train.samples[..1], 1).unwrap()[0];
    assert!(end < 0.05, "loss after 200 steps {end} (start {})", losses[0]);
}

fn smooth_loss(n: &Net, p: &Params, plan: &ExecPlan, s: &[Sample], alpha: f64) -> f64 {
    let prep = n.prepare(p, plan).unwrap();
    s.iter()
        .map(|s| cross_entropy(&n.run(p, &prep, s, RunOpts { smooth: Some(alpha), dropout_seed: None }).unwrap().logits, s.label as usize).0)
        .sum()
}

#[test]
fn gradient_matches_finite_differences_on_smoothed_network() {
    let n = net(TOY);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let samples: Vec<Sample> = (0..3)
        .map(|i| Sample { label: i as u16, spikes: (0..4 * 2 * 25).map(|_| (rng.gen::<f64>() < 0.3) as u8).collect() })
        .collect();
    let p = n.init_params(4, 1.5);
    let plan = ExecPlan::for_stage(&n, Stage::Fp, 32, Mapping::SplitColumns, None);
    let alpha = n.spec.alpha;
    let prep = n.prepare(&p, &plan).unwrap();
    let mut g = p.zeros_like();
    for s in &samples {
        let pass = n.run(&p, &prep, s, RunOpts { smooth: Some(alpha), dropout_seed: None }).unwrap();
        let (_, dl) = cross_entropy(&pass.logits, s.label as usize);
        n.backward(&pass, &prep, &dl, &mut g).unwrap();
    }
    let analytic = g.flat();
    let total = analytic.len();
    let mut coords: Vec<usize> = (0..total).collect();
    for i in (1..total).rev() {
        coords.swap(i, rng.gen_range(0..=i));
    }
    coords.truncate(100);
    assert_eq!(coords.len(), 100);
    let h = 1e-5;
    for &i in &coords {
        let mut a = p.clone();
        let mut b = p.clone();
        *a.flat_mut()[i] += h;
        *b.flat_mut()[i] -= h;
        let num = (smooth_loss(&n, &a, &plan, &samples, alpha) - smooth_loss(&n, &b, &plan, &samples, alpha)) / (2.0 * h);
        let an = analytic[i];
        let err = (num - an).abs() / num.abs().max(an.abs()).max(1e-6);
        assert!(err < 1e-4, "coordinate {i}: analytic {an} numeric {num}");
    }
}

#[test]
fn unit_scale_quantized_forward_equals_full_precision() {
    // integer weights whose largest magnitude equals the level count give S = 1
    let n = net(TOY);
    let mut p = n.init_params(2, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for x in &mut p.xbars {
        x.w.iter_mut().for_each(|v| *v = rng.gen_range(-20..=20) as f64);
        x.w[0] = 127.0;
    }
    p.lifs[0].v_th = 45.0;
    p.lifs[0].leak = 1.0;
    let s = Sample { label: 0, spikes: (0..200).map(|_| rng.gen_range(0..2)).collect() };
    let run = |stage| {
        let plan = ExecPlan::for_stage(&n, stage, 32, Mapping::SplitColumns, None);
        let prep = n.prepare(&p, &plan).unwrap();
        assert!(stage == Stage::Fp || prep.iter().all(|q| q.scale == 1.0));
        n.run(&p, &prep, &s, RunOpts::default()).unwrap().logits
    };
    assert_eq!(run(Stage::Fp), run(Stage::Qat));
}

fn trained_fp(n: &Net, d: &Splits) -> Params {
    let c = cfg(Stage::Fp);
    let init = initial_params(n, &c, None).unwrap();
    train_stage(n, init, &c, &d.train.samples, &[], |_| {}).unwrap().params
}

#[test]
fn quantized_loss_after_init_is_close_to_full_precision() {
    let n = net(TINY);
    let d = data(200);
    let p = trained_fp(&n, &d);
    let batch = &d.val.samples;
    let fp = evaluate(&n, &p, &cfg(Stage::Fp).plan(&n), batch).unwrap();
    let q = evaluate(&n, &p, &cfg(Stage::Qat).plan(&n), batch).unwrap();
    assert!((q.loss - fp.loss).abs() <= 0.2 * fp.loss, "fp {} qat {}", fp.loss, q.loss);
    // one quantization step per element at QAT step 0
    let prep = n.prepare(&p, &cfg(Stage::Qat).plan(&n)).unwrap();
    for (x, q) in p.xbars.iter().zip(&prep) {
        for (w, &v) in x.w.iter().zip(&q.wq) {
            assert!((w - v as f64 * q.scale).abs() <= q.scale * 0.5 + 1e-12);
        }
    }
}

#[test]
fn ideal_readout_step_equals_quantization_aware_step() {
    let n = net(TINY);
    let d = data(60);
    let p0 = trained_fp(&n, &d);
    let batch = &d.train.samples[..8];
    let mut a = p0.clone();
    let mut b = p0.clone();
    let qa = fit_batch(&n, &mut a, &cfg(Stage::Qat), batch, 2).unwrap();
    let ideal = TrainConfig { adc: Some(AdcModel::Ideal), ..cfg(Stage::Adcless) };
    assert!(ideal.plan(&n).layers.iter().all(|e| *e == Exec::Sliced(AdcModel::Ideal)));
    let qb = fit_batch(&n, &mut b, &ideal, batch, 2).unwrap();
    assert_eq!(qa, qb);
    assert_eq!(a, b);
}

#[test]
fn sense_amplifier_partial_sums_are_ternary() {
    let n = net(TINY);
    let d = data(40);
    let p = trained_fp(&n, &d);
    for mapping in [Mapping::SharedColumn, Mapping::SplitColumns] {
        let plan = ExecPlan::for_stage(&n, Stage::Adcless, 32, mapping, Some(AdcModel::OneBitSa));
        let e = evaluate(&n, &p, &plan, &d.train.samples).unwrap();
        let (lo, hi) = e.activity.ps_range.unwrap();
        assert!(lo >= -1 && hi <= 1, "{lo}..{hi}");
        if mapping == Mapping::SplitColumns {
            assert!(lo >= 0);
        }
    }
}

#[test]
fn adcless_fine_tuning_reduces_batch_loss() {
    let n = net(TINY);
    let d = data(60);
    let p0 = trained_fp(&n, &d);
    let mut p = p0.clone();
    fit_batch(&n, &mut p, &cfg(Stage::Qat), &d.train.samples[..16], 5).unwrap();
    let c = TrainConfig { lr: 0.02, ..cfg(Stage::Adcless) };
    let losses = fit_batch(&n, &mut p, &c, &d.train.samples[..16], 50).unwrap();
    assert!(losses[49] < losses[0], "{} -> {}", losses[0], losses[49]);
    let ck = Checkpoint::new(Stage::Adcless, &n, p, 32, Mapping::SplitColumns).unwrap();
    assert!(ck.neurons.iter().all(|r| r.leak_shift <= 2 && r.v_th_int >= 1));
}

#[test]
fn stages_must_chain() {
    let n = net(TINY);
    let d = data(40);
    assert!(matches!(initial_params(&n, &cfg(Stage::Qat), None), Err(Error::Validation(_))));
    assert!(matches!(initial_params(&n, &cfg(Stage::Adcless), None), Err(Error::Validation(_))));
    let fp = run_stage(&n, &TrainConfig { epochs: 1, ..cfg(Stage::Fp) }, None, &d.train.samples, &[], &d.test.samples, |_| {}).unwrap();
    assert!(initial_params(&n, &cfg(Stage::Adcless), Some(&fp.checkpoint)).is_err());
    assert_eq!(initial_params(&n, &cfg(Stage::Qat), Some(&fp.checkpoint)).unwrap(), fp.checkpoint.params);
}

#[test]
fn pipeline_reports_three_stages_deterministically() {
    let n = net(TINY);
    let d = data(60);
    let cfgs: Vec<TrainConfig> = Stage::ALL.iter().map(|&s| TrainConfig { epochs: 1, ..cfg(s) }).collect();
    let go = || run_pipeline(&n, &cfgs, &d.train.samples, &d.val.samples, &d.test.samples, |_, _| {}).unwrap();
    let a = go();
    let b = go();
    assert_eq!(a.len(), 3);
    let stages: Vec<Stage> = a.iter().map(|r| r.report.stage).collect();
    assert_eq!(stages, Stage::ALL);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.checkpoint.to_bytes(), y.checkpoint.to_bytes());
        assert_eq!(x.epochs, y.epochs);
        assert_eq!(x.report, y.report);
    }
    let mut csv = Vec::new();
    write_epochs(&mut csv, &a[0].epochs).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 2);
    assert!(run_pipeline(&n, &cfgs[1..], &d.train.samples, &d.val.samples, &d.test.samples, |_, _| {}).is_err());
}

#[test]
fn surrogate_width_does_not_change_inference() {
    let d = data(40);
    let a = net(TINY);
    let mut spec = a.spec.clone();
    spec.alpha = 0.5;
    spec.ps_alpha = 123.0;
    let b = Net::new(spec).unwrap();
    let p = a.init_params(5, 1.0);
    for stage in Stage::ALL {
        let plan = ExecPlan::for_stage(&a, stage, 32, Mapping::SplitColumns, None);
        let x = evaluate(&a, &p, &plan, &d.test.samples).unwrap();
        let y = evaluate(&b, &p, &plan, &d.test.samples).unwrap();
        assert_eq!(x.logits, y.logits);
    }
}

#[test]
fn config_parses_and_rejects_unknown_keys() {
    let c = TrainConfig::from_toml("stage = \"adcless\"\nepochs = 3\nadc = \"ideal\"\nxbar = 64").unwrap();
    assert_eq!(c.stage, Stage::Adcless);
    assert_eq!(c.adc, Some(AdcModel::Ideal));
    assert_eq!(c.xbar, Some(64));
    assert!(TrainConfig::from_toml("stage = \"qat\"\nbogus = 1").is_err());
    assert!(TrainConfig::from_toml("stage = \"qat\"\nbatch_size = 0").is_err());
}
