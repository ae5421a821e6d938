//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! `ACCEPTANCE_CRITERIA=1,2,6` restricts the run to the listed criteria.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use myoseg::io::{write_volume, Header};
use myoseg::loss::{pixel_loss, pixel_loss_grad, LossConfig};
use myoseg::mesh::extract_surface;
use myoseg::metrics::{dice_2d, dice_3d, slicewise_dice_profile};
use myoseg::networks::{
    encode_checkpoint, forward_inference, init_parameters, save_checkpoint, Architecture,
    ModelParameters, NetworkKind, LOOKAHEAD,
};
use myoseg::phantom::{generate_phantom, PhantomSpec};
use myoseg::pipeline::{
    preprocess, preprocess_pair, segment_volume, select_init_slice, PropagationConfig,
    SlicePredictor, Window, WindowPredictor,
};
use myoseg::tensor::{conv2d, Tensor};
use myoseg::training::{
    init_samples, prop_samples, train_init, train_prop, AugmentConfig, InitSample, LossRecord,
    TrainConfig,
};
use myoseg::volume::{BinaryMask, Volume};

const BIN: &str = env!("CARGO_BIN_EXE_myoseg");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn mins(d: Duration) -> String {
    format!("{:.1} min", d.as_secs_f64() / 60.0)
}

// Criterion 1.

fn gradient_suite() -> Outcome {
    let started = Instant::now();
    let mut failures = Vec::new();
    for seed in 0..5 {
        let out = Command::new(BIN)
            .args(["gradcheck", "--seed", &seed.to_string()])
            .output()
            .expect("run gradcheck");
        if !out.status.success() {
            failures.push(format!(
                "seed {seed}: {}",
                String::from_utf8_lossy(&out.stderr).trim()
            ));
        }
    }
    let elapsed = started.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(60);
    outcome(
        pass,
        format!(
            "seeds 0-4, {:.1} s, failures: {failures:?}",
            elapsed.as_secs_f64()
        ),
    )
}

// Criterion 2.

fn loss_oracle() -> Outcome {
    let cfg = LossConfig::new(0.999, 0.0005, 0.02).expect("valid loss config");
    let cases = [
        (1.0, 1.0, 0.0),
        (0.5, 1.0, std::f64::consts::LN_2),
        (1.0, 0.0, 7.600902),
    ];
    let mut worst: f64 = 0.0;
    for (p, g, expected) in cases {
        worst = worst.max((pixel_loss(p, g, &cfg).unwrap() - expected).abs());
    }
    let silent = pixel_loss(0.01, 0.0, &cfg).unwrap() == 0.0
        && pixel_loss_grad(0.01, 0.0, &cfg).unwrap() == 0.0;
    outcome(
        worst <= 1e-6 && silent,
        format!("max deviation {worst:.2e}, g=0 p=0.01 silent: {silent}"),
    )
}

// Criterion 3.

fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (oc, _, kh, kw) = w.dims4().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; n * oc * oh * ow];
    for ni in 0..n {
        for o in 0..oc {
            for yo in 0..oh {
                for xo in 0..ow {
                    let mut acc = b[o];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let yi = (yo * stride + ky) as isize - pad as isize;
                                let xi = (xo * stride + kx) as isize - pad as isize;
                                if yi < 0 || xi < 0 || yi >= h as isize || xi >= wd as isize {
                                    continue;
                                }
                                let (yi, xi) = (yi as usize, xi as usize);
                                acc += xd[((ni * c + ci) * h + yi) * wd + xi]
                                    * wdat[((o * c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((ni * oc + o) * oh + yo) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, oc, oh, ow], out).unwrap()
}

fn conv_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut instances = 0;
    while instances < 100 {
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=4);
        let h = rng.random_range(1..=16);
        let w = rng.random_range(1..=16);
        let oc = rng.random_range(1..=4);
        let kh = rng.random_range(1..=5usize);
        let kw = rng.random_range(1..=5usize);
        let stride = rng.random_range(1..=3);
        let pad = rng.random_range(0..=2);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            continue;
        }
        let x = Tensor::from_fn(&[n, c, h, w], |_| rng.random_range(-1.0..1.0)).unwrap();
        let k = Tensor::from_fn(&[oc, c, kh, kw], |_| rng.random_range(-1.0..1.0)).unwrap();
        let b: Vec<f64> = (0..oc).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = conv2d(&x, &k, Some(&b), stride, pad).unwrap();
        let expected = naive_conv(&x, &k, &b, stride, pad);
        assert_eq!(got.shape(), expected.shape());
        for (a, e) in got.data().iter().zip(expected.data()) {
            worst = worst.max((a - e).abs());
        }
        instances += 1;
    }
    let elapsed = started.elapsed();
    outcome(
        worst <= 1e-10 && elapsed < Duration::from_secs(30),
        format!(
            "100 instances, max |diff| {worst:.2e}, {:.2} s",
            elapsed.as_secs_f64()
        ),
    )
}

// Criterion 4.

struct OverfitRun {
    first: f64,
    last: f64,
    dice: f64,
    checkpoint: Vec<u8>,
    prediction: Vec<u8>,
    elapsed: Duration,
}

fn overfit_run() -> OverfitRun {
    let started = Instant::now();
    let (volume, gt) = generate_phantom(&PhantomSpec::default()).unwrap();
    let (volume, gt) = preprocess_pair(&volume, &gt).unwrap();
    let z = select_init_slice(&volume);
    let sample = InitSample::from_volume(&volume, &gt, z).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-4,
        batch_size: 1,
        iterations: 2000,
        seed: 0,
        augmentation: AugmentConfig::disabled(),
        log_every: 1,
        ..TrainConfig::for_kind(NetworkKind::Init)
    };
    let out = train_init(
        std::slice::from_ref(&sample),
        &Architecture::default(),
        &cfg,
        &mut (),
    )
    .unwrap();
    let x = Tensor::new(vec![1, 1, 128, 128], sample.image.clone()).unwrap();
    let pred = forward_inference(&out.params, &x).unwrap();
    let prediction: Vec<u8> = pred
        .last()
        .unwrap()
        .data()
        .iter()
        .map(|&p| u8::from(p >= 0.5))
        .collect();
    let truth: Vec<u8> = sample.mask.iter().map(|&m| m as u8).collect();
    OverfitRun {
        first: out.log[0].total,
        last: out.log.last().unwrap().total,
        dice: dice_2d(&prediction, &truth).unwrap(),
        checkpoint: encode_checkpoint(&out.params),
        prediction,
        elapsed: started.elapsed(),
    }
}

fn overfit(run: &OverfitRun) -> Outcome {
    let ratio = run.last / run.first;
    outcome(
        ratio <= 0.01 && run.dice >= 0.95 && run.elapsed < Duration::from_secs(15 * 60),
        format!(
            "loss {:.3} -> {:.3} (ratio {ratio:.2e}), 2D Dice {:.4}, {}",
            run.first,
            run.last,
            run.dice,
            mins(run.elapsed)
        ),
    )
}

// Criterion 5.

const TRAIN_SEEDS: [u64; 8] = [1, 2, 3, 4, 5, 6, 7, 8];
const HELD_OUT_SEEDS: [u64; 2] = [101, 102];

struct HeldOut {
    seed: u64,
    dice: f64,
    smoothness: f64,
    apex: f64,
    mask: BinaryMask,
}

struct DeskRun {
    init: ModelParameters<f32>,
    prop: ModelParameters<f32>,
    held_out: Vec<HeldOut>,
    elapsed: Duration,
}

fn phantom_pair(seed: u64) -> (Volume, BinaryMask) {
    let spec = PhantomSpec {
        seed,
        ..PhantomSpec::default()
    };
    let (v, gt) = generate_phantom(&spec).unwrap();
    preprocess_pair(&v, &gt).unwrap()
}

fn progress(label: &'static str) -> impl FnMut(&LossRecord) {
    let started = Instant::now();
    move |r: &LossRecord| {
        if r.iteration % 5000 == 1 {
            eprintln!(
                "  [{label}] iteration {:>6} loss {:>10.3} ({})",
                r.iteration,
                r.total,
                mins(started.elapsed())
            );
        }
    }
}

fn desk_scale_run() -> DeskRun {
    let started = Instant::now();
    let train: Vec<_> = TRAIN_SEEDS.iter().map(|&s| phantom_pair(s)).collect();
    let mut init_set = Vec::new();
    let mut prop_set = Vec::new();
    for (v, gt) in &train {
        init_set.extend(init_samples(v, gt).unwrap());
        prop_set.extend(prop_samples(v, gt).unwrap());
    }
    let arch = Architecture::default();
    let init_cfg = TrainConfig {
        iterations: 20_000,
        log_every: 100,
        ..TrainConfig::for_kind(NetworkKind::Init)
    };
    let prop_cfg = TrainConfig {
        iterations: 40_000,
        log_every: 100,
        ..TrainConfig::for_kind(NetworkKind::Propagation)
    };
    let mut init = train_init(&init_set, &arch, &init_cfg, &mut progress("init"))
        .unwrap()
        .params;
    let mut prop = train_prop(&prop_set, &arch, &prop_cfg, &mut progress("prop"))
        .unwrap()
        .params;

    let held_out = HELD_OUT_SEEDS
        .iter()
        .map(|&seed| {
            let (v, gt) = phantom_pair(seed);
            let r =
                segment_volume(&v, &mut init, &mut prop, &PropagationConfig::default()).unwrap();
            let profile = slicewise_dice_profile(&r.binary, &gt).unwrap();
            let n = v.base_index + 1;
            let apex_slices = ((n as f64) * 0.2).round() as usize;
            HeldOut {
                seed,
                dice: dice_3d(&r.binary, &gt).unwrap(),
                smoothness: profile.smoothness,
                apex: profile.mean_over(0..apex_slices),
                mask: r.binary,
            }
        })
        .collect();
    DeskRun {
        init,
        prop,
        held_out,
        elapsed: started.elapsed(),
    }
}

fn desk_scale(run: &DeskRun) -> Outcome {
    let mut pass = run.elapsed <= Duration::from_secs(4 * 3600);
    let mut parts = Vec::new();
    for h in &run.held_out {
        pass &= h.dice >= 0.80 && h.smoothness <= 0.25 && h.apex >= 0.70;
        parts.push(format!(
            "seed {}: Dice {:.4}, max jump {:.4}, apex mean {:.4}",
            h.seed, h.dice, h.smoothness, h.apex
        ));
    }
    parts.push(mins(run.elapsed));
    outcome(pass, parts.join("; "))
}

// Criterion 6.

struct GroundTruthStub<'a> {
    volume: &'a Volume,
    gt: &'a BinaryMask,
    anchors_consistent: bool,
}

impl GroundTruthStub<'_> {
    fn plane(&self, z: usize) -> Vec<f32> {
        self.gt.slice(z).iter().map(|&v| f32::from(v)).collect()
    }
}

impl SlicePredictor for GroundTruthStub<'_> {
    fn predict_slice(&mut self, z: usize, slice: &[f32], _: usize) -> myoseg::Result<Vec<f32>> {
        assert_eq!(slice, self.volume.grid.slice(z));
        Ok(self.plane(z))
    }
}

impl WindowPredictor for GroundTruthStub<'_> {
    fn predict_window(&mut self, w: &Window<'_>) -> myoseg::Result<Vec<Vec<f32>>> {
        let t = w.input.to_tensor();
        self.anchors_consistent &= t.plane(0, 0) == self.volume.grid.slice(w.anchor)
            && t.plane(0, 1) == self.plane(w.anchor).as_slice();
        Ok(w.lookahead.iter().map(|&z| self.plane(z)).collect())
    }
}

fn controller_oracle() -> Outcome {
    let started = Instant::now();
    let (v, gt) = phantom_pair(0);
    let mut init = GroundTruthStub {
        volume: &v,
        gt: &gt,
        anchors_consistent: true,
    };
    let mut prop = GroundTruthStub {
        volume: &v,
        gt: &gt,
        anchors_consistent: true,
    };
    let r = segment_volume(&v, &mut init, &mut prop, &PropagationConfig::default()).unwrap();
    let plane = gt.slice_len();
    let mismatched: Vec<usize> = (0..=v.base_index)
        .filter(|&z| z != r.init_index)
        .filter(|&z| r.binary.data()[z * plane..(z + 1) * plane] != *gt.slice(z))
        .collect();
    let (n_up, n_down) = (v.base_index - r.init_index, r.init_index);
    let expected = n_up.div_ceil(LOOKAHEAD) + n_down.div_ceil(LOOKAHEAD);
    let count = r.invocations.0 + r.invocations.1;
    let elapsed = started.elapsed();
    outcome(
        mismatched.is_empty()
            && count == expected
            && prop.anchors_consistent
            && elapsed < Duration::from_secs(5),
        format!(
            "mismatched slices {mismatched:?}, invocations {count} (expected {expected}), {:.2} s",
            elapsed.as_secs_f64()
        ),
    )
}

// Criterion 7.

fn determinism(a: &OverfitRun, b: &OverfitRun, c: &DeskRun, d: &DeskRun) -> Outcome {
    let overfit_same = a.checkpoint == b.checkpoint && a.prediction == b.prediction;
    let desk_ckpt_same = encode_checkpoint(&c.init) == encode_checkpoint(&d.init)
        && encode_checkpoint(&c.prop) == encode_checkpoint(&d.prop);
    let desk_masks_same = c
        .held_out
        .iter()
        .zip(&d.held_out)
        .all(|(x, y)| x.mask == y.mask);
    outcome(
        overfit_same && desk_ckpt_same && desk_masks_same,
        format!(
            "overfit checkpoint+mask identical: {overfit_same}; desk-scale checkpoints identical: {desk_ckpt_same}; masks identical: {desk_masks_same}"
        ),
    )
}

// Criterion 8.

fn mask_from(dims: [usize; 3], f: impl Fn(f64, f64, f64) -> bool) -> BinaryMask {
    let mut data = Vec::new();
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                data.push(u8::from(f(x as f64, y as f64, z as f64)));
            }
        }
    }
    BinaryMask::new(dims, data).unwrap()
}

fn mesh_topology() -> Outcome {
    let started = Instant::now();
    let ball = mask_from([24, 24, 24], |x, y, z| {
        (x - 11.5).powi(2) + (y - 11.5).powi(2) + (z - 11.5).powi(2) <= 8.0f64.powi(2)
    });
    let torus = mask_from([40, 40, 16], |x, y, z| {
        let r = ((x - 19.5).powi(2) + (y - 19.5).powi(2)).sqrt();
        (r - 12.0).powi(2) + (z - 7.5).powi(2) <= 4.5f64.powi(2)
    });
    let b = extract_surface(&ball, 1.25).unwrap();
    let t = extract_surface(&torus, 1.25).unwrap();
    let elapsed = started.elapsed();
    let (eb, et) = (b.euler_characteristic(), t.euler_characteristic());
    let tight = b.is_watertight() && t.is_watertight();
    outcome(
        eb == 2 && et == 0 && tight && elapsed < Duration::from_secs(10),
        format!(
            "ball chi {eb}, torus chi {et}, watertight {tight}, {:.2} s",
            elapsed.as_secs_f64()
        ),
    )
}

// Criterion 9.

fn inference_speed(dir: &Path, trained: Option<&DeskRun>) -> Outcome {
    let (volume, _) = generate_phantom(&PhantomSpec {
        seed: 55,
        ..PhantomSpec::default()
    })
    .unwrap();
    let vol_path = dir.join("speed.cvol");
    write_volume(&volume, &vol_path).unwrap();
    let (init_path, prop_path) = (dir.join("init.cseg"), dir.join("prop.cseg"));
    let arch = Architecture::default();
    match trained {
        Some(run) => {
            save_checkpoint(&run.init, &init_path).unwrap();
            save_checkpoint(&run.prop, &prop_path).unwrap();
        }
        None => {
            let init = init_parameters::<f32>(NetworkKind::Init, &arch, 0).unwrap();
            let prop = init_parameters::<f32>(NetworkKind::Propagation, &arch, 0).unwrap();
            save_checkpoint(&init, &init_path).unwrap();
            save_checkpoint(&prop, &prop_path).unwrap();
        }
    }
    let started = Instant::now();
    let out = Command::new(BIN)
        .arg("segment")
        .arg("--volume")
        .arg(&vol_path)
        .arg("--init-ckpt")
        .arg(&init_path)
        .arg("--prop-ckpt")
        .arg(&prop_path)
        .arg("--out-mask")
        .arg(dir.join("speed.cmsk"))
        .output()
        .expect("run segment");
    let elapsed = started.elapsed();
    let dims = Header::of(&preprocess(&volume).unwrap()).dims;
    outcome(
        out.status.success() && elapsed < Duration::from_secs(10),
        format!(
            "{}x{}x{} volume, {:.2} s wall, exit {:?}",
            dims[0],
            dims[1],
            dims[2],
            elapsed.as_secs_f64(),
            out.status.code()
        ),
    )
}

fn main() {
    let selected: Vec<u32> = match std::env::var("ACCEPTANCE_CRITERIA") {
        Ok(list) => list
            .split(',')
            .filter_map(|s| s.trim().parse().ok())
            .collect(),
        Err(_) => (1..=9).collect(),
    };
    let wants = |c: u32| selected.contains(&c);
    let dir = tempfile::tempdir().unwrap();
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!(
            "criterion {n} {} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o));
    };

    if wants(1) {
        report(1, "gradient suite", gradient_suite());
    }
    if wants(2) {
        report(2, "loss oracle", loss_oracle());
    }
    if wants(3) {
        report(3, "convolution oracle", conv_oracle());
    }
    let overfit_a = (wants(4) || wants(7)).then(overfit_run);
    if let (true, Some(run)) = (wants(4), &overfit_a) {
        report(4, "overfit convergence", overfit(run));
    }
    let desk_a = (wants(5) || wants(7)).then(desk_scale_run);
    if let (true, Some(run)) = (wants(5), &desk_a) {
        report(5, "desk-scale end-to-end", desk_scale(run));
    }
    if wants(6) {
        report(6, "propagation controller oracle", controller_oracle());
    }
    if wants(7) {
        let overfit_b = overfit_run();
        let desk_b = desk_scale_run();
        report(
            7,
            "determinism",
            determinism(
                overfit_a.as_ref().unwrap(),
                &overfit_b,
                desk_a.as_ref().unwrap(),
                &desk_b,
            ),
        );
    }
    if wants(8) {
        report(8, "mesh topology", mesh_topology());
    }
    if wants(9) {
        report(
            9,
            "inference speed",
            inference_speed(dir.path(), desk_a.as_ref()),
        );
    }

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
