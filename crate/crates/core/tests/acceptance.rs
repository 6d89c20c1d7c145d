//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sed_core::audio::{
    annotations_to_roll_frames, build_manifest, frame_count, parse_annotations, AudioClip, EventRoll, FRAME_HOP_SECONDS,
};
use sed_core::dsp::{log_mel_energies, MelConfig};
use sed_core::experiment::{
    cmd_evaluate, cmd_extract, cmd_train, synthesize, ExperimentConfig, Layering, SynthSpec,
};
use sed_core::metrics::{compare_rolls, error_rate, evaluate_by_context, f_score, MetricReport, ScoredRecording};
use sed_core::neural::gradcheck::{numeric_gradient, randn, relative_error, FD_STEP};
use sed_core::neural::layers::{
    batchnorm_backward, batchnorm_train, conv2d_backward, conv2d_forward, maxpool_backward, maxpool_feature_axis,
};
use sed_core::neural::lstm::{bilstm_backward, bilstm_forward, BiLstmParams};
use sed_core::neural::model::{Architecture, BranchSpec, ConvLayerSpec, Mode, Model};
use sed_core::neural::output::{bce_backward, bce_loss, output_backward, output_forward, DenseParams};
use sed_core::neural::{ParamBlocks, TrainConfig};
use sed_core::spatial::{extract_acr, extract_dom_freq, extract_gcc_features, extract_tdoa, SpatialConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- metrics

const SEG_FRAMES: usize = 50;

fn class_names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("c{i}")).collect()
}

fn roll_from_segments(segments: &[BTreeSet<usize>], k: usize, rng: &mut ChaCha8Rng) -> EventRoll {
    let mut values = Array2::from_elem((segments.len() * SEG_FRAMES, k), false);
    for (i, active) in segments.iter().enumerate() {
        for &c in active {
            // A random non-empty run of frames inside the segment.
            let a = rng.random_range(0..SEG_FRAMES);
            let b = rng.random_range(a..SEG_FRAMES);
            for t in a..=b {
                values[[i * SEG_FRAMES + t, c]] = true;
            }
        }
    }
    EventRoll::new(values, FRAME_HOP_SECONDS, class_names(k)).unwrap()
}

/// Brute-force totals from per-segment class sets:
/// `(tp, fp, fn, s, d, i, n)`.
fn oracle_totals(reference: &[BTreeSet<usize>], system: &[BTreeSet<usize>]) -> [u64; 7] {
    let mut t = [0u64; 7];
    for (r, y) in reference.iter().zip(system) {
        let tp = r.intersection(y).count() as u64;
        let fp = y.difference(r).count() as u64;
        let fn_ = r.difference(y).count() as u64;
        t[0] += tp;
        t[1] += fp;
        t[2] += fn_;
        t[3] += fn_.min(fp);
        t[4] += fn_.saturating_sub(fp);
        t[5] += fp.saturating_sub(fn_);
        t[6] += r.len() as u64;
    }
    t
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut failures = Vec::new();
    for case in 0..100 {
        let k = rng.random_range(1..=4);
        let segs = rng.random_range(1..=5);
        let random_sets = |rng: &mut ChaCha8Rng| -> Vec<BTreeSet<usize>> {
            (0..segs).map(|_| (0..k).filter(|_| rng.random_bool(0.5)).collect()).collect()
        };
        let r_sets = random_sets(&mut rng);
        let s_sets = random_sets(&mut rng);
        let reference = roll_from_segments(&r_sets, k, &mut rng);
        let system = roll_from_segments(&s_sets, k, &mut rng);
        let counts = compare_rolls(&reference, &system, 1.0).unwrap();
        let got = counts.totals();
        let want = oracle_totals(&r_sets, &s_sets);
        let got_arr = [got.tp, got.fp, got.fn_, got.s, got.d, got.i, got.n];
        let f_den = 2 * want[0] + want[1] + want[2];
        let want_f = if f_den == 0 { 0.0 } else { (2 * want[0]) as f64 / f_den as f64 };
        let f_ok = f_score(&counts) == want_f;
        let er_ok = match error_rate(&counts) {
            Ok(er) => want[6] > 0 && er == (want[3] + want[4] + want[5]) as f64 / want[6] as f64,
            Err(_) => want[6] == 0,
        };
        if got_arr != want || !f_ok || !er_ok {
            failures.push(case);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures.is_empty() && secs < 1.0,
        format!("100 random cases, {} mismatches {:?}, {secs:.3} s (limit 1 s)", failures.len(), failures),
    )
}

fn criterion_2() -> Outcome {
    let classes: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
    let roll = |active: &[usize]| {
        let mut v = Array2::from_elem((SEG_FRAMES, 3), false);
        for &c in active {
            v.column_mut(c).fill(true);
        }
        EventRoll::new(v, FRAME_HOP_SECONDS, classes.clone()).unwrap()
    };
    let c1 = compare_rolls(&roll(&[0, 1]), &roll(&[0, 2]), 1.0).unwrap();
    let (f1, er1) = (f_score(&c1), error_rate(&c1).unwrap());
    let c2 = compare_rolls(&roll(&[0, 1]), &roll(&[]), 1.0).unwrap();
    let (f2, er2) = (f_score(&c2), error_rate(&c2).unwrap());
    outcome(
        f1 == 0.5 && er1 == 0.5 && f2 == 0.0 && er2 == 1.0,
        format!("{{A,B}} vs {{A,C}}: F={f1} ER={er1}; {{A,B}} vs {{}}: F={f2} ER={er2}"),
    )
}

// --------------------------------------------------------------- features

fn noise(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-0.5..0.5)).collect()
}

/// Channel 2 is channel 1 delayed by `delay` samples.
fn delayed_noise(rng: &mut ChaCha8Rng, len: usize, delay: isize) -> AudioClip {
    let pad = 32;
    let src = noise(rng, len + 2 * pad);
    let a = src[pad..pad + len].to_vec();
    let b = (0..len).map(|n| src[(n as isize + pad as isize - delay) as usize]).collect();
    AudioClip::new(vec![a, b], 44_100, format!("delay{delay}")).unwrap()
}

/// Frames whose longest (480 ms) analysis window lies inside the clip.
fn interior_frames(frames: usize) -> std::ops::Range<usize> {
    let half = (0.48 * 44_100.0 / 2.0 / 882.0_f64).ceil() as usize;
    half..frames - half
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let cfg = SpatialConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = (1.0f64, 0isize, 0usize, 0usize);
    let mut gcc_worst = (1.0f64, 0isize, 0usize);
    for d in -20isize..=20 {
        let clip = delayed_noise(&mut rng, 2 * 44_100, d);
        let tdoa = extract_tdoa(&clip, &cfg).unwrap();
        let gcc = extract_gcc_features(&clip, &cfg).unwrap();
        let frames = interior_frames(tdoa.frames());
        for r in 0..3 {
            for b in 0..5 {
                let hits = frames.clone().filter(|&t| tdoa.data()[[t, b, r]] == d as f64).count();
                let frac = hits as f64 / frames.len() as f64;
                if frac < worst.0 {
                    worst = (frac, d, b, r);
                }
            }
            // The GCC volume's per-frame maximum sits at lag d (lags -29..=30).
            let hits = frames
                .clone()
                .filter(|&t| {
                    let row = gcc.data().slice(s![t, .., r]);
                    let arg = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
                    arg as isize - 29 == d
                })
                .count();
            let frac = hits as f64 / frames.len() as f64;
            if frac < gcc_worst.0 {
                gcc_worst = (frac, d, r);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.0 >= 0.95 && gcc_worst.0 >= 0.95 && secs < 30.0,
        format!(
            "delays -20..=20: worst TDOA hit rate {:.3} (d={}, band {}, resolution {}), worst GCC peak rate {:.3} (d={}, resolution {}); {secs:.1} s (limit 30 s)",
            worst.0, worst.1, worst.2, worst.3, gcc_worst.0, gcc_worst.1, gcc_worst.2
        ),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let cfg = SpatialConfig::default();
    let mut worst_err = 0.0f64;
    let mut worst_tone = 0.0;
    for f in [250.0, 440.0, 1000.0, 3500.0] {
        let x: Vec<f64> = (0..44_100)
            .map(|n| 0.5 * (2.0 * std::f64::consts::PI * f * n as f64 / 44_100.0).sin())
            .collect();
        let clip = AudioClip::new(vec![x.clone(), x], 44_100, "tone").unwrap();
        let v = extract_dom_freq(&clip, &cfg).unwrap();
        // Interior frames: the 40 ms window lies inside the clip.
        for t in 1..v.frames() - 1 {
            for ch in 0..2 {
                let err = (v.data()[[t, 0, ch]] - f).abs();
                if err > worst_err {
                    worst_err = err;
                    worst_tone = f;
                }
            }
        }
    }
    let silence = AudioClip::new(vec![vec![0.0; 44_100]; 2], 44_100, "silence").unwrap();
    let silent_zero = extract_dom_freq(&silence, &cfg).unwrap().data().iter().all(|&v| v == 0.0);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_err <= 0.5 && silent_zero && secs < 10.0,
        format!(
            "tones 250/440/1000/3500 Hz: max error {worst_err:.4} Hz (at {worst_tone} Hz, limit 0.5); silence all zero: {silent_zero}; {secs:.2} s (limit 10 s)"
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let clip = delayed_noise(&mut rng, 44_100, 4);
    let cfg = SpatialConfig::default();
    let mel = log_mel_energies(&clip, &MelConfig::default()).unwrap();
    let tdoa = extract_tdoa(&clip, &cfg).unwrap();
    let gcc = extract_gcc_features(&clip, &cfg).unwrap();
    let dom = extract_dom_freq(&clip, &cfg).unwrap();
    let acr = extract_acr(&clip, &cfg).unwrap();
    let shapes = [mel.shape(), tdoa.shape(), gcc.shape(), dom.shape(), acr.shape()];
    let t = shapes[0].0;
    let want = [(t, 40, 2), (t, 5, 3), (t, 60, 3), (t, 3, 4), (t, 400, 2)];
    let shapes_ok = shapes == want && t == 50;

    let branches = vec![
        BranchSpec::standard("mel", 40, 2, 100),
        BranchSpec::standard("gcc", 60, 3, 100),
        BranchSpec::standard("acr", 400, 2, 100),
    ];
    let per_branch: Vec<(usize, usize)> = branches.iter().map(|b| (b.output_len(), b.output_maps())).collect();
    let arch = Architecture::new(branches, 4, class_names(2)).unwrap();
    let model = Model::init(arch, &mut rng).unwrap();
    let inputs: Vec<Array4<f64>> = [&mel, &gcc, &acr]
        .iter()
        .map(|v| v.data().clone().insert_axis(Axis(0)))
        .collect();
    let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
    let (probs, cache) = model.forward::<ChaCha8Rng>(&views, Mode::Infer, None).unwrap();
    let merged = cache.merged().dim();
    let branch_ok = per_branch.iter().all(|&p| p == (5, 100)) && merged == (1, t, 1500) && probs.dim() == (1, t, 2);
    outcome(
        shapes_ok && branch_ok,
        format!(
            "1 s clip shapes {shapes:?}; mel/gcc/acr branch outputs (len, maps) {per_branch:?}, merged {merged:?}"
        ),
    )
}

// -------------------------------------------------------------- gradients

/// `L = sum(r * y)` so that `dL/dy = r`.
fn dot<D: ndarray::Dimension>(r: &ndarray::Array<f64, D>, y: &ndarray::Array<f64, D>) -> f64 {
    (r * y).sum()
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut errors: Vec<(String, f64, f64)> = Vec::new();
    let mut record = |name: &str, a: &[f64], n: &[f64], tol: f64| errors.push((name.to_string(), relative_error(a, n), tol));

    // Convolution.
    let x = randn((2, 6, 4, 2), &mut rng);
    let w = randn((3, 3, 2, 3), &mut rng);
    let b = randn(3, &mut rng);
    let r = randn((2, 6, 4, 3), &mut rng);
    let (dx, dw, db) = conv2d_backward(x.view(), &w, r.view()).unwrap();
    let nx = numeric_gradient(&x, |x| dot(&r, &conv2d_forward(x.view(), &w, &b).unwrap()));
    let nw = numeric_gradient(&w, |w| dot(&r, &conv2d_forward(x.view(), w, &b).unwrap()));
    let nb = numeric_gradient(&b, |b| dot(&r, &conv2d_forward(x.view(), &w, b).unwrap()));
    record("conv dx", dx.as_slice().unwrap(), nx.as_slice().unwrap(), 1e-4);
    record("conv dw", dw.as_slice().unwrap(), nw.as_slice().unwrap(), 1e-4);
    record("conv db", db.as_slice().unwrap(), nb.as_slice().unwrap(), 1e-4);

    // Batch norm.
    let x = randn((2, 6, 4, 3), &mut rng);
    let gamma = randn(3, &mut rng) + 1.0;
    let beta = randn(3, &mut rng);
    let r = randn((2, 6, 4, 3), &mut rng);
    let bn = |x: &Array4<f64>, g: &Array1<f64>, be: &Array1<f64>| batchnorm_train(x.view(), g, be).unwrap().0;
    let (_, cache, _) = batchnorm_train(x.view(), &gamma, &beta).unwrap();
    let (dx, dg, dbe) = batchnorm_backward(r.view(), &gamma, &cache);
    let nx = numeric_gradient(&x, |x| dot(&r, &bn(x, &gamma, &beta)));
    let ng = numeric_gradient(&gamma, |g| dot(&r, &bn(&x, g, &beta)));
    let nbe = numeric_gradient(&beta, |be| dot(&r, &bn(&x, &gamma, be)));
    record("batchnorm dx", dx.as_slice().unwrap(), nx.as_slice().unwrap(), 1e-4);
    record("batchnorm dgamma", dg.as_slice().unwrap(), ng.as_slice().unwrap(), 1e-4);
    record("batchnorm dbeta", dbe.as_slice().unwrap(), nbe.as_slice().unwrap(), 1e-4);

    // Max pooling along the feature axis.
    let x = randn((2, 6, 4, 3), &mut rng);
    let r = randn((2, 6, 2, 3), &mut rng);
    let (_, arg) = maxpool_feature_axis(x.view(), 2).unwrap();
    let dx = maxpool_backward(&r, &arg, 4);
    let nx = numeric_gradient(&x, |x| dot(&r, &maxpool_feature_axis(x.view(), 2).unwrap().0));
    record("maxpool dx", dx.as_slice().unwrap(), nx.as_slice().unwrap(), 1e-4);

    // Bidirectional LSTM.
    let x = randn((2, 6, 3), &mut rng);
    let p = BiLstmParams::init(3, 4, &mut rng);
    let r = randn((2, 6, 8), &mut rng);
    let (_, cache) = bilstm_forward(x.view(), &p).unwrap();
    let (dx, g) = bilstm_backward(x.view(), &p, &cache, r.view());
    let loss = |x: &Array3<f64>, p: &BiLstmParams| dot(&r, &bilstm_forward(x.view(), p).unwrap().0);
    let nx = numeric_gradient(&x, |x| loss(x, &p));
    record("bilstm dx", dx.as_slice().unwrap(), nx.as_slice().unwrap(), 1e-3);
    for (dir, analytic) in [("fwd", &g.fwd), ("bwd", &g.bwd)] {
        let pick = |q: &mut BiLstmParams| if dir == "fwd" { q.fwd.clone() } else { q.bwd.clone() };
        let set = |q: &mut BiLstmParams, v| if dir == "fwd" { q.fwd = v } else { q.bwd = v };
        let mut q = p.clone();
        let base = pick(&mut q);
        let nw = numeric_gradient(&base.w, |w| {
            let mut q = p.clone();
            set(&mut q, sed_core::neural::lstm::LstmParams { w: w.clone(), ..base.clone() });
            loss(&x, &q)
        });
        let nu = numeric_gradient(&base.u, |u| {
            let mut q = p.clone();
            set(&mut q, sed_core::neural::lstm::LstmParams { u: u.clone(), ..base.clone() });
            loss(&x, &q)
        });
        let nb = numeric_gradient(&base.b, |b| {
            let mut q = p.clone();
            set(&mut q, sed_core::neural::lstm::LstmParams { b: b.clone(), ..base.clone() });
            loss(&x, &q)
        });
        record(&format!("bilstm {dir}.w"), analytic.w.as_slice().unwrap(), nw.as_slice().unwrap(), 1e-3);
        record(&format!("bilstm {dir}.u"), analytic.u.as_slice().unwrap(), nu.as_slice().unwrap(), 1e-3);
        record(&format!("bilstm {dir}.b"), analytic.b.as_slice().unwrap(), nb.as_slice().unwrap(), 1e-3);
    }

    // Sigmoid output layer with masked binary cross-entropy.
    let x = randn((2, 6, 5), &mut rng);
    let p = DenseParams::init(5, 3, &mut rng);
    let targets = Array3::from_shape_fn((2, 6, 3), |(n, t, k)| ((n + t + 2 * k) % 3 == 0) as u8 as f64);
    let mut mask = Array2::ones((2, 6));
    mask[[0, 5]] = 0.0;
    let loss = |x: &Array3<f64>, p: &DenseParams| {
        bce_loss(output_forward(x.view(), p).unwrap().view(), targets.view(), mask.view()).unwrap()
    };
    let probs = output_forward(x.view(), &p).unwrap();
    let dprobs = bce_backward(probs.view(), targets.view(), mask.view()).unwrap();
    let (dx, g) = output_backward(x.view(), &p, &probs, &dprobs);
    let nx = numeric_gradient(&x, |x| loss(x, &p));
    let nw = numeric_gradient(&p.w, |w| loss(&x, &DenseParams { w: w.clone(), b: p.b.clone() }));
    let nb = numeric_gradient(&p.b, |b| loss(&x, &DenseParams { w: p.w.clone(), b: b.clone() }));
    record("output dx", dx.as_slice().unwrap(), nx.as_slice().unwrap(), 1e-4);
    record("output dw", g.w.as_slice().unwrap(), nw.as_slice().unwrap(), 1e-4);
    record("output db", g.b.as_slice().unwrap(), nb.as_slice().unwrap(), 1e-4);

    // Composed toy model: two branches, two BiLSTM layers, sigmoid output.
    let arch = Architecture::new(
        vec![
            BranchSpec {
                name: "a".into(),
                input_len: 4,
                input_layers: 2,
                layers: vec![
                    ConvLayerSpec { filters: 3, kernel: (3, 3), pool: 2 },
                    ConvLayerSpec { filters: 2, kernel: (3, 3), pool: 2 },
                ],
            },
            BranchSpec::standard("b", 3, 1, 2),
        ],
        3,
        class_names(2),
    )
    .unwrap();
    let mut model = Model::init(arch, &mut rng).unwrap();
    for block in model.params.branches.iter_mut().flatten() {
        block.gamma = randn(block.gamma.len(), &mut rng) + 1.0;
        block.beta = randn(block.beta.len(), &mut rng);
    }
    let inputs = [randn((2, 6, 4, 2), &mut rng), randn((2, 6, 3, 1), &mut rng)];
    let targets = Array3::from_shape_fn((2, 6, 2), |(n, t, k)| ((n + 2 * t + k) % 3 == 0) as u8 as f64);
    let mut mask = Array2::ones((2, 6));
    mask[[1, 5]] = 0.0;
    let views: Vec<_> = inputs.iter().map(|a| a.view()).collect();
    let model_loss = |m: &Model| {
        let (_, cache) = m.forward::<ChaCha8Rng>(&views, Mode::Train, None).unwrap();
        m.backward(&cache, targets.view(), mask.view()).unwrap().0
    };
    let (_, cache) = model.forward::<ChaCha8Rng>(&views, Mode::Train, None).unwrap();
    let (_, grads) = model.backward(&cache, targets.view(), mask.view()).unwrap();
    for (bi, (name, analytic)) in grads.blocks().into_iter().enumerate() {
        let numeric: Vec<f64> = (0..analytic.len())
            .map(|i| {
                let mut up = model.clone();
                up.params.blocks_mut()[bi].1[i] += FD_STEP;
                let mut down = model.clone();
                down.params.blocks_mut()[bi].1[i] -= FD_STEP;
                (model_loss(&up) - model_loss(&down)) / (2.0 * FD_STEP)
            })
            .collect();
        record(&format!("model {name}"), analytic, &numeric, 1e-3);
    }

    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = errors
        .iter()
        .filter(|(_, e, tol)| !(e < tol))
        .map(|(n, e, tol)| format!("{n} {e:.2e} >= {tol:.0e}"))
        .collect();
    let worst_ff = errors.iter().filter(|e| e.2 < 1e-3).map(|e| e.1).fold(0.0, f64::max);
    let worst_rec = errors.iter().filter(|e| e.2 >= 1e-3).map(|e| e.1).fold(0.0, f64::max);
    outcome(
        failed.is_empty() && secs < 120.0,
        format!(
            "{} gradient blocks; worst feedforward {worst_ff:.2e} (limit 1e-4), worst recurrent/composed {worst_rec:.2e} (limit 1e-3); {secs:.1} s (limit 120 s){}",
            errors.len(),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    )
}

// -------------------------------------------------------------- end to end

/// Model size and schedule for the synthetic end-to-end runs.
fn experiment(data: &Path, out: PathBuf, features: &[&str], layering: Layering) -> ExperimentConfig {
    ExperimentConfig {
        dataset: Some(data.to_path_buf()),
        out,
        features: features.iter().map(|s| s.to_string()).collect(),
        layering,
        folds: vec![1],
        filters: 16,
        hidden: 32,
        train: TrainConfig {
            max_epochs: 60,
            patience: 15,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

fn run_experiment(cfg: &ExperimentConfig) -> MetricReport {
    cmd_extract(cfg).unwrap();
    let outcomes = cmd_train(cfg).unwrap();
    let h = &outcomes[0].history;
    eprintln!(
        "  trained [{}] layering={}: {} epochs, best {}",
        cfg.features.join(","),
        cfg.layering,
        h.epochs.len(),
        h.best_epoch
    );
    cmd_evaluate(cfg, None).unwrap()
}

/// F of a class-blind detector that marks every class active wherever any
/// reference event is active, on test fold 1.
fn class_blind_f(data: &Path, duration: f64) -> f64 {
    let manifest = build_manifest(data).unwrap();
    let mut refs = Vec::new();
    let mut contexts = Vec::new();
    for e in manifest.entries_in_folds(&[1]) {
        let events = parse_annotations(manifest.annotation_path(e)).unwrap();
        let frames = frame_count(duration, FRAME_HOP_SECONDS);
        let roll = annotations_to_roll_frames(&events, frames, &manifest.class_list, FRAME_HOP_SECONDS).unwrap();
        let any = roll.values().map_axis(Axis(1), |row| row.iter().any(|&v| v));
        let blind = Array2::from_shape_fn(roll.values().dim(), |(t, _)| any[t]);
        let blind = EventRoll::new(blind, FRAME_HOP_SECONDS, manifest.class_list.clone()).unwrap();
        refs.push((roll, blind));
        contexts.push(e.context.clone());
    }
    let scored: Vec<_> = refs
        .iter()
        .zip(&contexts)
        .map(|((r, s), c)| ScoredRecording {
            context: c,
            reference: r,
            system: s,
        })
        .collect();
    evaluate_by_context(&scored, 1.0).unwrap().f
}

struct Shared {
    root: tempfile::TempDir,
    separable_mel: Option<MetricReport>,
}

fn corpus(root: &Path, name: &str, spec: &SynthSpec) -> PathBuf {
    let dir = root.join(name);
    if !dir.join("manifest.tsv").exists() {
        synthesize(spec, &dir).unwrap();
    }
    dir
}

fn criterion_7(shared: &mut Shared) -> Outcome {
    let start = Instant::now();
    let root = shared.root.path().to_path_buf();
    let separable = corpus(&root, "separable", &SynthSpec::separable(&[8, -8], 1));
    let pure_spec = SynthSpec::pure_spatial(&[8, -8], 1);
    let pure = corpus(&root, "pure", &pure_spec);

    let sep_mel = run_experiment(&experiment(&separable, root.join("sep_mel"), &["mel"], Layering::Volume));
    let sep_both = run_experiment(&experiment(&separable, root.join("sep_mel_tdoa"), &["mel", "tdoa"], Layering::Volume));
    let pure_mel = run_experiment(&experiment(&pure, root.join("pure_mel"), &["mel"], Layering::Volume));
    let pure_both = run_experiment(&experiment(&pure, root.join("pure_mel_tdoa"), &["mel", "tdoa"], Layering::Volume));
    let blind = class_blind_f(&pure, pure_spec.duration_seconds);
    let secs = start.elapsed().as_secs_f64();

    let pass = sep_mel.f >= 0.8
        && sep_both.f >= 0.8
        && pure_both.f >= 0.8
        && pure_both.f > pure_mel.f
        && pure_mel.f <= blind + 0.05
        && secs < 45.0 * 60.0;
    let detail = format!(
        "separable: mel F={:.3}, mel+tdoa F={:.3}; pure-spatial: mel F={:.3} (class-blind chance F={:.3}, limit +0.05), mel+tdoa F={:.3}; {:.1} min (limit 45)",
        sep_mel.f,
        sep_both.f,
        pure_mel.f,
        blind,
        pure_both.f,
        secs / 60.0
    );
    shared.separable_mel = Some(sep_mel);
    outcome(pass, detail)
}

fn sorted_values(a: &Array3<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = a.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

fn criterion_8(shared: &mut Shared) -> Outcome {
    let root = shared.root.path().to_path_buf();
    let separable = corpus(&root, "separable", &SynthSpec::separable(&[8, -8], 1));
    let volume = match shared.separable_mel.take() {
        Some(r) => r,
        None => run_experiment(&experiment(&separable, root.join("sep_mel"), &["mel"], Layering::Volume)),
    };
    let concat = run_experiment(&experiment(&separable, root.join("sep_mel_concat"), &["mel"], Layering::Concat));

    // Both arrangements of one stored mel volume hold the same values.
    let stored = sed_core::volume::read_volume(root.join("sep_mel_concat/features/audio_rec_000.mel.sedf")).unwrap();
    let flat = stored.to_concatenated();
    let multiset_equal = sorted_values(stored.data()) == sorted_values(flat.data());
    let (t, l, c) = stored.shape();
    let shape_ok = flat.shape() == (t, l * c, 1);

    let names = |r: &MetricReport| r.contexts.iter().map(|c| c.context.clone()).collect::<Vec<_>>();
    let comparable = names(&volume) == names(&concat)
        && volume.tag.contains("layering=volume")
        && concat.tag.contains("layering=concat");
    outcome(
        multiset_equal && shape_ok && comparable,
        format!(
            "volume {:?} vs concat {:?}: multiset equal {multiset_equal}; reports `{}` F={:.3} and `{}` F={:.3}",
            (t, l, c),
            flat.shape(),
            volume.tag,
            volume.f,
            concat.tag,
            concat.f
        ),
    )
}

fn criterion_9(shared: &Shared) -> Outcome {
    let root = shared.root.path().join("determinism");
    let spec = SynthSpec {
        recordings: 6,
        duration_seconds: 4.0,
        folds: 3,
        event_rate: 0.8,
        event_length: (0.3, 1.0),
        ..SynthSpec::separable(&[8, -8], 9)
    };
    let data = corpus(&root, "data", &spec);
    let mut files: Vec<BTreeMap<String, Vec<u8>>> = Vec::new();
    for run in ["run_a", "run_b"] {
        let cfg = ExperimentConfig {
            filters: 4,
            hidden: 8,
            threads: 0,
            train: TrainConfig {
                max_epochs: 4,
                batch_size: 4,
                seed: 17,
                ..TrainConfig::default()
            },
            ..experiment(&data, root.join(run), &["mel", "tdoa"], Layering::Volume)
        };
        cmd_extract(&cfg).unwrap();
        cmd_train(&cfg).unwrap();
        cmd_evaluate(&cfg, None).unwrap();
        let mut map = BTreeMap::new();
        for rel in [
            "models/fold1.history.txt",
            "models/fold1.sedm",
            "reports/report.txt",
            "reports/report.kv",
        ] {
            map.insert(rel.to_string(), fs::read(cfg.out.join(rel)).unwrap());
        }
        files.push(map);
    }
    let differing: Vec<&String> = files[0].keys().filter(|k| files[0][*k] != files[1][*k]).collect();
    outcome(
        differing.is_empty(),
        format!(
            "two seeded single-threaded runs: {} files compared, differing {:?}",
            files[0].len(),
            differing
        ),
    )
}

fn main() {
    let mut shared = Shared {
        root: tempfile::tempdir().unwrap(),
        separable_mel: None,
    };
    let criteria: Vec<(u32, &str, Box<dyn FnOnce(&mut Shared) -> Outcome>)> = vec![
        (1, "metric oracle equivalence", Box::new(|_| criterion_1())),
        (2, "hand-checked metric values", Box::new(|_| criterion_2())),
        (3, "GCC-PHAT/TDOA delay recovery", Box::new(|_| criterion_3())),
        (4, "dominant-frequency accuracy", Box::new(|_| criterion_4())),
        (5, "shape conformance", Box::new(|_| criterion_5())),
        (6, "gradient verification", Box::new(|_| criterion_6())),
        (7, "end-to-end synthetic experiment", Box::new(criterion_7)),
        (8, "volume vs concatenation ablation", Box::new(criterion_8)),
        (9, "determinism", Box::new(|s| criterion_9(s))),
    ];
    let mut failed = Vec::new();
    for (id, name, run) in criteria {
        let o = run(&mut shared);
        println!("criterion {id} ({name}): {} {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all 9 criteria PASS");
    } else {
        println!("acceptance: FAIL {failed:?}");
        std::process::exit(1);
    }
}
