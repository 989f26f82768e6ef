//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero when any of them fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::Parser;
use ferbench_cli::artifacts::{load_pairs, load_split, PAIRS_DIR};
use ferbench_cli::pipeline::method_statistics;
use ferbench_cli::Cli;
use ferbench_core::analytics::{
    dice, one_way_anova, pearson, simple_vote, tally, tukey_pairwise, weighted_vote, PairLogits,
    VoteMethod,
};
use ferbench_core::autodiff::{LayerSpec, Network, Tensor};
use ferbench_core::saliency::{
    cam, cam_features, extremal_perturbation, gradcam, normalize_scale_255, threshold_mask,
    EPConfig, SaliencyMap, SaliencySource, DEFAULT_THRESHOLD,
};
use ferbench_core::stimuli::{
    generate_synthetic_dataset, BinaryMask, ExpressionLabel, Image, StimulusImage,
};
use ferbench_core::training::{PairSpec, TrainedClassifier};
use ferbench_core::trial::read_trials_jsonl;
use ferbench_service::journal::{recover, Journal};
use ferbench_service::participant::{ParticipantPolicy, ScriptedParticipant};
use ferbench_service::patch::in_disk;
use ferbench_service::session::Session;
use ferbench_service::{router, AppState, ManualClock, ServiceConfig, StimulusSet};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Suite {
    passed: usize,
    failed: usize,
    /// Name filters from the command line; empty runs everything.
    filters: Vec<String>,
}

impl Suite {
    fn run(&mut self, name: &str, budget: Duration, f: impl FnOnce() -> Verdict) {
        if !self.filters.is_empty() && !self.filters.iter().any(|f| name.contains(f.as_str())) {
            return;
        }
        let started = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = started.elapsed();
        let verdict = match verdict {
            Ok(d) if elapsed > budget => Err(format!("{d}; over the {}s budget", budget.as_secs())),
            v => v,
        };
        let (tag, detail) = match &verdict {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        if verdict.is_err() {
            self.failed += 1;
        } else {
            self.passed += 1;
        }
        println!("{tag} {name} [{:.1}s] {detail}", elapsed.as_secs_f64());
    }
}

// ---------------------------------------------------------------- gradients

fn random_case(seed: u64) -> (Network<f64>, Tensor<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let in_c = rng.random_range(1..=3);
    let blocks = rng.random_range(1..=3);
    let widths: Vec<usize> = (0..blocks).map(|_| rng.random_range(2..=4)).collect();
    let classes = rng.random_range(2..=5);
    let mut net = Network::<f64>::small_cnn(in_c, &widths, classes, seed).unwrap();
    for p in net.params_mut() {
        if p.name.ends_with("bias") {
            p.tensor
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
    // every block halves the spatial size
    let side = (1 << blocks) * rng.random_range(2..=3);
    let n = rng.random_range(1..=3);
    let data = (0..n * in_c * side * side)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let x = Tensor::new(vec![n, in_c, side, side], data).unwrap();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    (net, x, labels)
}

fn loss_of(net: &Network<f64>, x: &Tensor<f64>, labels: &[usize]) -> f64 {
    let mut pass = net.forward(x).unwrap();
    let l = pass.loss(labels, None).unwrap();
    pass.graph.value(l).data()[0]
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / ((a.abs() + b.abs()) / 2.0).max(1e-8)
}

/// Signs of every pre-ReLU value, from a nested-loop forward pass of the
/// conv blocks.
fn relu_pattern(net: &Network<f64>, x: &Tensor<f64>) -> Vec<bool> {
    let s = x.shape();
    let (n, mut c, mut h, mut w) = (s[0], s[1], s[2], s[3]);
    let mut act = x.data().to_vec();
    let mut signs = Vec::new();
    let mut pi = 0;
    for layer in net.layers() {
        match *layer {
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                ..
            } => {
                let wt = net.params()[pi].tensor.data();
                let b = net.params()[pi + 1].tensor.data();
                pi += 2;
                let pad = (kernel / 2) as isize;
                let mut out = vec![0.0; n * out_channels * h * w];
                for (idx, o) in out.iter_mut().enumerate() {
                    let (xx, y) = (idx % w, (idx / w) % h);
                    let (oc, smp) = ((idx / (w * h)) % out_channels, idx / (w * h * out_channels));
                    let mut acc = b[oc];
                    for i in 0..c {
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let sy = y as isize + ky as isize - pad;
                                let sx = xx as isize + kx as isize - pad;
                                if sy >= 0 && sx >= 0 && sy < h as isize && sx < w as isize {
                                    acc += wt[((oc * c + i) * kernel + ky) * kernel + kx]
                                        * act[((smp * c + i) * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                    }
                    *o = acc;
                }
                act = out;
                c = out_channels;
            }
            LayerSpec::Relu => {
                signs.extend(act.iter().map(|v| *v > 0.0));
                act.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            LayerSpec::AvgPool2 => {
                let (oh, ow) = (h / 2, w / 2);
                act = (0..n * c * oh * ow)
                    .map(|idx| {
                        let (xx, y, p) = (idx % ow, (idx / ow) % oh, idx / (ow * oh));
                        let at = |dy: usize, dx: usize| act[(p * h + 2 * y + dy) * w + 2 * xx + dx];
                        (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0
                    })
                    .collect();
                h = oh;
                w = ow;
            }
            _ => break,
        }
    }
    signs
}

/// Central differences are only an oracle where the loss is smooth over the
/// whole stencil, so partials whose `±h` stencil flips a ReLU are counted
/// separately and must stay rare.
fn gradient_correctness() -> Verdict {
    let h = 1e-4;
    let (mut worst, mut checked, mut kinked) = (0.0f64, 0usize, 0usize);
    let mut compare = |a: f64,
                       plus: (&Network<f64>, &Tensor<f64>),
                       minus: (&Network<f64>, &Tensor<f64>),
                       labels: &[usize]| {
        if relu_pattern(plus.0, plus.1) != relu_pattern(minus.0, minus.1) {
            kinked += 1;
            return;
        }
        let numeric =
            (loss_of(plus.0, plus.1, labels) - loss_of(minus.0, minus.1, labels)) / (2.0 * h);
        worst = worst.max(rel_err(a, numeric));
        checked += 1;
    };
    for seed in 0..20 {
        let (mut net, x, labels) = random_case(1000 + seed);
        let mut pass = net.forward_with(&x, true).unwrap();
        let loss = pass.loss(&labels, None).unwrap();
        net.backward(&mut pass, loss).unwrap();
        let input_grad = pass.graph.grad(pass.input).unwrap().to_vec();
        for pi in 0..net.params().len() {
            let analytic = net.params()[pi].tensor.grad.clone().unwrap();
            for (j, &a) in analytic.iter().enumerate() {
                let mut plus = net.clone();
                plus.params_mut()[pi].tensor.data_mut()[j] += h;
                let mut minus = net.clone();
                minus.params_mut()[pi].tensor.data_mut()[j] -= h;
                compare(a, (&plus, &x), (&minus, &x), &labels);
            }
        }
        for (j, &a) in input_grad.iter().enumerate() {
            let mut xp = x.clone();
            xp.data_mut()[j] += h;
            let mut xm = x.clone();
            xm.data_mut()[j] -= h;
            compare(a, (&net, &xp), (&net, &xm), &labels);
        }
    }
    let total = checked + kinked;
    check(
        worst <= 1e-3 && kinked * 100 <= total,
        format!(
            "20 networks, {checked} partials, max relative error {worst:.2e}; {kinked} of {total} stencils cross a ReLU kink"
        ),
    )
}

// ---------------------------------------------------------------- CAM / GradCAM

/// Bilinear resize with half-pixel centers and clamped edges.
fn resize(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let at = |y: usize, x: usize| src[y * w + x];
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let sy = ((y as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let sx = ((x as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

fn min_max(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

fn cam_gradcam_equivalence() -> Verdict {
    let mut worst = 0.0f64;
    let mut maps = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let widths: Vec<usize> = (0..3).map(|_| rng.random_range(3..=8)).collect();
        let classes = rng.random_range(2..=8);
        let mut net = Network::<f32>::small_cnn(3, &widths, classes, seed).unwrap();
        for p in net.params_mut() {
            if p.name.ends_with("bias") {
                p.tensor
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-0.2..0.2));
            }
        }
        let side = [24, 32, 48][seed as usize % 3];
        let data = (0..side * side * 3)
            .map(|_| rng.random_range(0.0f32..1.0))
            .collect();
        let img = Image::new(side, side, 3, data).unwrap();
        for class in 0..classes {
            let (fh, fw, raw) = cam_features(&net, &img, class).unwrap();
            let relu: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
            let expected = min_max(&resize(&relu, fh, fw, side, side));
            let got = gradcam(&net, &img, class).unwrap();
            for (a, b) in got.values.iter().zip(&expected) {
                worst = worst.max((a - b).abs());
            }
            maps += 1;
        }
    }
    check(
        worst <= 1e-4,
        format!("10 networks, {maps} maps, max per-pixel difference {worst:.2e}"),
    )
}

// ---------------------------------------------------------------- shared trained pipeline

struct Trained {
    _root: tempfile::TempDir,
    pairs: Vec<TrainedClassifier>,
    heldout: Vec<StimulusImage>,
    stimuli: Vec<StimulusImage>,
}

fn cli(config: &Path, args: &[&str]) -> Result<Option<PathBuf>, String> {
    let mut argv = vec!["ferbench", "--config", config.to_str().unwrap()];
    argv.extend_from_slice(args);
    let parsed = Cli::try_parse_from(argv).map_err(|e| e.to_string())?;
    ferbench_cli::run(parsed).map_err(|e| format!("{args:?}: {e}"))
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn end_to_end(slot: &mut Option<Trained>) -> Verdict {
    let root = tempfile::TempDir::new().unwrap();
    let r = root.path().display();
    let config = root.path().join("pipeline.toml");
    std::fs::write(
        &config,
        format!(
            "[paths]\ndataset = \"{r}/data/train\"\nheldout = \"{r}/data/heldout\"\nstimuli = \"{r}/data/stimuli\"\ncheckpoints = \"{r}/ckpt\"\nresults = \"{r}/results\"\n"
        ),
    )
    .unwrap();
    cli(&config, &["synth-data"])?;
    let trained = cli(&config, &["train-pairs"])?.unwrap();
    cli(&config, &["train-multiclass"])?;
    let eval = cli(&config, &["evaluate"])?.unwrap();

    let report = read_json(&trained.join("training_report.json"));
    let rows = report["classifiers"].as_array().unwrap();
    let reached = rows
        .iter()
        .filter(|c| {
            c["final_train_acc"].as_f64().unwrap() >= 0.9
                && c["epochs_run"].as_u64().unwrap() <= 150
        })
        .count();
    let slowest = rows
        .iter()
        .map(|c| c["epochs_run"].as_u64().unwrap())
        .max()
        .unwrap_or(0);
    let lowest = rows
        .iter()
        .map(|c| c["final_train_acc"].as_f64().unwrap())
        .fold(f64::INFINITY, f64::min);

    let corr = read_json(&eval.join("correlations.json"));
    let simple = corr["accuracy"]["simple"].as_f64().unwrap();
    let weighted = corr["accuracy"]["weighted"].as_f64().unwrap();
    let r_with = |ensemble: &str| {
        corr["correlations"]
            .as_array()
            .unwrap()
            .iter()
            .find(|c| c["a"] == ensemble && c["b"] == "multiclass" && c["mode"] == "all")
            .and_then(|c| c["r"].as_f64())
            .unwrap_or(f64::NAN)
    };
    let (r_simple, r_weighted) = (r_with("simple"), r_with("weighted"));

    let mc_report = std::fs::read_dir(root.path().join("results"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            p.file_name()
                .unwrap()
                .to_str()
                .unwrap()
                .starts_with("train-multiclass-")
        })
        .map(|p| read_json(&p.join("training_report.json")))
        .next()
        .unwrap();
    let mc_epochs = mc_report["classifiers"][0]["epochs_run"]
        .as_u64()
        .unwrap_or(0);

    let ckpt = root.path().join("ckpt");
    *slot = Some(Trained {
        pairs: load_pairs(&ckpt.join(PAIRS_DIR), "train-pairs").map_err(|e| e.to_string())?,
        heldout: load_split(&root.path().join("data/heldout"), "held-out")
            .map_err(|e| e.to_string())?,
        stimuli: load_split(&root.path().join("data/stimuli"), "stimuli")
            .map_err(|e| e.to_string())?,
        _root: root,
    });

    check(
        reached == 28 && simple >= 0.6 && weighted >= 0.6 && mc_epochs == 40 && r_simple > 0.5 && r_weighted > 0.5,
        format!(
            "{reached}/28 pairs >= 0.90 (lowest {lowest:.3}, most epochs {slowest}); simple vote {simple:.3}, weighted vote {weighted:.3}; multiclass {mc_epochs} epochs, r(simple, multiclass) {r_simple:.3}, r(weighted, multiclass) {r_weighted:.3}"
        ),
    )
}

fn non_neutral_cycle(items: &[StimulusImage], n: usize) -> Vec<&StimulusImage> {
    let labels: Vec<ExpressionLabel> = ExpressionLabel::ALL
        .into_iter()
        .filter(|&l| l != ExpressionLabel::Neutral)
        .collect();
    let mut cursors = vec![0usize; labels.len()];
    let mut out = Vec::new();
    for k in 0..n {
        let li = k % labels.len();
        let next = items
            .iter()
            .filter(|s| s.true_label == labels[li])
            .nth(cursors[li])
            .expect("enough images per class");
        cursors[li] += 1;
        out.push(next);
    }
    out
}

/// The (neutral, label) classifier and the class index of `label` in it.
fn neutral_pair(
    pairs: &[TrainedClassifier],
    label: ExpressionLabel,
) -> (&TrainedClassifier, usize) {
    let spec = PairSpec::new(ExpressionLabel::Neutral, label).unwrap();
    let clf = pairs
        .iter()
        .find(|c| c.target == ferbench_core::training::ClassifierTarget::Pair(spec))
        .unwrap();
    (clf, clf.target.class_index(label).unwrap())
}

fn ep_behavior(trained: Option<&Trained>) -> Verdict {
    let t = trained.ok_or("no trained classifiers")?;
    let cfg = EPConfig::default();
    let (mut area_ok, mut preserved_ok, mut runs) = (0, 0, 0);
    let mut worst_area = 0.0f64;
    for stim in non_neutral_cycle(&t.stimuli, 10) {
        let (clf, class) = neutral_pair(&t.pairs, stim.true_label);
        for seed in 0..5 {
            let r = extremal_perturbation(
                &clf.net,
                &stim.pixels,
                class,
                &EPConfig {
                    seed,
                    ..cfg.clone()
                },
            )
            .map_err(|e| e.to_string())?;
            let off = (r.mask_mean - cfg.area_fraction).abs();
            worst_area = worst_area.max(off);
            area_ok += usize::from(off <= 0.1);
            preserved_ok += usize::from(r.preserved_logit > r.blurred_logit);
            runs += 1;
        }
    }
    check(
        area_ok == runs && preserved_ok * 10 >= runs * 9,
        format!(
            "{runs} runs: mask mean within 0.1 of area in {area_ok} (worst {worst_area:.3}); preserved logit above blurred in {preserved_ok}"
        ),
    )
}

fn random_mask(w: usize, h: usize, on: usize, rng: &mut ChaCha8Rng) -> BinaryMask {
    let mut idx: Vec<usize> = (0..w * h).collect();
    idx.shuffle(rng);
    let mut bits = vec![0u8; w * h];
    for &i in &idx[..on] {
        bits[i] = 1;
    }
    BinaryMask::from_bits(w, h, bits).unwrap()
}

fn mask_of(map: &SaliencyMap) -> BinaryMask {
    threshold_mask(&normalize_scale_255(map), DEFAULT_THRESHOLD)
}

fn localization(trained: Option<&Trained>) -> Verdict {
    let t = trained.ok_or("no trained classifiers")?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let methods = [
        SaliencySource::Cam,
        SaliencySource::Gradcam,
        SaliencySource::ExtremalPerturbation,
    ];
    let mut groups: Vec<(SaliencySource, Vec<f64>)> =
        methods.iter().map(|&m| (m, Vec::new())).collect();
    let mut random = Vec::new();
    for stim in non_neutral_cycle(&t.heldout, 20) {
        let gt = stim
            .gt_region
            .as_ref()
            .ok_or("stimulus without ground-truth region")?;
        let (clf, class) = neutral_pair(&t.pairs, stim.true_label);
        let ep = extremal_perturbation(&clf.net, &stim.pixels, class, &EPConfig::default())
            .map_err(|e| e.to_string())?;
        let maps = [
            cam(&clf.net, &stim.pixels, class).map_err(|e| e.to_string())?,
            gradcam(&clf.net, &stim.pixels, class).map_err(|e| e.to_string())?,
            ep.map,
        ];
        for ((_, g), m) in groups.iter_mut().zip(&maps) {
            g.push(dice(&mask_of(m), gt).unwrap());
        }
        let on = mask_of(&maps[2]).count();
        let (w, h) = (stim.pixels.width(), stim.pixels.height());
        let draws: f64 = (0..20)
            .map(|_| dice(&random_mask(w, h, on, &mut rng), gt).unwrap())
            .sum();
        random.push(draws / 20.0);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (cam_d, grad_d, ep_d, rnd_d) = (
        mean(&groups[0].1),
        mean(&groups[1].1),
        mean(&groups[2].1),
        mean(&random),
    );
    let stats = method_statistics(&groups).map_err(|e| e.to_string())?;
    let f = stats["anova"]["f"].as_f64().unwrap_or(f64::NAN);
    let tukey: Vec<String> = stats["tukey"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| {
            format!(
                "{}-{} p={:.3}",
                c["a"].as_str().unwrap_or("?"),
                c["b"].as_str().unwrap_or("?"),
                c["p_value"].as_f64().unwrap_or(f64::NAN)
            )
        })
        .collect();
    let reported = f.is_finite()
        && stats["tukey"].as_array().unwrap().len() == 3
        && stats["tukey"]
            .as_array()
            .unwrap()
            .iter()
            .all(|c| c["p_value"].as_f64().is_some_and(f64::is_finite));
    check(
        ep_d - rnd_d >= 0.15 && reported,
        format!(
            "20 images: dice EP {ep_d:.3}, CAM {cam_d:.3}, GradCAM {grad_d:.3}, random {rnd_d:.3} (EP margin {:.3}); ANOVA F={f:.2} p={:.2e}; Tukey {}",
            ep_d - rnd_d,
            stats["anova"]["p_value"].as_f64().unwrap_or(f64::NAN),
            tukey.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- dice and statistics

fn independent_dice(a: &[u8], b: &[u8]) -> f64 {
    let inter = a
        .iter()
        .zip(b)
        .filter(|(x, y)| **x == 1 && **y == 1)
        .count();
    let total = a.iter().filter(|x| **x == 1).count() + b.iter().filter(|x| **x == 1).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

fn dice_and_stats() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut problems = Vec::new();
    for _ in 0..1000 {
        let (w, h) = (rng.random_range(1..12), rng.random_range(1..12));
        let density = rng.random_range(0.0..1.0);
        let bits = |rng: &mut ChaCha8Rng| {
            (0..w * h)
                .map(|_| u8::from(rng.random_bool(density)))
                .collect::<Vec<u8>>()
        };
        let (ab, bb) = (bits(&mut rng), bits(&mut rng));
        let a = BinaryMask::from_bits(w, h, ab.clone()).unwrap();
        let b = BinaryMask::from_bits(w, h, bb.clone()).unwrap();
        let d = dice(&a, &b).unwrap();
        if d != dice(&b, &a).unwrap()
            || !(0.0..=1.0).contains(&d)
            || (d - independent_dice(&ab, &bb)).abs() > 1e-12
        {
            problems.push(format!("dice {d} on {w}x{h}"));
        }
        if !a.is_empty() && dice(&a, &a).unwrap() != 1.0 {
            problems.push("identity".into());
        }
        let complement = BinaryMask::from_bits(w, h, ab.iter().map(|v| 1 - v).collect()).unwrap();
        if !a.is_empty() && !complement.is_empty() && dice(&a, &complement).unwrap() != 0.0 {
            problems.push("disjoint".into());
        }
    }
    let a = BinaryMask::from_fn(4, 3, |x, y| y == 0 && x < 4);
    let b = BinaryMask::from_fn(4, 3, |x, y| (y == 0 && x >= 2) || y == 1);
    let fixture = dice(&a, &b).unwrap();
    if (fixture - 0.4).abs() > 1e-12 {
        problems.push(format!("|a|=4 |b|=6 overlap 2 gave {fixture}"));
    }

    let close = |name: &str, got: f64, want: f64, tol: f64, problems: &mut Vec<String>| {
        if (got - want).abs() > tol {
            problems.push(format!("{name}: {got} vs {want}"));
        }
    };
    // Reference values from scipy.stats (pearsonr, f_oneway, tukey_hsd).
    let x = [0.31, 0.45, 0.52, 0.38, 0.61, 0.72, 0.55, 0.49, 0.66, 0.41];
    let y = [0.28, 0.50, 0.47, 0.40, 0.58, 0.80, 0.51, 0.45, 0.70, 0.35];
    let r = pearson(&x, &y).unwrap();
    close(
        "pearson r",
        r.statistic,
        0.9595602195351024,
        1e-6,
        &mut problems,
    );
    close(
        "pearson p",
        r.p_value,
        1.1142438911980748e-05,
        1e-6,
        &mut problems,
    );
    let hand: Vec<f64> = (1..=8).map(f64::from).collect();
    let swapped = [2.0, 1.0, 4.0, 3.0, 6.0, 5.0, 8.0, 7.0];
    close(
        "pearson hand",
        pearson(&hand, &swapped).unwrap().statistic,
        38.0 / 42.0,
        1e-6,
        &mut problems,
    );

    let g = vec![
        vec![0.42, 0.51, 0.38, 0.47, 0.55, 0.44],
        vec![0.30, 0.27, 0.35, 0.29, 0.33],
        vec![0.61, 0.58, 0.66, 0.52, 0.63, 0.59, 0.60],
    ];
    let a = one_way_anova(&g).unwrap();
    close(
        "anova F",
        a.statistic,
        53.521398238115594,
        1e-6,
        &mut problems,
    );
    close(
        "anova p",
        a.p_value,
        1.4853996403874353e-07,
        1e-6,
        &mut problems,
    );
    let hand = vec![
        vec![1.0, 2.0, 3.0],
        vec![4.0, 5.0, 6.0],
        vec![7.0, 8.0, 9.0],
    ];
    close(
        "anova hand F",
        one_way_anova(&hand).unwrap().statistic,
        27.0,
        1e-6,
        &mut problems,
    );

    let expected = [
        (0, 1, 0.15366666666666667, 0.00025708494643306157),
        (0, 2, -0.13690476190476186, 0.000348286740287973),
        (1, 2, -0.29057142857142854, 9.38620263735146e-08),
    ];
    let tukey = tukey_pairwise(&g).unwrap();
    for (i, j, diff, p) in expected {
        let c = tukey
            .iter()
            .find(|c| c.i == i && c.j == j)
            .ok_or("missing Tukey pair")?;
        close(
            &format!("tukey diff {i}-{j}"),
            c.mean_diff,
            diff,
            1e-6,
            &mut problems,
        );
        close(
            &format!("tukey p {i}-{j}"),
            c.result.p_value,
            p,
            1e-3,
            &mut problems,
        );
    }
    check(
        problems.is_empty(),
        if problems.is_empty() {
            "1000 random mask pairs, 0.4 fixture, Pearson/ANOVA/Tukey fixtures".into()
        } else {
            problems.join("; ")
        },
    )
}

// ---------------------------------------------------------------- voting

fn random_logits(rng: &mut ChaCha8Rng) -> Vec<PairLogits> {
    PairSpec::all()
        .into_iter()
        .map(|p| {
            (
                p,
                [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)],
            )
        })
        .collect()
}

fn voting() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut mismatched, mut unstable) = (0, 0);
    for _ in 0..1000 {
        let e = random_logits(&mut rng);
        let mut counts = [0u32; 8];
        for (pair, [a, b]) in &e {
            let w = if b > a {
                pair.label_b()
            } else {
                pair.label_a()
            };
            counts[ExpressionLabel::ALL.iter().position(|&l| l == w).unwrap()] += 1;
        }
        let best = counts.iter().copied().max().unwrap();
        let expected = ExpressionLabel::ALL[counts.iter().position(|&c| c == best).unwrap()];
        if simple_vote(&e).unwrap() != expected
            || tally(&e, VoteMethod::Simple).unwrap().votes != counts
        {
            mismatched += 1;
        }
        let scale = rng.random_range(0.01..100.0);
        let scaled: Vec<PairLogits> = e
            .iter()
            .map(|(p, [a, b])| (*p, [a * scale, b * scale]))
            .collect();
        if weighted_vote(&e).unwrap() != weighted_vote(&scaled).unwrap() {
            unstable += 1;
        }
    }
    check(
        mismatched == 0 && unstable == 0,
        format!("1000 instances: {mismatched} simple-vote mismatches, {unstable} weighted winners changed by rescaling"),
    )
}

// ---------------------------------------------------------------- service protocol

fn service_protocol() -> Verdict {
    let journal_dir = tempfile::TempDir::new().unwrap();
    let cfg = ServiceConfig {
        journal_dir: Some(journal_dir.path().to_path_buf()),
        ..ServiceConfig::default()
    };
    let items = generate_synthetic_dataset(35, 64, 31).unwrap();
    let set = StimulusSet::new(cfg.stimulus_set_id.clone(), items.clone(), cfg.blur_k)
        .map_err(|e| e.to_string())?;
    let replay_set =
        StimulusSet::new(cfg.stimulus_set_id.clone(), items.clone(), cfg.blur_k).unwrap();
    let radius = cfg.reveal_radius;
    let clock = ManualClock::new(10_000);
    let state = Arc::new(
        AppState::new(cfg, vec![set], Arc::new(clock.clone())).map_err(|e| e.to_string())?,
    );
    let participant = ScriptedParticipant::new(
        router(state.clone()),
        Some(clock),
        ParticipantPolicy::default(),
    )
    .with_knowledge(&items);
    let rt = tokio::runtime::Builder::new_current_thread()
        .build()
        .unwrap();
    let log = rt
        .block_on(participant.run("S01", 8, Some(8)))
        .map_err(|e| e.to_string())?;
    let session_id = log.created.session_id.clone();
    let exported = rt
        .block_on(participant.export(&session_id))
        .map_err(|e| e.to_string())?;

    let mut problems = Vec::new();
    if log.trials.len() != 280 || exported.len() != 280 {
        problems.push(format!(
            "{} trials served, {} exported",
            log.trials.len(),
            exported.len()
        ));
    }
    let starts: Vec<usize> = log
        .trials
        .iter()
        .filter(|t| t.first_in_block)
        .map(|t| t.trial_index)
        .collect();
    let per_block: Vec<usize> = (0..4)
        .map(|b| log.trials.iter().filter(|t| t.block_index == b).count())
        .collect();
    if starts != [0, 70, 140, 210] || per_block != [70; 4] {
        problems.push(format!(
            "blocks start at {starts:?} with sizes {per_block:?}"
        ));
    }

    // replay the exported JSON lines from disk
    let mut buf = Vec::new();
    ferbench_core::trial::write_trials_jsonl(&mut buf, &exported).unwrap();
    let replayed = read_trials_jsonl(buf.as_slice()).map_err(|e| e.to_string())?;
    let mut leaks = 0;
    let mut clicks = 0;
    for (obs, rec) in log.trials.iter().zip(&replayed) {
        clicks += rec.clicks.len();
        let offsets: Vec<u64> = obs.click_ms.iter().map(|m| m - obs.served_ms).collect();
        let recorded: Vec<u64> = rec.clicks.iter().map(|c| c.ms_since_trial_start).collect();
        let duration = obs.click_ms.first().map(|first| obs.choice_ms - first);
        if rec.stimulus_id != obs.stimulus_id
            || rec.clicks.len() != obs.clicks.len()
            || offsets != recorded
            || rec.duration_ms != duration
            || rec.choice_ms_since_trial_start != obs.choice_ms - obs.served_ms
        {
            problems.push(format!("trial {} does not replay", obs.trial_index));
        }
        let idx = replay_set.index_of(&obs.stimulus_id).unwrap();
        let original = replay_set.original_rgb8(idx);
        for (x, y, px) in obs.composite.enumerate_pixels() {
            let revealed = obs
                .clicks
                .iter()
                .any(|&(cx, cy)| in_disk(x, y, cx, cy, radius));
            let want = if revealed {
                original.get_pixel(x, y)
            } else {
                obs.blurred.get_pixel(x, y)
            };
            if px != want {
                leaks += 1;
            }
        }
    }
    if leaks > 0 {
        problems.push(format!(
            "{leaks} composite pixels differ from blurred outside or original inside the disks"
        ));
    }

    let events =
        recover(Journal::path_for(journal_dir.path(), &session_id)).map_err(|e| e.to_string())?;
    let session = Session::replay(&events, &replay_set).map_err(|e| e.to_string())?;
    if session.completed() != exported.as_slice() {
        problems.push("journal replay differs from export".into());
    }
    check(
        problems.is_empty(),
        if problems.is_empty() {
            format!("280 trials in 4 blocks of 70, {clicks} clicks replayed exactly, no pixel leaks, journal replay identical")
        } else {
            problems.join("; ")
        },
    )
}

fn main() {
    let mut suite = Suite {
        passed: 0,
        failed: 0,
        filters: std::env::args()
            .skip(1)
            .filter(|a| !a.starts_with('-'))
            .collect(),
    };
    let mins = |m: u64| Duration::from_secs(60 * m);
    suite.run(
        "gradient correctness",
        Duration::from_secs(60),
        gradient_correctness,
    );
    suite.run(
        "CAM/GradCAM equivalence",
        Duration::from_secs(30),
        cam_gradcam_equivalence,
    );
    suite.run("dice/statistics oracles", mins(1), dice_and_stats);
    suite.run("voting oracles", mins(1), voting);
    suite.run("experiment-service protocol", mins(5), service_protocol);
    let mut trained = None;
    suite.run("end-to-end ensemble", mins(20), || end_to_end(&mut trained));
    suite.run("EP behavior", mins(10), || ep_behavior(trained.as_ref()));
    suite.run("saliency localization", mins(15), || {
        localization(trained.as_ref())
    });
    println!(
        "acceptance: {} passed, {} failed",
        suite.passed, suite.failed
    );
    if suite.failed > 0 {
        std::process::exit(1);
    }
}
