//! Acceptance suite. Runs the nine checks in order on one shared toy corpus,
//! prints a PASS/FAIL line for each and exits non-zero if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use cae::audio::{MelSpectrogram, MEL_BANDS};
use cae::critics::Critics;
use cae::data::{make_toy_corpus, Corpus, Split};
use cae::embedder::{pretrain_embedder, temporal_lengths, PretrainConfig, VoiceEmbedder, EMBEDDING_DIM};
use cae::evaluation::{evaluate, retrieval_from_scores, RetrievalTarget};
use cae::generator::{GateSet, Generator, GeneratorConfig};
use cae::losses::{classifier_loss, discriminator_loss, l1_loss};
use cae::nn::Mode;
use cae::training::{sample_instance, step_rng, Precision, StepReport, TrainConfig, TrainedModels, Trainer};
use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const CORPUS_SEED: u64 = 7;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// Shared toy world: 4 identities, 20 faces and 20 clips each.
struct World {
    _dir: tempfile::TempDir,
    train: Corpus,
    eval: Corpus,
    embedder: VoiceEmbedder,
    pretrain_time: Duration,
}

fn world() -> World {
    let dir = tempfile::tempdir().unwrap();
    let m = make_toy_corpus(dir.path(), 4, 20, 20, CORPUS_SEED).unwrap();
    let train = Corpus::load(&m, Split::Train, 16_000).unwrap();
    let eval = Corpus::load(&m, Split::Eval, 16_000).unwrap();
    let t0 = Instant::now();
    let (embedder, report) = pretrain_embedder(
        &train.labeled_voices(),
        &PretrainConfig::default(),
        DType::F32,
        &Device::Cpu,
    )
    .unwrap();
    println!("  (voice embedder pre-trained: accuracy {:.3})", report.train_accuracy);
    World {
        _dir: dir,
        train,
        eval,
        embedder,
        pretrain_time: t0.elapsed(),
    }
}

fn randn(shape: &[usize], dtype: DType, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu)
        .unwrap()
        .to_dtype(dtype)
        .unwrap()
}

fn uniform_face(rng: &mut ChaCha8Rng, dtype: DType) -> Tensor {
    let v: Vec<f64> = (0..3 * 64 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, (1, 3, 64, 64), &Device::Cpu)
        .unwrap()
        .to_dtype(dtype)
        .unwrap()
}

fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_vec1()
        .unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    values(t)[0]
}

/// Check 1: With every gate at 1 the gated generator equals the plain U-net.
fn gate_identity() -> Verdict {
    let start = Instant::now();
    let g = Generator::new(GeneratorConfig::toy(), 11, DType::F32, &Device::Cpu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // move the running statistics away from their initial values
    for _ in 0..3 {
        g.forward_ungated(&uniform_face(&mut rng, DType::F32), Mode::Train)
            .unwrap();
    }
    let ones = GateSet::constant(&g, 1.0).unwrap();
    let mut mismatches = 0;
    for _ in 0..100 {
        let x = uniform_face(&mut rng, DType::F32);
        let skips = g.encode(&x, Mode::Eval).unwrap();
        let gated = g.decode(&skips, Some(&ones), Mode::Eval).unwrap();
        let plain = g.forward_ungated(&x, Mode::Eval).unwrap();
        let (a, b): (Vec<f32>, Vec<f32>) = (
            gated.flatten_all().unwrap().to_vec1().unwrap(),
            plain.flatten_all().unwrap().to_vec1().unwrap(),
        );
        if a.iter().zip(&b).any(|(p, q)| p.to_bits() != q.to_bits()) {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    Verdict::new(
        mismatches == 0 && elapsed < Duration::from_secs(60),
        format!("{mismatches}/100 inputs differ, {:.1}s", elapsed.as_secs_f64()),
    )
}

/// Check 2: Analytic gradients against central differences in f64.
fn gradient_check() -> Verdict {
    let g = Generator::new(GeneratorConfig::toy(), 12, DType::F64, &Device::Cpu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // Random colour blocks: each conv channel takes only a few distinct
    // pre-activation values (block interiors, edges, corners), so a 1e-4 step
    // rarely moves one across a ReLU or max-pool kink, while the channel
    // variance batch norm divides by stays well away from zero.
    let blocks = 2;
    let colours: Vec<f64> = (0..3 * blocks * blocks).map(|_| rng.random_range(-0.9..0.9)).collect();
    let side = 64 / blocks;
    let pixels: Vec<f64> = (0..3 * 64 * 64)
        .map(|k| {
            let (c, i, j) = (k / 4096, k / 64 % 64, k % 64);
            colours[(c * blocks + i / side) * blocks + j / side]
        })
        .collect();
    let x = Tensor::from_vec(pixels, (1, 3, 64, 64), &Device::Cpu).unwrap();
    let e = randn(&[1, EMBEDDING_DIM], DType::F64, &mut rng);
    let weights = randn(&[1, 3, 64, 64], DType::F64, &mut rng);
    let output = || g.forward(&x, &e, Mode::Train).unwrap();
    let grads = (output() * &weights).unwrap().sum_all().unwrap().backward().unwrap();
    // loss(a) - loss(b), with the outputs subtracted before the weighted sum
    // so that small differences are not lost to cancellation
    let loss_diff = |a: &Tensor, b: &Tensor| scalar(&((a - b).unwrap() * &weights).unwrap().sum_all().unwrap());

    // 7 encoder, 7 decoder and 6 gate-projection entries, every gate layer hit
    let names: Vec<String> = g.params().iter().map(|(k, _)| k.clone()).collect();
    let pick = |prefix: &str, rng: &mut ChaCha8Rng| -> String {
        let pool: Vec<&String> = names
            .iter()
            .filter(|n| n.starts_with(prefix) && n.ends_with("weight"))
            .collect();
        pool[rng.random_range(0..pool.len())].clone()
    };
    let mut chosen = Vec::new();
    for _ in 0..7 {
        chosen.push(pick("enc", &mut rng));
    }
    for _ in 0..7 {
        chosen.push(pick("dec", &mut rng));
    }
    for j in 0..4 {
        chosen.push(format!("gate{j}.weight"));
    }
    chosen.push(pick("gate", &mut rng));
    chosen.push(pick("gate", &mut rng));

    // A step that crosses a ReLU or max-pool kink makes the central difference
    // meaningless. Such entries are recognized from function values alone
    // (the one-sided differences disagree) and redrawn.
    let h = 1e-4;
    let y0 = output();
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    let mut redraws = 0;
    for name in &chosen {
        let var = g.params().get(name).unwrap();
        let original = var.as_tensor().copy().unwrap();
        let flat = values(&original);
        let analytic_all = values(grads.get(var.as_tensor()).unwrap());
        let eval_at = |i: usize, delta: f64| {
            let mut v = flat.clone();
            v[i] += delta;
            var.set(&Tensor::from_vec(v, original.shape(), &Device::Cpu).unwrap())
                .unwrap();
            output()
        };
        let mut probe = None;
        for _ in 0..100 {
            let i = rng.random_range(0..flat.len());
            let (up, down) = (eval_at(i, h), eval_at(i, -h));
            let (fwd, bwd) = (loss_diff(&up, &y0) / h, loss_diff(&y0, &down) / h);
            if (fwd - bwd).abs() <= 1e-3 * fwd.abs().max(bwd.abs()) {
                probe = Some((i, loss_diff(&up, &down) / (2.0 * h)));
                break;
            }
            redraws += 1;
        }
        var.set(&original).unwrap();
        let Some((i, numeric)) = probe else {
            failures += 1;
            println!("  {name}: no kink-free entry in 100 draws");
            continue;
        };
        let analytic = analytic_all[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max(rel);
        if rel > 1e-3 {
            failures += 1;
            println!("  {name}[{i}]: analytic {analytic:.6e} numeric {numeric:.6e}");
        }
    }
    Verdict::new(
        failures == 0,
        format!(
            "{} parameters, worst relative error {worst:.2e} ({redraws} entries redrawn for crossing a kink)",
            chosen.len()
        ),
    )
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn plain_l1(a: &Tensor, b: &Tensor) -> f64 {
    values(a).iter().zip(values(b)).map(|(x, y)| (x - y).abs()).sum()
}

/// Check 3: Closed-form loss values and an independent recomputation of the five
/// generator terms at step 0.
fn loss_oracles(w: &World) -> Verdict {
    let dev = Device::Cpu;
    let mut errs = Vec::new();
    let ones = Tensor::ones((1, 3, 64, 64), DType::F64, &dev).unwrap();
    let zeros = ones.zeros_like().unwrap();
    errs.push((scalar(&l1_loss(&ones, &zeros).unwrap()) - 12288.0).abs());
    let k = w.train.identity_count();
    let uniform = Tensor::zeros((1, k), DType::F64, &dev).unwrap();
    errs.push((scalar(&classifier_loss(&uniform, 2).unwrap()) - (k as f64).ln()).abs());
    let half = Tensor::zeros((1, 1), DType::F64, &dev).unwrap();
    errs.push((scalar(&discriminator_loss(&half, true).unwrap()) - 2f64.ln()).abs());
    errs.push((scalar(&discriminator_loss(&half, false).unwrap()) - 2f64.ln()).abs());
    let closed_form_ok = errs.iter().all(|e| *e <= 1e-9);

    let cfg = TrainConfig {
        precision: Precision::F64,
        seed: 3,
        plateau_window: 0,
        ..TrainConfig::default()
    };
    let inst = sample_instance(&w.train, &mut step_rng(cfg.seed, 0)).unwrap();
    let mut reference = Trainer::new(cfg.clone(), w.train.labels.clone(), w.embedder.clone()).unwrap();
    let report: StepReport = reference.train_step(&inst).unwrap();

    // A twin replays the critic updates, then the terms are recomputed from
    // raw values with plain arithmetic.
    let mut twin = Trainer::new(cfg.clone(), w.train.labels.clone(), w.embedder.clone()).unwrap();
    let ctx = twin.prepare(&inst).unwrap();
    twin.update_discriminator(&ctx).unwrap();
    twin.update_classifier(&ctx).unwrap();
    let critics = twin.critics();
    let cycle = twin.generator().forward(&ctx.fake, &ctx.e_a, Mode::Train).unwrap();
    let cls_logits = values(&critics.cls_logits(&ctx.fake).unwrap());
    let disc_logit = scalar(&critics.disc_logits(&ctx.fake).unwrap());
    let recomputed = [
        plain_l1(&ctx.fake, &ctx.x_a),
        plain_l1(&ctx.fake, &ctx.x_b),
        log_sum_exp(&cls_logits) - cls_logits[ctx.id_b],
        (-disc_logit).exp().ln_1p(),
        plain_l1(&cycle, &ctx.x_a),
    ];
    let reported = report.generator_terms();
    let lambdas = cfg.lambdas();
    let objective: f64 = recomputed.iter().zip(lambdas).map(|(t, l)| t * l).sum();
    let mut worst: f64 = 0.0;
    for (a, b) in reported
        .iter()
        .zip(recomputed)
        .chain(std::iter::once((&report.objective, objective)))
    {
        worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1.0));
    }
    Verdict::new(
        closed_form_ok && worst <= 1e-9,
        format!(
            "closed forms max error {:.1e}; step-0 terms vs recomputation max relative error {worst:.1e}",
            errs.iter().cloned().fold(0.0, f64::max)
        ),
    )
}

/// Check 4: Each sub-update changes only its own parameter group, and the voice
/// embedder never changes.
fn isolation(w: &World) -> Verdict {
    let cfg = TrainConfig {
        seed: 4,
        plateau_window: 0,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg.clone(), w.train.labels.clone(), w.embedder.clone()).unwrap();
    let embedder0 = t.digests().unwrap().embedder;
    let mut violations = Vec::new();
    for step in 0..100u64 {
        let inst = sample_instance(&w.train, &mut step_rng(cfg.seed, step)).unwrap();
        let ctx = t.prepare(&inst).unwrap();
        let before = t.digests().unwrap();
        t.update_discriminator(&ctx).unwrap();
        let after_d = t.digests().unwrap();
        t.update_classifier(&ctx).unwrap();
        let after_c = t.digests().unwrap();
        t.update_generator(&ctx).unwrap();
        let after_g = t.digests().unwrap();
        let checks = [
            ("D changed generator", after_d.generator != before.generator),
            ("D changed classifier head", after_d.cls_head != before.cls_head),
            (
                "D left discriminator unchanged",
                after_d.discriminator == before.discriminator,
            ),
            ("C changed generator", after_c.generator != after_d.generator),
            ("C changed discriminator head", after_c.disc_head != after_d.disc_head),
            ("C left classifier unchanged", after_c.classifier == after_d.classifier),
            (
                "G changed discriminator",
                after_g.discriminator != after_c.discriminator,
            ),
            ("G changed classifier", after_g.classifier != after_c.classifier),
            ("G left generator unchanged", after_g.generator == after_c.generator),
            ("embedder changed", after_g.embedder != embedder0),
        ];
        for (what, bad) in checks {
            if bad {
                violations.push(format!("step {step}: {what}"));
            }
        }
    }
    let detail = if violations.is_empty() {
        "100 steps, all parameter hashes as expected".to_string()
    } else {
        format!("{} violations, first: {}", violations.len(), violations[0])
    };
    Verdict::new(violations.is_empty(), detail)
}

/// Check 5: Toy-corpus learning at the default settings.
fn toy_learning(w: &World) -> (Verdict, Trainer) {
    let cfg = TrainConfig {
        max_steps: 2000,
        seed: 5,
        plateau_window: 0,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let mut t = Trainer::new(cfg, w.train.labels.clone(), w.embedder.clone()).unwrap();
    let reports = t
        .run(&w.train, 2000, |_, r| {
            if (r.step + 1) % 250 == 0 {
                println!("  step {:>4}: objective {:.1}", r.step + 1, r.objective);
            }
            Ok(())
        })
        .unwrap();
    let elapsed = start.elapsed() + w.pretrain_time;
    let mean = |rs: &[StepReport]| rs.iter().map(|r| r.objective).sum::<f64>() / rs.len() as f64;
    let first = mean(&reports[..50]);
    let last = mean(&reports[reports.len() - 200..]);
    let ratio = last / first;
    let verdict = Verdict::new(
        reports.len() == 2000 && ratio < 0.2 && elapsed < Duration::from_secs(15 * 60),
        format!(
            "first-50 mean {first:.1}, last-200 mean {last:.1}, ratio {ratio:.3} (need < 0.2); \
             pre-training + training {:.0}s (need < 900s)",
            elapsed.as_secs_f64()
        ),
    );
    (verdict, t)
}

/// Checks 6 and 7 on the eval split, plus the random-matrix monotonicity check.
fn similarity_and_retrieval(w: &World, t: &Trainer) -> (Verdict, Verdict) {
    let models = TrainedModels::from_trainer(t);
    let report = evaluate(&w.eval, &models, 1, 6).unwrap();
    let s = &report.similarity;
    let sim = Verdict::new(
        s.cos_g_a >= s.cos_random + 0.05 && s.cos_g_b >= s.cos_random + 0.05,
        format!(
            "cos(g,A) {:.3}, cos(g,B) {:.3}, random pairs {:.3} (need both >= {:.3}) over {} triples",
            s.cos_g_a,
            s.cos_g_b,
            s.cos_random,
            s.cos_random + 0.05,
            s.triples
        ),
    );

    let r = &report.retrieval_b;
    let n = r.queries as f64;
    let threshold = 0.25 + 2.0 * (0.25f64 * 0.75 / n).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut monotone_violations = 0;
    for _ in 0..1000 {
        let k_ids = rng.random_range(2..12usize);
        let rows = rng.random_range(1..40usize);
        let scores: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..k_ids).map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..k_ids)).collect();
        let rates: Vec<f64> = (1..=k_ids)
            .map(|k| {
                retrieval_from_scores(&scores, &targets, k, RetrievalTarget::B)
                    .unwrap()
                    .success_rate
            })
            .collect();
        if rates.windows(2).any(|p| p[1] < p[0]) || (rates[k_ids - 1] - 1.0).abs() > 0.0 {
            monotone_violations += 1;
        }
    }
    let ret = Verdict::new(
        r.success_rate > threshold && monotone_violations == 0,
        format!(
            "top-1 identity-B success {:.3} over {} queries (need > {threshold:.3}); \
             {monotone_violations}/1000 random score matrices non-monotone in k",
            r.success_rate, r.queries
        ),
    );
    (sim, ret)
}

/// Check 8: Fixed seeds reproduce loss curves; resuming from a checkpoint gives the
/// same losses as an uninterrupted run.
fn determinism(w: &World) -> Verdict {
    let cfg = TrainConfig {
        seed: 8,
        plateau_window: 0,
        ..TrainConfig::default()
    };
    let steps = 24;
    let run = |until: u64| {
        let mut t = Trainer::new(cfg.clone(), w.train.labels.clone(), w.embedder.clone()).unwrap();
        let r = t.run(&w.train, until, |_, _| Ok(())).unwrap();
        (t, r)
    };
    let (_, a) = run(steps);
    let (_, b) = run(steps);
    let same_curve = a == b;

    let (half, first_half) = run(steps / 2);
    let bytes = half.to_checkpoint().unwrap().to_bytes().unwrap();
    drop(half);
    let restored = cae::checkpoint::Checkpoint::from_bytes(&bytes).unwrap();
    let mut resumed = Trainer::from_checkpoint(&restored).unwrap();
    let second_half = resumed.run(&w.train, steps, |_, _| Ok(())).unwrap();
    let joined: Vec<StepReport> = first_half.into_iter().chain(second_half).collect();
    let resume_ok = joined == a;

    let (p1, _) = pretrain_embedder(
        &w.train.labeled_voices(),
        &PretrainConfig {
            epochs: 2,
            ..Default::default()
        },
        DType::F32,
        &Device::Cpu,
    )
    .unwrap();
    let (p2, _) = pretrain_embedder(
        &w.train.labeled_voices(),
        &PretrainConfig {
            epochs: 2,
            ..Default::default()
        },
        DType::F32,
        &Device::Cpu,
    )
    .unwrap();
    let pretrain_ok = p1.digest().unwrap() == p2.digest().unwrap();

    Verdict::new(
        same_curve && resume_ok && pretrain_ok,
        format!(
            "repeat run identical: {same_curve}; resume at step {} identical: {resume_ok}; \
             embedder pre-training repeatable: {pretrain_ok}",
            steps / 2
        ),
    )
}

/// Check 9: Shape chains for randomized sizes.
fn shape_suite() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut problems = Vec::new();

    for &width in &[0.0625, 0.125, 0.25] {
        let g = Generator::new(GeneratorConfig { width }, rng.random(), DType::F32, &Device::Cpu).unwrap();
        let c = GeneratorConfig { width }.channels();
        let x = uniform_face(&mut rng, DType::F32);
        let s = g.encode(&x, Mode::Eval).unwrap();
        if s.spatial_sizes() != [64, 32, 16, 8, 4] {
            problems.push(format!("encoder chain {:?} at width {width}", s.spatial_sizes()));
        }
        let e = randn(&[1, EMBEDDING_DIM], DType::F32, &mut rng);
        let gates = g.compute_gates(&e).unwrap();
        let expected: Vec<Vec<usize>> = vec![
            vec![c[3], c[2], 3, 3],
            vec![c[2], c[1], 3, 3],
            vec![c[1], c[0], 3, 3],
            vec![c[0], c[0], 3, 3],
        ];
        let got: Vec<Vec<usize>> = gates.layers().iter().map(|t| t.dims().to_vec()).collect();
        if got != expected {
            problems.push(format!("gate shapes {got:?} at width {width}"));
        }
        let y = g.decode(&s, Some(&gates), Mode::Eval).unwrap();
        if y.dims() != [1, 3, 64, 64] {
            problems.push(format!("decoder output {:?}", y.dims()));
        }
    }

    let critics = Critics::new(rng.random_range(2..10), rng.random(), DType::F32, &Device::Cpu).unwrap();
    for _ in 0..3 {
        let (feat, shapes) = critics.trunk_traced(&uniform_face(&mut rng, DType::F32)).unwrap();
        let want = vec![
            vec![1, 32, 64, 64],
            vec![1, 64, 32, 32],
            vec![1, 128, 16, 16],
            vec![1, 256, 8, 8],
            vec![1, 512, 4, 4],
            vec![1, 64, 1, 1],
        ];
        if shapes != want || feat.dims() != [1, 64] {
            problems.push(format!("critic trunk chain {shapes:?}"));
        }
    }

    // closed form: t_i = ceil(t0 / 2^i)
    for _ in 0..1000 {
        let t0 = rng.random_range(1..5000usize);
        let got = temporal_lengths(t0);
        let want: [usize; 6] = std::array::from_fn(|i| t0.div_ceil(1 << i));
        if got != want {
            problems.push(format!("t0 = {t0}: {got:?} vs {want:?}"));
        }
    }
    let embedder = VoiceEmbedder::new(rng.random(), DType::F32, &Device::Cpu).unwrap();
    for _ in 0..12 {
        let t0 = rng.random_range(1..400usize);
        let m = MelSpectrogram::from_values(vec![0.5; MEL_BANDS * t0], MEL_BANDS, t0).unwrap();
        let x = m.to_tensor(DType::F32, &Device::Cpu).unwrap().unsqueeze(0).unwrap();
        let (out, shapes) = embedder.forward_traced(&x, Mode::Eval).unwrap();
        let lens: Vec<usize> = shapes.iter().map(|s| s[2]).collect();
        let channels: Vec<usize> = shapes.iter().map(|s| s[1]).collect();
        if lens != temporal_lengths(t0) || channels != [64, 256, 384, 576, 864, 64] || out.dims() != [1, 64] {
            problems.push(format!("embedder chain for t0 = {t0}: {lens:?} {channels:?}"));
        }
    }
    let detail = if problems.is_empty() {
        "generator at 3 widths, critic trunk, 1000 closed-form and 12 traced embedder chains".to_string()
    } else {
        format!("{} problems, first: {}", problems.len(), problems[0])
    };
    Verdict::new(problems.is_empty(), detail)
}

fn main() -> ExitCode {
    // `cargo test --test acceptance -- 2 9` runs a subset
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: u32| only.is_empty() || only.contains(&n);
    let mut verdicts: Vec<(&str, Verdict)> = Vec::new();
    let report = |name: &'static str, v: Verdict, all: &mut Vec<(&str, Verdict)>| {
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        all.push((name, v));
    };
    if want(1) {
        report("1 gate identity", gate_identity(), &mut verdicts);
    }
    if want(2) {
        report("2 gradient check", gradient_check(), &mut verdicts);
    }
    if (3..=8).any(want) {
        let w = world();
        if want(3) {
            report("3 loss oracles", loss_oracles(&w), &mut verdicts);
        }
        if want(4) {
            report("4 update isolation", isolation(&w), &mut verdicts);
        }
        if (5..=7).any(want) {
            let (v5, trained) = toy_learning(&w);
            report("5 toy-corpus learning", v5, &mut verdicts);
            let (v6, v7) = similarity_and_retrieval(&w, &trained);
            report("6 similarity ordering", v6, &mut verdicts);
            report("7 retrieval sanity", v7, &mut verdicts);
        }
        if want(8) {
            report("8 determinism and resume", determinism(&w), &mut verdicts);
        }
    }
    if want(9) {
        report("9 shape suite", shape_suite(), &mut verdicts);
    }

    println!();
    for (name, v) in &verdicts {
        println!("{} {name}", if v.pass { "PASS" } else { "FAIL" });
    }
    let failed = verdicts.iter().filter(|(_, v)| !v.pass).count();
    println!("{} of {} checks passed", verdicts.len() - failed, verdicts.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
