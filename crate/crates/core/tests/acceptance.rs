//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers to run a subset,
//! e.g. `cargo test --test acceptance -- 1 2 5`.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use irstd_diff::commands::cmd_analyze;
use irstd_diff::config::TrainConfig;
use irstd_diff::data::{synth_dataset, Sample, SynthSpec};
use irstd_diff::diffusion::{build_linear_schedule, predict_x0_from_eps, q_sample, strided_timesteps, NoiseSchedule};
use irstd_diff::infer::{average_members, member_logits, score, InferOptions};
use irstd_diff::losses::insensitivity_report;
use irstd_diff::metrics::{dataset_iou, false_alarm_from_matches, match_targets, prob_detection, BinaryMask, EvalReport};
use irstd_diff::model::{IrstdDiff, ModelConfig};
use irstd_diff::trainer::{step_records, StepRecord, Trainer};
use irstd_diff::wavelet::{decompose, reconstruct};
use irstd_nn::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fmt_report(r: &EvalReport) -> String {
    format!("IoU {:.4} Pd {:.4} Fa {:.3e}", r.iou, r.pd, r.fa)
}

fn same_bits(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn c1_insensitivity() -> Check {
    let r = insensitivity_report(256, 8, 100, 9, 0.99).map_err(|e| e.to_string())?;
    let table = cmd_analyze(256, 8, 100, 9, 0.99, None).map_err(|e| e.to_string())?;
    let detail = format!(
        "miss IoU {:.6}, FP IoU {:.6}, FP BCE {:.3e}",
        r.iou_miss, r.iou_fp, r.bce_fp
    );
    ensure(
        r.iou_miss == 0.125
            && (r.iou_fp - 0.0103).abs() <= 2e-4
            && (r.bce_fp - 8e-5).abs() <= 1e-5
            && table.contains("0.125000"),
        detail,
    )
}

fn c2_wavelet() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_abs, mut worst_rel) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let x = Tensor::<f64>::randn([64, 64], &mut rng);
        let e = x.sum_sq();
        for levels in 1..=3 {
            let pyr = decompose(&x, levels).map_err(|e| e.to_string())?;
            let back = reconstruct(&pyr).map_err(|e| e.to_string())?;
            worst_abs = worst_abs.max(back.max_abs_diff(&x));
            worst_rel = worst_rel.max((pyr.energy() - e).abs() / e);
        }
    }
    ensure(
        worst_abs <= 1e-6 && worst_rel <= 1e-6,
        format!("reconstruction {worst_abs:.2e}, energy {worst_rel:.2e}"),
    )
}

fn diffusion_checks(sched: &NoiseSchedule, label: &str) -> Check {
    let t_max = sched.steps;
    let mut identity = 0.0f64;
    for t in 2..=t_max {
        let lhs = sched.posterior_beta(t) * (1.0 - sched.alpha_bar(t));
        let rhs = (1.0 - sched.alpha_bar(t - 1)) * sched.beta(t);
        identity = identity.max((lhs - rhs).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = Tensor::<f64>::randn([8, 8], &mut rng);
    let mut round = 0.0f64;
    for t in 1..=t_max {
        let eps = Tensor::<f64>::randn([8, 8], &mut rng);
        let xt = q_sample(&x0, t, &eps, sched).map_err(|e| e.to_string())?;
        let back = predict_x0_from_eps(&xt, t, &eps, sched).map_err(|e| e.to_string())?;
        round = round.max(back.max_abs_diff(&x0));
    }
    // Moments of x_t for a fixed x_0 = 0.5 over 10^4 draws.
    let n = 10_000;
    let t = t_max / 2;
    let x0 = Tensor::<f64>::from_vec([n], vec![0.5; n]);
    let eps = Tensor::<f64>::randn([n], &mut rng);
    let xt = q_sample(&x0, t, &eps, sched).map_err(|e| e.to_string())?;
    let d = xt.data();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let (want_mean, want_var) = (sched.alpha_bar(t).sqrt() * 0.5, 1.0 - sched.alpha_bar(t));
    let mean_z = (mean - want_mean).abs() / (want_var / n as f64).sqrt();
    let var_z = (var - want_var).abs() / (want_var * (2.0 / (n - 1) as f64).sqrt());
    ensure(
        identity <= 1e-12 && round <= 1e-5 && mean_z <= 3.0 && var_z <= 3.0,
        format!("{label}: identity {identity:.1e}, round trip {round:.1e}, mean {mean_z:.2} SE, var {var_z:.2} SE"),
    )
}

fn c3_diffusion(toy: &TrainConfig) -> Check {
    let standard = build_linear_schedule(100, 1e-4, 0.02).map_err(|e| e.to_string())?;
    let a = diffusion_checks(&standard, "standard")?;
    let b = diffusion_checks(&toy.schedule().map_err(|e| e.to_string())?, "toy")?;
    Ok(format!("{a}; {b}"))
}

fn c4_gradients() -> Check {
    let mut errs = vec![
        ("haar", common::haar_grad_error()),
        ("liw", common::liw_grad_error()),
        ("denoiser", common::denoiser_grad_error()),
    ];
    errs.extend(common::loss_grad_errors());
    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    ensure(worst <= 1e-4, detail)
}

fn c5_metrics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..20 {
        let (preds, gts) = common::random_instance(&mut rng);
        let (iou, pd, fa) = common::naive_metrics(&preds, &gts);
        let matches: Vec<_> = preds
            .iter()
            .zip(&gts)
            .map(|(p, g)| match_targets(p, g))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let got = (
            dataset_iou(&preds, &gts).map_err(|e| e.to_string())?,
            prob_detection(&matches).map_err(|e| e.to_string())?,
            false_alarm_from_matches(&matches).map_err(|e| e.to_string())?,
        );
        if got != (iou, pd, fa) {
            return Err(format!("case {case}: got {got:?}, reference {:?}", (iou, pd, fa)));
        }
    }
    let point = |r: usize, c: usize| {
        let mut m = BinaryMask::empty(32, 32);
        m.data[r * 32 + c] = true;
        m
    };
    let gt = point(10, 10);
    let near = match_targets(&point(12, 12), &gt).map_err(|e| e.to_string())?;
    let far = match_targets(&point(10, 14), &gt).map_err(|e| e.to_string())?;
    ensure(
        near.true_positives == 1 && far.true_positives == 0,
        "20 random instances exact; (12,12) matched, (10,14) not".into(),
    )
}

fn c9_liw_identity() -> Check {
    let model = IrstdDiff::new(ModelConfig::scaled(64, 4).map_err(|e| e.to_string())?, 9).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Var::constant(Tensor::<f32>::uniform([2, 3, 64, 64], 1.0, &mut rng));
    let p = model.params.bind_const();
    let on = model.ce.forward(&p, &x, true).map_err(|e| e.to_string())?;
    let off = model.ce.forward(&p, &x, false).map_err(|e| e.to_string())?;
    let equal = same_bits(on.prob.value().data(), off.prob.value().data())
        && same_bits(on.latent.value().data(), off.latent.value().data())
        && same_bits(on.enhanced.value().data(), off.enhanced.value().data());
    ensure(equal, "P, latent and enhanced features bit-identical".into())
}

/// The seed-pinned toy configuration shared by criteria 6, 7, 8 and 10.
fn toy_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.steps = TOY_STEPS;
    cfg.lr = TOY_LR;
    cfg.beta_end = Some(TOY_BETA_END);
    cfg.scale_factor = 4;
    cfg.eval_every = 0;
    cfg
}

// With T = 100 the standard ramp ends at ᾱ_T ≈ 0.36, far from the pure
// noise the sampler starts from; ending at 0.05 brings ᾱ_T to ≈ 0.08.
const TOY_STEPS: u64 = 1200;
const TOY_LR: f64 = 5e-4;
const TOY_BETA_END: f64 = 0.05;
const STRIDED_KEEP: usize = 60;
const SAMPLE_SEED: u64 = 0;

struct Toy {
    train: Vec<Sample>,
    test: Vec<Sample>,
    trainer: Trainer,
    steps: Vec<StepRecord>,
    full: EvalReport,
}

fn train_toy(cfg: &TrainConfig) -> Result<Toy, String> {
    let (train, _) = synth_dataset(&SynthSpec::toy(200, 7)).map_err(|e| e.to_string())?;
    let (test, _) = synth_dataset(&SynthSpec::toy(50, 8)).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(cfg.clone()).map_err(|e| e.to_string())?;
    let records = trainer.run(&train, &test, None, u64::MAX, |_| {}).map_err(|e| e.to_string())?;
    let preds = irstd_diff::infer::predict(&trainer.model, &trainer.sched, &test, &InferOptions::new(SAMPLE_SEED))
        .map_err(|e| e.to_string())?;
    let full = score(&preds, &test).map_err(|e| e.to_string())?;
    Ok(Toy {
        train,
        test,
        trainer,
        steps: step_records(&records),
        full,
    })
}

fn c6_toy(toy: &Result<Toy, String>) -> Check {
    let toy = toy.as_ref().map_err(|e| e.clone())?;
    let r = &toy.full;
    ensure(
        r.iou >= 0.5 && r.pd >= 0.9 && r.fa <= 1e-3,
        format!("{} steps, T = 100: {}", toy.steps.len(), fmt_report(r)),
    )
}

fn strided_members(toy: &Toy, seed: u64, n: usize) -> Result<Vec<Vec<Tensor<f32>>>, String> {
    let mut opts = InferOptions::new(seed);
    opts.timesteps = Some(strided_timesteps(100, STRIDED_KEEP).map_err(|e| e.to_string())?);
    opts.ensemble = n;
    member_logits(&toy.trainer.model, &toy.trainer.sched, &toy.test, &opts).map_err(|e| e.to_string())
}

fn c7_stride(toy: &Result<Toy, String>, members: &mut Vec<Vec<Tensor<f32>>>) -> Check {
    let toy = toy.as_ref().map_err(|e| e.clone())?;
    *members = strided_members(toy, SAMPLE_SEED, 1)?;
    let preds = average_members(members, &toy.test, 1).map_err(|e| e.to_string())?;
    let r = score(&preds, &toy.test).map_err(|e| e.to_string())?;
    let (d_iou, d_pd) = ((r.iou - toy.full.iou).abs(), (r.pd - toy.full.pd).abs());
    ensure(
        d_iou <= 0.05 && d_pd <= 0.02,
        format!(
            "{STRIDED_KEEP} of 100: {}; ΔIoU {:.2} pts, ΔPd {:.2} pts",
            fmt_report(&r),
            100.0 * d_iou,
            100.0 * d_pd
        ),
    )
}

fn c8_ensemble(toy: &Result<Toy, String>, members: &mut Vec<Vec<Tensor<f32>>>) -> Check {
    let toy = toy.as_ref().map_err(|e| e.clone())?;
    if members.is_empty() {
        *members = strided_members(toy, SAMPLE_SEED, 1)?;
    }
    // Member j uses seed + j, so members 1..5 extend the single-run chain.
    members.extend(strided_members(toy, SAMPLE_SEED + 1, 4)?);
    let mut ious = Vec::new();
    for n in [1, 3, 5] {
        let preds = average_members(members, &toy.test, n).map_err(|e| e.to_string())?;
        ious.push(score(&preds, &toy.test).map_err(|e| e.to_string())?.iou);
    }
    let spread = ious.iter().copied().fold(f64::MIN, f64::max) - ious.iter().copied().fold(f64::MAX, f64::min);
    ensure(
        spread <= 0.02,
        format!(
            "IoU n=1 {:.4}, n=3 {:.4}, n=5 {:.4}; spread {:.2} pts",
            ious[0],
            ious[1],
            ious[2],
            100.0 * spread
        ),
    )
}

fn c10_determinism(cfg: &TrainConfig, toy: &Result<Toy, String>) -> Check {
    let toy = toy.as_ref().map_err(|e| e.clone())?;
    let mut a = Trainer::new(cfg.clone()).map_err(|e| e.to_string())?;
    let records = a.run(&toy.train, &toy.test, None, 200, |_| {}).map_err(|e| e.to_string())?;
    let again = step_records(&records);
    let reference: Vec<&StepRecord> = toy.steps.iter().filter(|s| s.step <= 200).collect();
    let bits = |s: &StepRecord| [s.loss, s.noise_mse, s.bce_loss, s.iou_loss, s.grad_norm].map(f64::to_bits);
    let losses_equal = again.len() == reference.len() && again.iter().zip(&reference).all(|(x, y)| bits(x) == bits(y));
    if !losses_equal {
        return Err(format!("{} logged steps differ from the first run", again.len()));
    }
    let mut opts = InferOptions::new(11);
    opts.timesteps = Some(strided_timesteps(100, 10).map_err(|e| e.to_string())?);
    let subset = &toy.test[..8];
    let run = || irstd_diff::infer::predict(&a.model, &a.sched, subset, &opts).map_err(|e| e.to_string());
    let (p, q) = (run()?, run()?);
    let masks_equal = p
        .iter()
        .zip(&q)
        .all(|(x, y)| x.mask == y.mask && same_bits(x.logits.data(), y.logits.data()));
    ensure(
        masks_equal,
        format!("{} logged steps and {} sampled masks bit-identical", again.len(), p.len()),
    )
}

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
}

fn report(c: &Criterion, result: Check, elapsed: Duration) -> bool {
    let over = elapsed > c.budget;
    let (ok, detail) = match result {
        Ok(d) if !over => (true, d),
        Ok(d) => (false, format!("{d}; over the {:?} budget", c.budget)),
        Err(d) => (false, d),
    };
    println!(
        "{} {:>2} {:<22} {:>8.1}s  {detail}",
        if ok { "PASS" } else { "FAIL" },
        c.id,
        c.name,
        elapsed.as_secs_f64()
    );
    ok
}

fn timed(f: impl FnOnce() -> Check) -> (Check, Duration) {
    let t0 = Instant::now();
    let r = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    (r, t0.elapsed())
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wants = |id: usize| selected.is_empty() || selected.contains(&id);
    let mins = |m: u64| Duration::from_secs(60 * m);
    let criteria = [
        Criterion { id: 1, name: "insensitivity", budget: Duration::from_secs(1) },
        Criterion { id: 2, name: "wavelet exactness", budget: Duration::from_secs(5) },
        Criterion { id: 3, name: "diffusion algebra", budget: Duration::from_secs(10) },
        Criterion { id: 4, name: "gradient checks", budget: mins(2) },
        Criterion { id: 5, name: "metrics oracle", budget: Duration::from_secs(5) },
        Criterion { id: 6, name: "toy end-to-end", budget: mins(30) },
        Criterion { id: 7, name: "stride robustness", budget: mins(5) },
        Criterion { id: 8, name: "ensemble neutrality", budget: mins(10) },
        Criterion { id: 9, name: "LIW identity at init", budget: Duration::from_secs(1) },
        Criterion { id: 10, name: "determinism", budget: mins(5) },
    ];
    let cfg = toy_config();
    let mut all = true;
    let mut toy: Option<Result<Toy, String>> = None;
    let mut toy_secs = Duration::ZERO;
    let mut members = Vec::new();
    for c in &criteria {
        if !wants(c.id) {
            continue;
        }
        // Criteria 7, 8 and 10 reuse the trained toy model.
        if matches!(c.id, 6 | 7 | 8 | 10) && toy.is_none() {
            let t0 = Instant::now();
            toy = Some(
                panic::catch_unwind(AssertUnwindSafe(|| train_toy(&cfg)))
                    .unwrap_or_else(|_| Err("toy training panicked".into())),
            );
            toy_secs = t0.elapsed();
        }
        let (result, elapsed) = match c.id {
            1 => timed(c1_insensitivity),
            2 => timed(c2_wavelet),
            3 => timed(|| c3_diffusion(&cfg)),
            4 => timed(c4_gradients),
            5 => timed(c5_metrics),
            6 => {
                let (r, e) = timed(|| c6_toy(toy.as_ref().unwrap()));
                (r, e + toy_secs)
            }
            7 => timed(|| c7_stride(toy.as_ref().unwrap(), &mut members)),
            8 => timed(|| c8_ensemble(toy.as_ref().unwrap(), &mut members)),
            9 => timed(c9_liw_identity),
            10 => timed(|| c10_determinism(&cfg, toy.as_ref().unwrap())),
            _ => unreachable!(),
        };
        all &= report(c, result, elapsed);
    }
    if !all {
        std::process::exit(1);
    }
}
