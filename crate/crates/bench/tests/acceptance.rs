//! End-to-end acceptance run: property checks on the core, then the full
//! reference pipeline twice in scratch directories.
//!
//! Prints one `PASS`/`FAIL` line per criterion and exits non-zero if any
//! line failed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use gda_bench::config::RunConfig;
use gda_bench::pipeline::{self, Loaded, SeverityRow, SweepRow, TrainMetrics, Variant};
use gda_bench::report::{from_csv, SampleRow};
use gda_bench::store::{read_bytes, RunDir};
use gda_bench::Method;
use gda_core::autograd::entropy;
use gda_core::guidance::{
    composite_guidance, marginal_entropy, AugmentationChain, GuidanceConfig, GuidanceDraws, LossWeights, Preset,
};
use gda_core::nets::{
    Classifier, ClassifierArch, Denoiser, DenoiserArch, EmbeddingEncoder, EncoderArch, FeatureTap, NetsBundle,
};
use gda_core::rng::{sample_standard_normal, stream, Purpose};
use gda_core::sampler::{ddim_step, predict_x0, NoisePredictor};
use gda_core::schedule::{forward_diffuse, NoiseSchedule};
use gda_core::{Real, SampleTensor, Tensor};

type Outcome = Result<String, String>;

struct Report {
    lines: Vec<(String, Outcome)>,
}

impl Report {
    fn record(&mut self, name: &str, outcome: Outcome) {
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("{tag} {name}: {detail}");
        self.lines.push((name.to_string(), outcome));
    }

    fn failures(&self) -> usize {
        self.lines.iter().filter(|(_, o)| o.is_err()).count()
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn reference_schedule() -> NoiseSchedule {
    reference_config().schedule().expect("reference schedule")
}

fn reference_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/reference.toml");
    RunConfig::load(&path).expect("reference config")
}

fn noise(seed: u64, purpose: Purpose) -> SampleTensor {
    sample_standard_normal(&[1, 16, 16], &mut stream(seed, 0, purpose)).expect("noise")
}

fn clean_like(seed: u64) -> SampleTensor {
    noise(seed, Purpose::Data).scale(0.5).clamp(-1.0, 1.0)
}

fn exact_inversion() -> Outcome {
    let sched = reference_schedule();
    let mut worst = 0f32;
    for i in 0..100 {
        let x0 = clean_like(1000 + i);
        let eps = noise(2000 + i, Purpose::ForwardNoise);
        for t in 1..=sched.total_steps() {
            let xt = forward_diffuse(&x0, t, &eps, &sched).map_err(|e| e.to_string())?;
            let back = predict_x0(&xt, t, &eps, &sched).map_err(|e| e.to_string())?;
            worst = worst.max(back.max_abs_diff(&x0));
        }
    }
    check(worst <= 1e-5, format!("max |x0 - x0_hat| = {worst:.2e} over 100 samples, t = 1..=50"))
}

fn forward_marginals() -> Outcome {
    const N: usize = 100_000;
    let sched = reference_schedule();
    let x0 = clean_like(31);
    let mut worst = 0f64;
    for t in [1, 25, 50] {
        let ab = sched.alpha_bar(t);
        let mut sum = vec![0f64; x0.len()];
        let mut sq = vec![0f64; x0.len()];
        let mut rng = stream(32, t as u64, Purpose::ForwardNoise);
        for _ in 0..N {
            let eps = sample_standard_normal(x0.shape(), &mut rng).map_err(|e| e.to_string())?;
            let xt = forward_diffuse(&x0, t, &eps, &sched).map_err(|e| e.to_string())?;
            for (j, &v) in xt.data().iter().enumerate() {
                sum[j] += v as f64;
                sq[j] += (v as f64).powi(2);
            }
        }
        let var_true = 1.0 - ab;
        let n = N as f64;
        let mean_sd = (var_true / n).sqrt();
        let var_sd = var_true * (2.0 / (n - 1.0)).sqrt();
        for (j, &x) in x0.data().iter().enumerate() {
            let mean = sum[j] / n;
            let var = (sq[j] - n * mean * mean) / (n - 1.0);
            let zm = (mean - ab.sqrt() * x as f64).abs() / mean_sd;
            let zv = (var - var_true).abs() / var_sd;
            worst = worst.max(zm).max(zv);
        }
    }
    check(worst <= 4.0, format!("largest deviation {worst:.2} sigma over 256 pixels at t = 1, 25, 50"))
}

fn random_bundle<T: Real>() -> NetsBundle<T> {
    let nets: NetsBundle<f64> = NetsBundle {
        denoiser: Denoiser::new(DenoiserArch::default(), &mut stream(41, 0, Purpose::Init)),
        classifier: Classifier::new(ClassifierArch::default(), &mut stream(42, 0, Purpose::Init)),
        encoder: EmbeddingEncoder::new(EncoderArch::default(), &mut stream(43, 0, Purpose::Init)),
        tap: FeatureTap::DenoiserEncoder2,
    };
    nets.cast()
}

/// Analytic input gradient vs central differences of step `h` over 64
/// random coordinates. Returns the max abs error over the largest sampled
/// gradient component, and the worst per-coordinate relative error (floored
/// at 1e-3 of the largest gradient component). In f32 the second is
/// dominated by rounding in the loss, roughly eps * |loss| / h.
fn fd_error<T: Real>(
    trained: &NetsBundle<f64>,
    prototype: &[f32],
    weights: LossWeights,
    h: f64,
    seed: u64,
) -> Result<(f64, f64), String> {
    let mut cfg = GuidanceConfig::new(weights, prototype.to_vec());
    cfg.aug_count = 4;
    let nets: NetsBundle<T> = trained.cast();
    let draws = GuidanceDraws::draw(
        &cfg,
        (16, 16),
        &mut stream(seed, 0, Purpose::Augment),
        &mut stream(seed, 0, Purpose::Negatives),
    )
    .map_err(|e| e.to_string())?;
    let x: Tensor<T> = clean_like(seed).cast();
    let xr: Tensor<T> = clean_like(seed + 1).cast();
    let eval = |x: &Tensor<T>| composite_guidance(&nets, &cfg, x, &xr, &draws).map_err(|e| e.to_string());
    let (_, grad) = eval(&x)?;
    let floor = 1e-3 * grad.max_abs().as_f64();
    let mut rng = stream(seed, 1, Purpose::Calibration);
    let mut worst = 0f64;
    let (mut err, mut scale) = (0f64, 0f64);
    for _ in 0..64 {
        let i = rand::Rng::random_range(&mut rng, 0..x.len());
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[i] = xp.data()[i] + T::lit(h);
        xm.data_mut()[i] = xm.data()[i] - T::lit(h);
        let step = xp.data()[i].as_f64() - xm.data()[i].as_f64();
        let fd = (eval(&xp)?.0 - eval(&xm)?.0) / step;
        let a = grad.data()[i].as_f64();
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(floor));
        err = err.max((a - fd).abs());
        scale = scale.max(a.abs());
    }
    Ok((err / scale, worst))
}

/// Run on the trained reference nets: at random init the classifier is
/// near uniform and the marginal term is too flat to difference in f32.
fn gradient_fidelity(loaded: &Loaded) -> Outcome {
    let trained: NetsBundle<f64> = loaded.nets.cast();
    let terms = [
        ("marginal", LossWeights { marginal: 1.0, style: 0.0, content: 0.0 }),
        ("style", LossWeights { marginal: 0.0, style: 1.0, content: 0.0 }),
        ("content", LossWeights { marginal: 0.0, style: 0.0, content: 1.0 }),
        ("weighted", Preset::Corruption.weights()),
    ];
    let mut detail = Vec::new();
    let mut ok = true;
    for (k, (name, w)) in terms.into_iter().enumerate() {
        let (e32, c32) = fd_error::<f32>(&trained, &loaded.prototype, w, 1e-3, 60 + k as u64)?;
        let (e64, c64) = fd_error::<f64>(&trained, &loaded.prototype, w, 1e-5, 60 + k as u64)?;
        ok &= e32 <= 1e-2 && e64 <= 1e-4;
        detail.push(format!("{name} f32 {e32:.1e} (per coord {c32:.1e}) f64 {e64:.1e} (per coord {c64:.1e})"));
    }
    check(ok, detail.join(", "))
}

fn entropy_identities(rows: &[SampleRow]) -> Outcome {
    let ln4 = 4f64.ln();
    let uniform = entropy(&[0.25f64; 4]);
    let one_hot = entropy(&[0.0f64, 1.0, 0.0, 0.0]);
    let nets = random_bundle::<f64>();
    let x: Tensor<f64> = clean_like(70).cast();
    let chain = AugmentationChain::random(16, 16, &mut stream(71, 0, Purpose::Augment));
    let marginal = marginal_entropy(&nets.classifier, &x, &vec![chain.clone(); 6]).map_err(|e| e.to_string())?;
    let single = entropy(
        nets.classifier
            .probabilities(&chain.apply(&x).unsqueeze0())
            .map_err(|e| e.to_string())?
            .data(),
    );
    let in_range = |h: f64| (0.0..=ln4).contains(&h);
    let bad = rows
        .iter()
        .flat_map(|r| [r.entropy_original, r.entropy_adapted, r.entropy_chosen])
        .filter(|&h| !in_range(h))
        .count();
    check(
        uniform == ln4 && one_hot == 0.0 && marginal == single && in_range(marginal) && bad == 0,
        format!(
            "uniform {uniform}, one-hot {one_hot}, identical chains {marginal} vs {single}, {bad} of {} run entropies outside [0, ln 4]",
            3 * rows.len()
        ),
    )
}

struct Oracle<'a> {
    x0: &'a SampleTensor,
    sched: &'a NoiseSchedule,
}

impl NoisePredictor for Oracle<'_> {
    fn predict_eps(&self, x: &SampleTensor, t: usize) -> gda_core::Result<SampleTensor> {
        let ab = self.sched.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        x.zip_map(self.x0, |xt, x0| ((xt as f64 - a * x0 as f64) / b) as f32)
    }
}

fn ddim_consistency() -> Outcome {
    let sched = reference_schedule();
    if !sched.is_deterministic() {
        return Err("reference schedule is not deterministic".into());
    }
    let mut composed_err = 0f32;
    let mut endpoint_exact = true;
    for i in 0..20 {
        let x0 = clean_like(80 + i);
        let eps = noise(90 + i, Purpose::ForwardNoise);
        let oracle = Oracle { x0: &x0, sched: &sched };
        let mut rng = stream(0, i, Purpose::ReverseNoise);
        let xt = forward_diffuse(&x0, 50, &eps, &sched).map_err(|e| e.to_string())?;
        let run = |from: &SampleTensor, t: usize, tp: usize, rng: &mut _| {
            ddim_step(from, t, tp, &oracle, &sched, rng).map_err(|e| e.to_string())
        };
        let direct = run(&xt, 50, 10, &mut rng)?;
        let mid = run(&xt, 50, 30, &mut rng)?;
        let composed = run(&mid, 30, 10, &mut rng)?;
        composed_err = composed_err.max(composed.max_abs_diff(&direct));
        let end = run(&xt, 50, 0, &mut rng)?;
        let x0_hat = predict_x0(&xt, 50, &oracle.predict_eps(&xt, 50).map_err(|e| e.to_string())?, &sched)
            .map_err(|e| e.to_string())?;
        endpoint_exact &= end == x0_hat;
    }
    check(
        composed_err <= 1e-5 && endpoint_exact,
        format!("50->30->10 vs 50->10 max diff {composed_err:.2e}, t_prev = 0 endpoint equals x0_hat: {endpoint_exact}"),
    )
}

fn with_output(cfg: &RunConfig, dir: &Path) -> RunConfig {
    let mut c = cfg.clone();
    c.output_dir = dir.to_path_buf();
    c
}

struct PipelineRun {
    metrics: TrainMetrics,
    seconds: f64,
}

fn run_pipeline(cfg: &RunConfig) -> Result<PipelineRun, String> {
    let t0 = Instant::now();
    pipeline::gen_data(cfg).map_err(|e| e.to_string())?;
    let metrics = pipeline::train(cfg).map_err(|e| e.to_string())?;
    for m in Method::ALL {
        pipeline::adapt(cfg, m).map_err(|e| format!("adapt {m}: {e}"))?;
    }
    Ok(PipelineRun {
        metrics,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Relative path and bytes of every artifact under `root` except the
/// resolved config, which names the run directory, and wall-clock timings.
fn artifacts(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.ends_with("train_timing.csv") && !p.ends_with("resolved_config.toml") {
                let rel = p.strip_prefix(root).expect("under root").to_path_buf();
                out.insert(rel, fs::read(&p).expect("readable"));
            }
        }
    }
    out
}

/// Every artifact of the second run must exist byte-identical in the
/// first, which additionally holds the sweep and report outputs.
fn determinism(a: &Path, b: &Path) -> Outcome {
    let (fa, fb) = (artifacts(a), artifacts(b));
    let csvs = fb.keys().filter(|p| p.extension().is_some_and(|x| x == "csv")).count();
    let differing: Vec<String> = fb
        .iter()
        .filter(|(p, bytes)| fa.get(*p) != Some(*bytes))
        .map(|(p, _)| p.display().to_string())
        .collect();
    check(
        differing.is_empty() && csvs > 0,
        format!("{} files compared ({csvs} CSV), differing: {differing:?}", fb.len()),
    )
}

fn adapt_rows(dir: &RunDir, m: Method) -> Result<Vec<SampleRow>, String> {
    let bytes = read_bytes(&dir.result(&format!("adapt_{m}.csv"))).map_err(|e| e.to_string())?;
    from_csv(&bytes).map_err(|e| e.to_string())
}

fn accuracy(rows: &[SampleRow]) -> f64 {
    rows.iter().filter(|r| r.correct).count() as f64 / rows.len().max(1) as f64
}

fn filter_minimality(loaded: &Loaded) -> Result<(Outcome, Outcome), String> {
    let entries: Vec<_> = loaded.all_entries().into_iter().take(500).collect();
    let scale = loaded.guidance_scale().map_err(|e| e.to_string())?;
    let runs = loaded
        .run(Method::Gda, &entries, scale, Variant::default())
        .map_err(|e| e.to_string())?;
    let mut violations = 0;
    for (_, r) in &runs {
        let min = r.entropy_adapted.min(r.entropy_original);
        let chosen_bits = |t: &SampleTensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let c = chosen_bits(&r.chosen);
        let is_candidate = c == chosen_bits(&r.adapted) || c == chosen_bits(&r.original);
        if r.entropy_chosen().to_bits() != min.to_bits() || !is_candidate {
            violations += 1;
        }
    }
    let minimality = check(
        violations == 0 && runs.len() == 500,
        format!("{violations} violations over {} records", runs.len()),
    );

    let batch = &runs[..100.min(runs.len())];
    let monotone = batch
        .iter()
        .filter(|(_, r)| {
            let l = &r.per_step_loss;
            let tail = &l[l.len() / 2..];
            !tail.is_empty() && tail.windows(2).all(|w| w[1] <= w[0])
        })
        .count();
    let rate = monotone as f64 / batch.len() as f64;
    let loss_trend = check(
        rate >= 0.8,
        format!("{monotone} of {} trajectories non-increasing over the final half", batch.len()),
    );
    Ok((minimality, loss_trend))
}

fn clean_keep_rate(cfg: &RunConfig, loaded: &Loaded) -> Outcome {
    let dir = RunDir::new(&cfg.output_dir);
    let test = pipeline::load_dataset(&dir, "source_test.gdac").map_err(|e| e.to_string())?;
    let scale = loaded.guidance_scale().map_err(|e| e.to_string())?;
    let mut kept_original = 0;
    let n = 200.min(test.len());
    for s in &test[..n] {
        let seed = gda_core::sampler::SampleSeed {
            master: cfg.master_seed,
            index: s.id,
        };
        let r = loaded
            .adapt_one(Method::Gda, &s.x, seed, scale, Variant::default())
            .map_err(|e| e.to_string())?;
        kept_original += !r.filter_kept_adapted as usize;
    }
    let rate = kept_original as f64 / n as f64;
    check(rate >= 0.8, format!("original kept for {kept_original} of {n} clean samples"))
}

fn sweep_acc(rows: &[SweepRow], m: Method, steps: Option<usize>, k: Option<usize>) -> Option<f64> {
    rows.iter()
        .find(|r| r.method == m.name() && r.steps == steps && r.aug_count == k)
        .map(|r| r.accuracy)
}

fn severity_checks(rows: &[SeverityRow]) -> (Outcome, Outcome) {
    let mut proxy_bad = Vec::new();
    let mut mono_bad = Vec::new();
    for r in rows {
        if r.severity <= 3 && r.prototype_kept < 0.9 {
            proxy_bad.push(format!("{}@{} {:.2}", r.family, r.severity, r.prototype_kept));
        }
    }
    for w in rows.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if a.family != b.family {
            continue;
        }
        // Two binomial proportions on the same clean samples; allow two
        // standard errors of the difference.
        let n = a.samples as f64;
        let se = ((a.accuracy * (1.0 - a.accuracy) + b.accuracy * (1.0 - b.accuracy)) / n).sqrt();
        if b.accuracy > a.accuracy + 2.0 * se {
            mono_bad.push(format!("{} {}->{}: {:.3}->{:.3}", a.family, a.severity, b.severity, a.accuracy, b.accuracy));
        }
    }
    (
        check(proxy_bad.is_empty(), format!("below 0.9 at severity <= 3: {proxy_bad:?}")),
        check(mono_bad.is_empty(), format!("increases beyond 2 SE: {mono_bad:?}")),
    )
}

fn main() -> ExitCode {
    let mut report = Report { lines: Vec::new() };
    report.record("1 exact inversion", exact_inversion());
    report.record("2 forward marginals", forward_marginals());
    report.record("11 ddim consistency", ddim_consistency());

    let scratch = tempfile::tempdir().expect("scratch dir");
    let reference = reference_config();
    let cfg = with_output(&reference, &scratch.path().join("a"));
    let cfg_b = with_output(&reference, &scratch.path().join("b"));

    let first = match run_pipeline(&cfg) {
        Ok(r) => r,
        Err(e) => {
            report.record("pipeline", Err(e));
            return ExitCode::FAILURE;
        }
    };
    let dir = RunDir::new(&cfg.output_dir);
    let rows: Vec<Vec<SampleRow>> = Method::ALL.iter().map(|&m| adapt_rows(&dir, m).unwrap_or_default()).collect();
    let all_rows: Vec<SampleRow> = rows.iter().flatten().cloned().collect();
    report.record("4 entropy identities", entropy_identities(&all_rows));

    let loaded = match Loaded::open(&cfg) {
        Ok(l) => l,
        Err(e) => {
            report.record("load", Err(e.to_string()));
            return ExitCode::FAILURE;
        }
    };
    report.record("3 gradient fidelity", gradient_fidelity(&loaded));
    match filter_minimality(&loaded) {
        Ok((minimality, trend)) => {
            report.record("5 filter minimality", minimality);
            report.record("per-step loss trend", trend);
        }
        Err(e) => report.record("5 filter minimality", Err(e)),
    }

    let [standard, diffpure, dda, no_marg, gda] = [0, 1, 2, 3, 4].map(|i| accuracy(&rows[i]));
    report.record(
        "7 adaptation gain",
        check(
            gda >= standard + 0.05 && gda >= no_marg && no_marg >= dda.min(diffpure),
            format!(
                "standard {standard:.3}, diffpure {diffpure:.3}, dda {dda:.3}, gda_no_marginal {no_marg:.3}, gda {gda:.3}"
            ),
        ),
    );

    let medians = pipeline::entropy_report(&cfg).map_err(|e| e.to_string());
    let med = |name: &str| -> Option<f64> {
        medians.as_ref().ok()?.iter().find(|r| r.series == name).map(|r| r.median)
    };
    let (clean, corrupted, adapted) = (med("clean"), med("corrupted"), med("gda_adapted"));
    report.record(
        "8 entropy shift",
        match (corrupted, adapted) {
            (Some(c), Some(a)) => check(a < c, format!("median H: gda adapted {a:.4}, corrupted inputs {c:.4}")),
            _ => Err(format!("entropy report incomplete: {:?}", medians.err())),
        },
    );
    report.record(
        "clean below corrupted entropy",
        match (clean, corrupted) {
            (Some(a), Some(c)) => check(a < c, format!("median H: clean {a:.4}, corrupted {c:.4}")),
            _ => Err("entropy report incomplete".into()),
        },
    );

    match pipeline::sweep_steps(&cfg) {
        Ok(sweep) => {
            let g1 = sweep_acc(&sweep, Method::Gda, Some(1), None);
            let g10 = sweep_acc(&sweep, Method::Gda, Some(10), None);
            let d10 = sweep_acc(&sweep, Method::Dda, Some(10), None);
            report.record(
                "9 step sweep",
                match (g1, g10, d10) {
                    (Some(g1), Some(g10), Some(d10)) => check(
                        g10 >= g1 && g10 >= d10,
                        format!("gda@1 {g1:.3}, gda@10 {g10:.3}, dda@10 {d10:.3}"),
                    ),
                    _ => Err("missing sweep rows".into()),
                },
            );
            let complete = cfg.bench.step_sweep.iter().all(|&n| {
                [Method::Gda, Method::Dda]
                    .iter()
                    .all(|&m| sweep_acc(&sweep, m, Some(n), None).is_some())
            }) && sweep_acc(&sweep, Method::Standard, None, None).is_some();
            report.record("step sweep completeness", check(complete, format!("{} rows", sweep.len())));
        }
        Err(e) => report.record("9 step sweep", Err(e.to_string())),
    }

    match pipeline::sweep_augs(&cfg) {
        Ok((sweep, zero_matches)) => {
            let k0 = sweep_acc(&sweep, Method::Gda, None, Some(0));
            let k16 = sweep_acc(&sweep, Method::Gda, None, Some(16));
            let nm = sweep_acc(&sweep, Method::GdaNoMarginal, None, None);
            let complete = cfg.bench.aug_sweep.iter().all(|&k| sweep_acc(&sweep, Method::Gda, None, Some(k)).is_some());
            report.record(
                "10 augmentation sweep",
                match (k0, k16, nm) {
                    (Some(k0), Some(k16), Some(nm)) => check(
                        k16 >= k0 && zero_matches && k0 == nm && complete,
                        format!("k=0 {k0:.3}, k=16 {k16:.3}, no-marginal {nm:.3}, per-sample match {zero_matches}"),
                    ),
                    _ => Err("missing sweep rows".into()),
                },
            );
        }
        Err(e) => report.record("10 augmentation sweep", Err(e.to_string())),
    }

    let m = &first.metrics;
    report.record(
        "classifier clean accuracy",
        check(m.classifier_test_accuracy >= 0.95, format!("{:.3}", m.classifier_test_accuracy)),
    );
    report.record(
        "denoiser final loss",
        check(m.denoiser_final_loss < 0.2, format!("{:.4}", m.denoiser_final_loss)),
    );
    report.record(
        "encoder domain accuracy",
        check(m.encoder_heldout_accuracy >= 0.9, format!("{:.3}", m.encoder_heldout_accuracy)),
    );
    report.record("clean keep-original rate", clean_keep_rate(&cfg, &loaded));
    report.record(
        "reference budget",
        check(first.seconds <= 15.0 * 60.0, format!("gen-data, train and five adapt runs in {:.0} s", first.seconds)),
    );

    match pipeline::severity_report(&cfg, 200) {
        Ok(sev) => {
            let (proxy, mono) = severity_checks(&sev);
            report.record("label preservation proxy", proxy);
            report.record("severity monotonicity", mono);
        }
        Err(e) => report.record("severity report", Err(e.to_string())),
    }

    match pipeline::timing(&cfg) {
        Ok(t) => {
            let wall = |m: Method| t.rows.iter().find(|r| r.method == m.name()).and_then(|r| r.wall_seconds);
            let w: Vec<Option<f64>> = Method::ALL.iter().map(|&m| wall(m)).collect();
            let detail = Method::ALL
                .iter()
                .zip(&w)
                .map(|(m, s)| format!("{m} {:.1} ms", s.unwrap_or(f64::NAN) * 1e3))
                .collect::<Vec<_>>()
                .join(", ");
            let (dp, dda, nm, gda) = (wall(Method::Diffpure), wall(Method::Dda), wall(Method::GdaNoMarginal), wall(Method::Gda));
            let positive = w.iter().all(|s| s.is_some_and(|v| v.is_finite() && v > 0.0));
            report.record(
                "timing order",
                match (dp, dda, nm, gda) {
                    (Some(dp), Some(dda), Some(nm), Some(gda)) => {
                        check(positive && gda > nm && dp > dda && dp > nm, detail)
                    }
                    _ => Err(detail),
                },
            );
        }
        Err(e) => report.record("timing order", Err(e.to_string())),
    }

    match run_pipeline(&cfg_b) {
        Ok(_) => report.record("6 determinism", determinism(dir.root(), &cfg_b.output_dir)),
        Err(e) => report.record("6 determinism", Err(e)),
    }

    let failed = report.failures();
    println!("{} checks, {failed} failed", report.lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
