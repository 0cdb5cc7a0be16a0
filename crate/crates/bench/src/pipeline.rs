//! The experiment stages: data generation, training, adaptation and the
//! analyses built on adaptation runs.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use gda_core::container::Record;
use gda_core::guidance::{GuidanceConfig, LossWeights};
use gda_core::nets::{
    train_classifier, train_denoiser, train_encoder, Classifier, Denoiser, EmbeddingEncoder, NetsBundle,
};
use gda_core::rng::{stream, Purpose};
use gda_core::sampler::{
    calibrate_guidance_scale, dda_baseline_adapt, diffpure_baseline_adapt, gda_adapt, standard_record,
    AdaptationRecord, SampleSeed, SamplerPlan, StepSpacing,
};
use gda_core::schedule::NoiseSchedule;
use gda_core::shiftgen::{
    apply_shift, audit_sheet, build_benchmark, generate_source, nearest_prototype, read_dataset, write_dataset,
    BenchEntry, Benchmark, LabeledSample, Manifest, ShiftFamily, ShiftSpec, Split,
};
use gda_core::tensor::Tensor;
use gda_core::SampleTensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{BenchError, Result};
use crate::report::{histogram, median, write_csv, ResultTable, SampleRow};
use crate::store::{read_bytes, read_records, write_atomic, write_records, RunDir};

const ENCODER_SHIFT_SALT: u64 = 0x656e_635f_7368_6966;
const ENCODER_HELDOUT_SALT: u64 = 0x656e_635f_686f_6c64;
const AUDIT_COLUMNS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Standard,
    Diffpure,
    Dda,
    GdaNoMarginal,
    Gda,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Standard,
        Method::Diffpure,
        Method::Dda,
        Method::GdaNoMarginal,
        Method::Gda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Standard => "standard",
            Method::Diffpure => "diffpure",
            Method::Dda => "dda",
            Method::GdaNoMarginal => "gda_no_marginal",
            Method::Gda => "gda",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| BenchError::Config(format!("unknown method {s:?}")))
    }
}

/// Per-run overrides used by the sweeps.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Variant {
    /// Replaces the configured stride for dda and the gda methods.
    pub spacing: Option<StepSpacing>,
    pub aug_count: Option<usize>,
}

fn encoder_shifted_set(source: &[LabeledSample], fraction: f64, seed: u64) -> Result<Vec<LabeledSample>> {
    let families: Vec<ShiftFamily> = ShiftFamily::CORRUPTIONS.into_iter().chain(ShiftFamily::STYLES).collect();
    let n = (source.len() as f64 * fraction).round() as usize;
    (0..n)
        .map(|i| {
            let mut rng = stream(seed, i as u64, Purpose::Shift);
            let s = &source[i % source.len()];
            let family = families[rng.random_range(0..families.len())];
            let shift = ShiftSpec::new(family, rng.random_range(1..=5))?;
            Ok(LabeledSample {
                x: apply_shift(&s.x, shift, &mut rng)?,
                ..s.clone()
            })
        })
        .collect()
}

fn write_resolved(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    write_atomic(&dir.resolved_config(), cfg.to_toml().as_bytes())
}

fn dataset_bytes(samples: &[LabeledSample]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, samples)?;
    Ok(buf)
}

/// Source splits, the shifted benchmark with its manifest, the encoder's
/// shifted training set and one audit sheet per shift family.
pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let dir = RunDir::new(&cfg.output_dir);
    write_resolved(cfg, &dir)?;
    let seed = cfg.master_seed;
    let train = generate_source(&cfg.source_spec(cfg.shift.train_per_class), Split::Train, seed)?;
    let test = generate_source(&cfg.source_spec(cfg.shift.test_per_class), Split::Test, seed)?;
    let bench = build_benchmark(&test, &cfg.shifts()?, cfg.shift.n_per_shift, seed)?;
    let shifted = encoder_shifted_set(&train, cfg.nets.encoder_shifted_fraction, seed ^ ENCODER_SHIFT_SALT)?;

    write_atomic(&dir.data("source_train.gdac"), &dataset_bytes(&train)?)?;
    write_atomic(&dir.data("source_test.gdac"), &dataset_bytes(&test)?)?;
    write_atomic(&dir.data("encoder_shifted.gdac"), &dataset_bytes(&shifted)?)?;
    let mut buf = Vec::new();
    bench.write_tensors(&mut buf)?;
    write_atomic(&dir.data("benchmark.gdac"), &buf)?;
    write_atomic(&dir.data("benchmark.manifest"), bench.manifest().to_text().as_bytes())?;

    let cols = &test[..AUDIT_COLUMNS.min(test.len())];
    for family in ShiftFamily::CORRUPTIONS.into_iter().chain(ShiftFamily::STYLES) {
        let pgm = audit_sheet(cols, family, seed)?;
        write_atomic(&dir.audit(&format!("{}.pgm", family.name())), &pgm)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &RunDir, name: &str) -> Result<Vec<LabeledSample>> {
    let path = dir.data(name);
    let bytes = read_bytes(&path)?;
    read_dataset(bytes.as_slice()).map_err(|e| BenchError::MissingArtifact {
        path,
        reason: e.to_string(),
    })
}

fn load_benchmark(dir: &RunDir) -> Result<Benchmark> {
    let mpath = dir.data("benchmark.manifest");
    let text = String::from_utf8(read_bytes(&mpath)?).map_err(|e| BenchError::MissingArtifact {
        path: mpath.clone(),
        reason: e.to_string(),
    })?;
    let manifest = Manifest::parse(&text)?;
    let tpath = dir.data("benchmark.gdac");
    let bytes = read_bytes(&tpath)?;
    Benchmark::read(&manifest, bytes.as_slice()).map_err(|e| BenchError::MissingArtifact {
        path: tpath,
        reason: e.to_string(),
    })
}

fn xs(samples: &[LabeledSample]) -> Vec<SampleTensor> {
    samples.iter().map(|s| s.x.clone()).collect()
}

/// Loss curve entry of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub net: String,
    pub epoch: usize,
    pub loss: f64,
}

/// Post-training sanity measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub denoiser_final_loss: f64,
    pub classifier_final_loss: f64,
    pub encoder_final_loss: f64,
    pub classifier_test_accuracy: f64,
    pub encoder_heldout_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub stage: String,
    pub wall_seconds: f64,
}

pub fn accuracy(classifier: &Classifier<f32>, samples: &[LabeledSample]) -> Result<f64> {
    let mut hits = 0;
    for s in samples {
        let p = classifier.classify(&s.x)?;
        hits += (argmax(&p) == s.label) as usize;
    }
    Ok(hits as f64 / samples.len().max(1) as f64)
}

fn argmax(p: &[f32]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
        .0
}

fn domain_accuracy(encoder: &EmbeddingEncoder<f32>, source: &[SampleTensor], shifted: &[SampleTensor]) -> Result<f64> {
    let mut hits = 0;
    for (set, shifted_domain) in [(source, false), (shifted, true)] {
        for chunk in set.chunks(256) {
            let batch = Tensor::stack(&chunk.iter().collect::<Vec<_>>())?;
            hits += encoder
                .domain_logits(&batch)?
                .iter()
                .filter(|&&z| (z > 0.0) == shifted_domain)
                .count();
        }
    }
    Ok(hits as f64 / (source.len() + shifted.len()).max(1) as f64)
}

/// Trains the denoiser, classifier and encoder in sequence and writes the
/// three checkpoints, the style prototype and the training reports.
pub fn train(cfg: &RunConfig) -> Result<TrainMetrics> {
    let dir = RunDir::new(&cfg.output_dir);
    write_resolved(cfg, &dir)?;
    let sched = cfg.schedule()?;
    let train = load_dataset(&dir, "source_train.gdac")?;
    let test = load_dataset(&dir, "source_test.gdac")?;
    let shifted = load_dataset(&dir, "encoder_shifted.gdac")?;
    let train_x = xs(&train);
    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();

    let t0 = Instant::now();
    let (denoiser, d_rep) = train_denoiser(
        &train_x,
        &sched,
        cfg.denoiser_arch(),
        &cfg.train_config(cfg.nets.denoiser_train, 1),
    )?;
    let t1 = Instant::now();
    let (classifier, c_rep) = train_classifier(
        &train_x,
        &labels,
        cfg.classifier_arch(),
        &cfg.train_config(cfg.nets.classifier_train, 2),
        cfg.nets.classifier_augment,
    )?;
    let t2 = Instant::now();
    let (encoder, e_rep) = train_encoder(
        &train_x,
        &xs(&shifted),
        cfg.encoder_arch(),
        &cfg.train_config(cfg.nets.encoder_train, 3),
    )?;
    let t3 = Instant::now();
    let prototype = encoder.prototype(&train_x)?;

    let heldout = encoder_shifted_set(&test, 1.0, cfg.master_seed ^ ENCODER_HELDOUT_SALT)?;
    let metrics = TrainMetrics {
        denoiser_final_loss: d_rep.final_loss,
        classifier_final_loss: c_rep.final_loss,
        encoder_final_loss: e_rep.final_loss,
        classifier_test_accuracy: accuracy(&classifier, &test)?,
        encoder_heldout_accuracy: domain_accuracy(&encoder, &xs(&test), &xs(&heldout))?,
    };

    write_records(&dir.checkpoint("denoiser.gdac"), &denoiser.params().to_records())?;
    write_records(&dir.checkpoint("classifier.gdac"), &classifier.params().to_records())?;
    write_records(&dir.checkpoint("encoder.gdac"), &encoder.params().to_records())?;
    let proto = Tensor::new(&[prototype.len()], prototype)?;
    write_records(
        &dir.checkpoint("prototype.gdac"),
        &[Record {
            name: "prototype".into(),
            tensor: proto,
        }],
    )?;
    let mut curve = Vec::new();
    for (net, rep) in [("denoiser", &d_rep), ("classifier", &c_rep), ("encoder", &e_rep)] {
        for (epoch, &loss) in rep.loss_curve.iter().enumerate() {
            curve.push(CurveRow {
                net: net.into(),
                epoch: epoch + 1,
                loss,
            });
        }
    }
    write_csv(&dir.checkpoint("train_curve.csv"), &curve)?;
    write_csv(&dir.checkpoint("train_metrics.csv"), std::slice::from_ref(&metrics))?;
    let timing = [("denoiser", t1 - t0), ("classifier", t2 - t1), ("encoder", t3 - t2)].map(|(s, d)| TimingRow {
        stage: s.into(),
        wall_seconds: d.as_secs_f64(),
    });
    write_csv(&dir.checkpoint("train_timing.csv"), &timing)?;
    Ok(metrics)
}

/// Everything adaptation needs, loaded from a run directory.
pub struct Loaded {
    pub cfg: RunConfig,
    pub dir: RunDir,
    pub sched: NoiseSchedule,
    pub bench: Benchmark,
    pub nets: NetsBundle<f32>,
    pub prototype: Vec<f32>,
}

fn load_params(dir: &RunDir, name: &str, params: &mut gda_core::nets::ParamSet<f32>) -> Result<()> {
    let path = dir.checkpoint(name);
    let records = read_records(&path)?;
    params.load(&records).map_err(|e| BenchError::MissingArtifact {
        path,
        reason: e.to_string(),
    })
}

impl Loaded {
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        let dir = RunDir::new(&cfg.output_dir);
        let sched = cfg.schedule()?;
        let bench = load_benchmark(&dir)?;
        let mut init = stream(0, 0, Purpose::Init);
        let mut denoiser = Denoiser::new(cfg.denoiser_arch(), &mut init);
        let mut classifier = Classifier::new(cfg.classifier_arch(), &mut init);
        let mut encoder = EmbeddingEncoder::new(cfg.encoder_arch(), &mut init);
        load_params(&dir, "denoiser.gdac", denoiser.params_mut())?;
        load_params(&dir, "classifier.gdac", classifier.params_mut())?;
        load_params(&dir, "encoder.gdac", encoder.params_mut())?;
        let ppath = dir.checkpoint("prototype.gdac");
        let prototype = read_records(&ppath)?
            .into_iter()
            .find(|r| r.name == "prototype")
            .ok_or_else(|| BenchError::MissingArtifact {
                path: ppath,
                reason: "no prototype record".into(),
            })?
            .tensor
            .data()
            .to_vec();
        Ok(Self {
            cfg: cfg.clone(),
            dir,
            sched,
            bench,
            nets: NetsBundle {
                denoiser,
                classifier,
                encoder,
                tap: cfg.tap(),
            },
            prototype,
        })
    }

    pub fn guidance(&self, method: Method, variant: Variant) -> GuidanceConfig {
        let mut g = self.cfg.guidance(self.prototype.clone());
        if method == Method::GdaNoMarginal {
            g.weights = LossWeights {
                marginal: 0.0,
                ..g.weights
            };
        }
        if let Some(k) = variant.aug_count {
            g.aug_count = k;
        }
        g
    }

    /// Evenly spaced benchmark entries used for scale calibration.
    fn calibration_set(&self) -> Vec<(SampleTensor, SampleSeed)> {
        let n = self.cfg.bench.calibration_samples.min(self.bench.entries.len());
        let stride = self.bench.entries.len() / n;
        (0..n)
            .map(|i| {
                let e = &self.bench.entries[i * stride];
                (e.x.clone(), self.seed(e))
            })
            .collect()
    }

    /// The guidance scale shared by every guided run: fixed, or calibrated
    /// once with the full composite objective.
    pub fn guidance_scale(&self) -> Result<f64> {
        match self.cfg.plan.guidance_scale {
            crate::config::ScaleSetting::Fixed(s) => Ok(s),
            crate::config::ScaleSetting::Calibrate(target) => {
                let g = self.guidance(Method::Gda, Variant::default());
                let plan = self.cfg.plan(1.0);
                Ok(calibrate_guidance_scale(
                    &self.calibration_set(),
                    &self.nets,
                    &g,
                    &plan,
                    &self.sched,
                    target,
                )?)
            }
        }
    }

    pub fn seed(&self, e: &BenchEntry) -> SampleSeed {
        SampleSeed {
            master: self.cfg.master_seed,
            index: e.id,
        }
    }

    pub fn plan(&self, scale: f64, variant: Variant) -> SamplerPlan {
        let mut p = self.cfg.plan(scale);
        if let Some(s) = variant.spacing {
            p.spacing = s;
        }
        p
    }

    /// Adapts one sample with `method`.
    pub fn adapt_one(
        &self,
        method: Method,
        x: &SampleTensor,
        seed: SampleSeed,
        scale: f64,
        variant: Variant,
    ) -> Result<AdaptationRecord> {
        let b = &self.cfg.bench;
        let nets = &self.nets;
        let rec = match method {
            Method::Standard => standard_record(x, &nets.classifier, seed.index)?,
            Method::Diffpure => {
                diffpure_baseline_adapt(x, &nets.denoiser, &nets.classifier, &self.sched, b.diffpure_t_star, seed)?
            }
            Method::Dda => dda_baseline_adapt(
                x,
                &nets.denoiser,
                &nets.classifier,
                &self.sched,
                &self.plan(0.0, variant),
                seed,
                b.dda_scale_factor,
                b.dda_ensemble,
            )?,
            Method::GdaNoMarginal | Method::Gda => gda_adapt(
                x,
                nets,
                &self.guidance(method, variant),
                &self.plan(scale, variant),
                &self.sched,
                seed,
            )?,
        };
        Ok(rec)
    }

    pub fn run(
        &self,
        method: Method,
        entries: &[&BenchEntry],
        scale: f64,
        variant: Variant,
    ) -> Result<Vec<(SampleRow, AdaptationRecord)>> {
        let mut out = Vec::with_capacity(entries.len());
        for e in entries {
            let rec = self.adapt_one(method, &e.x, self.seed(e), scale, variant)?;
            out.push((sample_row(method, e, &rec), rec));
        }
        out.sort_by_key(|(r, _)| r.sample_id);
        Ok(out)
    }

    /// The first `per_shift` entries of every shift.
    pub fn subset(&self, per_shift: usize) -> Vec<&BenchEntry> {
        let n = self.cfg.shift.n_per_shift;
        self.bench.entries.iter().filter(|e| (e.id as usize) % n < per_shift).collect()
    }

    pub fn all_entries(&self) -> Vec<&BenchEntry> {
        self.bench.entries.iter().collect()
    }

    fn expected_cells(&self) -> Result<Vec<(String, u8)>> {
        Ok(self
            .cfg
            .shifts()?
            .iter()
            .map(|s| (s.family.name().to_string(), s.severity))
            .collect())
    }
}

pub fn sample_row(method: Method, e: &BenchEntry, rec: &AdaptationRecord) -> SampleRow {
    SampleRow {
        sample_id: e.id,
        clean_id: e.clean_id,
        family: e.shift.family.name().to_string(),
        severity: e.shift.severity,
        label: e.label,
        method: method.name().to_string(),
        prediction: rec.prediction,
        correct: rec.prediction == e.label,
        entropy_original: rec.entropy_original,
        entropy_adapted: rec.entropy_adapted,
        entropy_chosen: rec.entropy_chosen(),
        filtered: rec.filtered,
        kept_adapted: rec.filter_kept_adapted,
        steps: rec.per_step_loss.len(),
        final_step_loss: rec.per_step_loss.last().copied(),
        failure: rec.failure.clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Calibration {
    guidance_scale: f64,
}

fn write_calibration(loaded: &Loaded, scale: f64) -> Result<()> {
    let text = toml::to_string(&Calibration { guidance_scale: scale }).expect("serializes");
    write_atomic(&loaded.dir.result("calibration.toml"), text.as_bytes())
}

fn check_finite(table: &ResultTable) -> Result<()> {
    match table.rows.iter().find(|r| !r.is_finite()) {
        Some(r) => Err(BenchError::Numerical(format!(
            "non-finite summary for {} / {}",
            r.method, r.family
        ))),
        None => Ok(()),
    }
}

/// Adapts the whole benchmark with `method`, writing the per-sample CSV
/// and the summary table.
pub fn adapt(cfg: &RunConfig, method: Method) -> Result<ResultTable> {
    let loaded = Loaded::open(cfg)?;
    write_resolved(cfg, &loaded.dir)?;
    let scale = loaded.guidance_scale()?;
    write_calibration(&loaded, scale)?;
    let rows: Vec<SampleRow> = loaded
        .run(method, &loaded.all_entries(), scale, Variant::default())?
        .into_iter()
        .map(|(r, _)| r)
        .collect();
    let table = ResultTable::summarize(method.name(), &rows, &loaded.expected_cells()?);
    write_csv(&loaded.dir.result(&format!("adapt_{method}.csv")), &rows)?;
    write_atomic(&loaded.dir.result(&format!("summary_{method}.csv")), &table.to_csv()?)?;
    check_finite(&table)?;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub steps: Option<usize>,
    pub aug_count: Option<usize>,
    pub samples: usize,
    pub accuracy: f64,
}

fn sweep_row(method: Method, steps: Option<usize>, aug_count: Option<usize>, rows: &[SampleRow]) -> SweepRow {
    let hits = rows.iter().filter(|r| r.correct).count();
    SweepRow {
        method: method.name().to_string(),
        steps,
        aug_count,
        samples: rows.len(),
        accuracy: hits as f64 / rows.len().max(1) as f64,
    }
}

fn rows_of(v: Vec<(SampleRow, AdaptationRecord)>) -> Vec<SampleRow> {
    v.into_iter().map(|(r, _)| r).collect()
}

/// Accuracy of gda and dda over the configured executed-step counts, plus
/// the unadapted reference row.
pub fn sweep_steps(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let loaded = Loaded::open(cfg)?;
    write_resolved(cfg, &loaded.dir)?;
    let scale = loaded.guidance_scale()?;
    let entries = loaded.subset(cfg.bench.sweep_per_shift);
    let mut out = vec![sweep_row(
        Method::Standard,
        None,
        None,
        &rows_of(loaded.run(Method::Standard, &entries, scale, Variant::default())?),
    )];
    for &n in &cfg.bench.step_sweep {
        let v = Variant {
            spacing: Some(StepSpacing::Count(n)),
            aug_count: None,
        };
        for m in [Method::Dda, Method::Gda] {
            out.push(sweep_row(m, Some(n), None, &rows_of(loaded.run(m, &entries, scale, v)?)));
        }
    }
    write_csv(&loaded.dir.result("sweep_steps.csv"), &out)?;
    Ok(out)
}

/// gda accuracy over augmentation counts, with the no-marginal method row
/// for comparison. Also returns whether the `k = 0` run matched it sample
/// by sample.
pub fn sweep_augs(cfg: &RunConfig) -> Result<(Vec<SweepRow>, bool)> {
    let loaded = Loaded::open(cfg)?;
    write_resolved(cfg, &loaded.dir)?;
    let scale = loaded.guidance_scale()?;
    let entries = loaded.subset(cfg.bench.sweep_per_shift);
    let no_marg = rows_of(loaded.run(Method::GdaNoMarginal, &entries, scale, Variant::default())?);
    let mut out = vec![sweep_row(Method::GdaNoMarginal, None, None, &no_marg)];
    let mut zero_matches = true;
    for &k in &cfg.bench.aug_sweep {
        let v = Variant {
            spacing: None,
            aug_count: Some(k),
        };
        let rows = rows_of(loaded.run(Method::Gda, &entries, scale, v)?);
        if k == 0 {
            zero_matches = rows.iter().zip(&no_marg).all(|(a, b)| {
                a.prediction == b.prediction
                    && a.entropy_adapted.to_bits() == b.entropy_adapted.to_bits()
                    && a.final_step_loss.map(f64::to_bits) == b.final_step_loss.map(f64::to_bits)
            });
        }
        out.push(sweep_row(Method::Gda, None, Some(k), &rows));
    }
    write_csv(&loaded.dir.result("sweep_augs.csv"), &out)?;
    Ok((out, zero_matches))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistRow {
    pub series: String,
    pub bin: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    pub series: String,
    pub samples: usize,
    pub median: f64,
}

/// Entropy distributions of the clean inputs, the shifted inputs and the
/// adapted outputs of every method with a per-sample CSV present.
pub fn entropy_report(cfg: &RunConfig) -> Result<Vec<MedianRow>> {
    let loaded = Loaded::open(cfg)?;
    write_resolved(cfg, &loaded.dir)?;
    let mut series: Vec<(String, Vec<f64>)> = Vec::new();
    let clean = loaded
        .bench
        .clean
        .iter()
        .map(|s| gda_core::guidance::uncertainty(&loaded.nets.classifier, &s.x))
        .collect::<gda_core::Result<Vec<f64>>>()?;
    series.push(("clean".into(), clean));
    let mut corrupted = None;
    for m in Method::ALL {
        let path = loaded.dir.result(&format!("adapt_{m}.csv"));
        if !path.exists() {
            continue;
        }
        let rows: Vec<SampleRow> = crate::report::from_csv(&read_bytes(&path)?)?;
        if corrupted.is_none() {
            corrupted = Some(rows.iter().map(|r| r.entropy_original).collect::<Vec<_>>());
        }
        if m != Method::Standard {
            series.push((format!("{m}_adapted"), rows.iter().map(|r| r.entropy_adapted).collect()));
            series.push((format!("{m}_chosen"), rows.iter().map(|r| r.entropy_chosen).collect()));
        }
    }
    let corrupted = corrupted.ok_or_else(|| BenchError::MissingArtifact {
        path: loaded.dir.result("adapt_<method>.csv"),
        reason: "run `adapt` for at least one method first".into(),
    })?;
    series.insert(1, ("corrupted".into(), corrupted));

    let bins = cfg.bench.entropy_bins;
    let hi = (loaded.nets.classifier.classes() as f64).ln();
    let width = hi / bins as f64;
    let mut hist = Vec::new();
    let mut medians = Vec::new();
    for (name, values) in &series {
        for (b, count) in histogram(values, 0.0, hi, bins).into_iter().enumerate() {
            hist.push(HistRow {
                series: name.clone(),
                bin: b,
                lo: b as f64 * width,
                hi: (b + 1) as f64 * width,
                count,
            });
        }
        medians.push(MedianRow {
            series: name.clone(),
            samples: values.len(),
            median: median(values).unwrap_or(f64::NAN),
        });
    }
    write_csv(&loaded.dir.result("entropy_hist.csv"), &hist)?;
    write_csv(&loaded.dir.result("entropy_medians.csv"), &medians)?;
    Ok(medians)
}

/// Mean wall-seconds per sample for every method on the first
/// `timing_samples` entries, spread across shifts.
pub fn timing(cfg: &RunConfig) -> Result<ResultTable> {
    let loaded = Loaded::open(cfg)?;
    write_resolved(cfg, &loaded.dir)?;
    let scale = loaded.guidance_scale()?;
    let n = cfg.bench.timing_samples.min(loaded.bench.entries.len());
    let stride = loaded.bench.entries.len() / n;
    let entries: Vec<&BenchEntry> = (0..n).map(|i| &loaded.bench.entries[i * stride]).collect();
    let mut table = ResultTable::default();
    for m in Method::ALL {
        let runs = loaded.run(m, &entries, scale, Variant::default())?;
        let wall = runs.iter().map(|(_, r)| r.wall_seconds).sum::<f64>() / runs.len() as f64;
        let rows = rows_of(runs);
        let mut t = ResultTable::summarize(m.name(), &rows, &[]);
        let mut agg = t.rows.pop().expect("aggregate row");
        agg.wall_seconds = Some(wall);
        table.rows.push(agg);
    }
    write_atomic(&loaded.dir.result("timing.csv"), &table.to_csv()?)?;
    check_finite(&table)?;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityRow {
    pub family: String,
    pub severity: u8,
    pub samples: usize,
    pub accuracy: f64,
    /// Fraction whose nearest noiseless prototype is still the true class.
    pub prototype_kept: f64,
}

/// Unadapted accuracy and the label-preservation proxy for every family
/// and severity on the clean test split.
pub fn severity_report(cfg: &RunConfig, per_family: usize) -> Result<Vec<SeverityRow>> {
    let dir = RunDir::new(&cfg.output_dir);
    let test = load_dataset(&dir, "source_test.gdac")?;
    let mut classifier = Classifier::new(cfg.classifier_arch(), &mut stream(0, 0, Purpose::Init));
    load_params(&dir, "classifier.gdac", classifier.params_mut())?;
    let base = &test[..per_family.min(test.len())];
    let mut out = Vec::new();
    for family in ShiftFamily::CORRUPTIONS.into_iter().chain(ShiftFamily::STYLES) {
        for sev in 1..=5u8 {
            let shift = ShiftSpec::new(family, sev)?;
            let (mut hits, mut kept) = (0, 0);
            for s in base {
                let mut rng = stream(cfg.master_seed, (sev as u64) << 40 | s.id, Purpose::Shift);
                let x = apply_shift(&s.x, shift, &mut rng)?;
                hits += (argmax(&classifier.classify(&x)?) == s.label) as usize;
                kept += (nearest_prototype(&x, s.geometry, 4) == s.label) as usize;
            }
            let n = base.len() as f64;
            out.push(SeverityRow {
                family: family.name().to_string(),
                severity: sev,
                samples: base.len(),
                accuracy: hits as f64 / n,
                prototype_kept: kept as f64 / n,
            });
        }
    }
    write_csv(&dir.result("severity_report.csv"), &out)?;
    Ok(out)
}
