//! Procedural source domain (four anti-aliased shape classes) and its
//! distribution shifts: eight corruption families and three style
//! families, each with five severities.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::container::{read_container, write_container, Record};
use crate::error::{GdaError, Result};
use crate::imgops::{box_kernel, pixelate, separable_blur, sobel_magnitude, warp_map};
use crate::rng::{stream, Purpose, StreamRng};
use crate::tensor::{SampleTensor, Tensor};

pub const CLASS_NAMES: [&str; 4] = ["disk", "square", "cross", "stripes"];

/// Minimum pairwise L2 distance between noiseless class prototypes.
pub const PROTOTYPE_MARGIN: f64 = 3.0;

const BASE_RADIUS: f64 = 4.0;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourceSpec {
    pub class_count: usize,
    pub image_size: (usize, usize),
    /// Maximum centre offset in pixels, per axis.
    pub jitter_px: f64,
    pub scale_range: (f64, f64),
    /// Maximum amplitude of the smooth per-sample texture.
    pub texture_amplitude: f64,
    pub samples_per_class: usize,
}

impl Default for SourceSpec {
    fn default() -> Self {
        Self {
            class_count: 4,
            image_size: (16, 16),
            jitter_px: 3.0,
            scale_range: (0.7, 1.3),
            texture_amplitude: 0.05,
            samples_per_class: 250,
        }
    }
}

impl SourceSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GdaError::InvalidParameter(m.to_string()));
        if self.class_count == 0 || self.class_count > CLASS_NAMES.len() {
            return bad("class_count must be in 1..=4");
        }
        if self.image_size.0 < 8 || self.image_size.1 < 8 {
            return bad("images must be at least 8x8");
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) || !(self.jitter_px >= 0.0) || !(self.texture_amplitude >= 0.0) {
            return bad("jitter, scale and texture must be nonnegative with a valid scale range");
        }
        Ok(())
    }
}

/// Placement of a shape: centre and scale relative to the base radius.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub cy: f64,
    pub cx: f64,
    pub scale: f64,
}

impl Geometry {
    pub fn centred(size: (usize, usize)) -> Self {
        Self {
            cy: (size.0 as f64 - 1.0) / 2.0,
            cx: (size.1 as f64 - 1.0) / 2.0,
            scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: u64,
    pub label: usize,
    pub geometry: Geometry,
    pub x: SampleTensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream_base(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1 << 32,
        }
    }
}

fn inside(class: usize, dy: f64, dx: f64, r: f64) -> bool {
    let (ay, ax) = (dy.abs(), dx.abs());
    match class {
        0 => dy * dy + dx * dx < r * r,
        1 => ay.max(ax) < 0.85 * r,
        2 => (ax < 0.3 * r && ay < r) || (ay < 0.3 * r && ax < r),
        _ => ay.max(ax) < r && (((dy + r) / (0.4 * r)).floor() as i64) % 2 == 0,
    }
}

/// Noiseless anti-aliased rendering of `class` at `geo`: background -1,
/// shape +1.
pub fn render_shape(class: usize, geo: Geometry, size: (usize, usize)) -> SampleTensor {
    let r = BASE_RADIUS * geo.scale;
    let n = SUPERSAMPLE as f64;
    let mut data = Vec::with_capacity(size.0 * size.1);
    for y in 0..size.0 {
        for x in 0..size.1 {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let py = y as f64 + (sy as f64 + 0.5) / n - 0.5;
                    let px = x as f64 + (sx as f64 + 0.5) / n - 0.5;
                    if inside(class, py - geo.cy, px - geo.cx, r) {
                        hits += 1;
                    }
                }
            }
            data.push((2.0 * hits as f64 / (n * n) - 1.0) as f32);
        }
    }
    SampleTensor::new(&[1, size.0, size.1], data).expect("render shape")
}

fn smooth_texture(size: (usize, usize), amplitude: f64, rng: &mut StreamRng) -> Vec<f64> {
    let a = rng.random_range(0.0..=amplitude);
    let fy: f64 = rng.random_range(0.0..=1.5);
    let fx: f64 = rng.random_range(0.0..=1.5);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let tau = std::f64::consts::TAU;
    (0..size.0 * size.1)
        .map(|i| {
            let (y, x) = ((i / size.1) as f64, (i % size.1) as f64);
            a * (tau * (fy * y / size.0 as f64 + fx * x / size.1 as f64) + phase).sin()
        })
        .collect()
}

/// Smallest pairwise L2 distance between centred class prototypes.
pub fn prototype_separation(spec: &SourceSpec) -> f64 {
    let geo = Geometry::centred(spec.image_size);
    let protos: Vec<SampleTensor> = (0..spec.class_count)
        .map(|c| render_shape(c, geo, spec.image_size))
        .collect();
    let mut best = f64::INFINITY;
    for i in 0..protos.len() {
        for j in i + 1..protos.len() {
            let d = protos[i].sub(&protos[j]).expect("same shape").norm() as f64;
            best = best.min(d);
        }
    }
    best
}

/// A deterministic, class-balanced split: sample `i` has label
/// `i % class_count` and its own random stream.
pub fn generate_source(spec: &SourceSpec, split: Split, seed: u64) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    if spec.class_count > 1 {
        let sep = prototype_separation(spec);
        if sep <= PROTOTYPE_MARGIN {
            return Err(GdaError::InvalidParameter(format!(
                "class prototypes only {sep:.3} apart"
            )));
        }
    }
    let centre = Geometry::centred(spec.image_size);
    let n = spec.class_count * spec.samples_per_class;
    let samples = (0..n)
        .map(|i| {
            let id = i as u64;
            let mut rng = stream(seed, split.stream_base() + id, Purpose::Data);
            let label = i % spec.class_count;
            let j = spec.jitter_px;
            let (slo, shi) = spec.scale_range;
            // f32-representable so geometry survives the container exactly
            let f = |v: f64| v as f32 as f64;
            let geometry = Geometry {
                cy: f(centre.cy + if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 }),
                cx: f(centre.cx + if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 }),
                scale: f(if shi > slo { rng.random_range(slo..=shi) } else { slo }),
            };
            let mut x = render_shape(label, geometry, spec.image_size);
            if spec.texture_amplitude > 0.0 {
                let tex = smooth_texture(spec.image_size, spec.texture_amplitude, &mut rng);
                for (v, t) in x.data_mut().iter_mut().zip(tex) {
                    *v = (*v as f64 + t).clamp(-1.0, 1.0) as f32;
                }
            }
            LabeledSample {
                id,
                label,
                geometry,
                x,
            }
        })
        .collect();
    Ok(samples)
}

/// Class whose noiseless rendering at `geo` is nearest to `x` in L2.
pub fn nearest_prototype(x: &SampleTensor, geo: Geometry, class_count: usize) -> usize {
    let size = (x.shape()[1], x.shape()[2]);
    (0..class_count)
        .map(|c| {
            let d = render_shape(c, geo, size).sub(x).expect("same shape").norm();
            (c, d)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(c, _)| c)
        .expect("at least one class")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ShiftFamily {
    GaussianNoise,
    ShotNoise,
    BoxBlur,
    MotionBlur,
    Contrast,
    Brightness,
    Pixelate,
    Elastic,
    EdgeSketch,
    Inversion,
    TextureOverlay,
}

impl ShiftFamily {
    pub const CORRUPTIONS: [ShiftFamily; 8] = [
        ShiftFamily::GaussianNoise,
        ShiftFamily::ShotNoise,
        ShiftFamily::BoxBlur,
        ShiftFamily::MotionBlur,
        ShiftFamily::Contrast,
        ShiftFamily::Brightness,
        ShiftFamily::Pixelate,
        ShiftFamily::Elastic,
    ];

    pub const STYLES: [ShiftFamily; 3] = [
        ShiftFamily::EdgeSketch,
        ShiftFamily::Inversion,
        ShiftFamily::TextureOverlay,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShiftFamily::GaussianNoise => "gaussian_noise",
            ShiftFamily::ShotNoise => "shot_noise",
            ShiftFamily::BoxBlur => "box_blur",
            ShiftFamily::MotionBlur => "motion_blur",
            ShiftFamily::Contrast => "contrast",
            ShiftFamily::Brightness => "brightness",
            ShiftFamily::Pixelate => "pixelate",
            ShiftFamily::Elastic => "elastic",
            ShiftFamily::EdgeSketch => "edge_sketch",
            ShiftFamily::Inversion => "inversion",
            ShiftFamily::TextureOverlay => "texture_overlay",
        }
    }

    pub fn is_corruption(self) -> bool {
        Self::CORRUPTIONS.contains(&self)
    }

    /// Parameter for severities 1..=5. Units per family: noise std in
    /// [-1, 1] units; photon count at full white; box half-width and
    /// motion kernel width in pixels; contrast factor; brightness divisor of the
    /// distance to white; pixelation cell size; elastic displacement
    /// amplitude in pixels; blend weight toward the style rendering;
    /// overlay amplitude.
    pub fn table(self) -> [f64; 5] {
        match self {
            ShiftFamily::GaussianNoise => [0.3, 0.45, 0.65, 0.8, 1.0],
            ShiftFamily::ShotNoise => [16.0, 8.0, 3.5, 2.5, 1.5],
            ShiftFamily::BoxBlur => [0.4, 0.65, 0.9, 1.5, 2.5],
            ShiftFamily::MotionBlur => [2.5, 3.0, 3.75, 5.5, 8.0],
            ShiftFamily::Contrast => [0.85, 0.7, 0.52, 0.4, 0.3],
            ShiftFamily::Brightness => [1.2, 1.4, 1.65, 2.1, 2.5],
            ShiftFamily::Pixelate => [1.3, 1.5, 2.0, 2.7, 3.5],
            ShiftFamily::Elastic => [0.5, 0.75, 1.05, 1.6, 2.2],
            ShiftFamily::EdgeSketch => [0.2, 0.3, 0.4, 0.55, 0.75],
            ShiftFamily::Inversion => [0.15, 0.22, 0.27, 0.35, 0.5],
            ShiftFamily::TextureOverlay => [0.4, 0.55, 0.75, 0.95, 1.2],
        }
    }

    /// Parameter value at which the family leaves images unchanged.
    pub fn neutral(self) -> f64 {
        match self {
            ShiftFamily::Contrast | ShiftFamily::Brightness | ShiftFamily::Pixelate => 1.0,
            ShiftFamily::ShotNoise => f64::INFINITY,
            _ => 0.0,
        }
    }
}

impl fmt::Display for ShiftFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShiftFamily {
    type Err = GdaError;

    fn from_str(s: &str) -> Result<Self> {
        Self::CORRUPTIONS
            .into_iter()
            .chain(Self::STYLES)
            .find(|f| f.name() == s)
            .ok_or_else(|| GdaError::InvalidParameter(format!("unknown shift family {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ShiftSpec {
    pub family: ShiftFamily,
    pub severity: u8,
}

impl ShiftSpec {
    pub fn new(family: ShiftFamily, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(GdaError::InvalidParameter(format!(
                "severity {severity} outside 1..=5"
            )));
        }
        Ok(Self { family, severity })
    }

    pub fn parameter(&self) -> f64 {
        self.family.table()[self.severity as usize - 1]
    }
}

fn to_unit(v: f32) -> f64 {
    (v as f64 + 1.0) / 2.0
}

fn from_unit(u: f64) -> f32 {
    (2.0 * u - 1.0) as f32
}

/// Applies `family` with an explicit parameter; output clamped to [-1, 1].
pub fn apply_family(
    x: &SampleTensor,
    family: ShiftFamily,
    param: f64,
    rng: &mut StreamRng,
) -> Result<SampleTensor> {
    if x.shape().len() != 3 {
        return Err(GdaError::ShapeMismatch {
            expected: vec![1, 16, 16],
            got: x.shape().to_vec(),
        });
    }
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let tau = std::f64::consts::TAU;
    let out = match family {
        ShiftFamily::GaussianNoise => {
            let mut out = x.clone();
            for v in out.data_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = (*v as f64 + param * z) as f32;
            }
            out
        }
        ShiftFamily::ShotNoise => {
            if param.is_infinite() {
                x.clone()
            } else {
                let mut out = x.clone();
                for v in out.data_mut() {
                    let lam = param * to_unit(*v).max(0.0);
                    let k = if lam > 0.0 {
                        Poisson::new(lam).expect("positive rate").sample(rng)
                    } else {
                        0.0
                    };
                    *v = from_unit(k / param);
                }
                out
            }
        }
        ShiftFamily::BoxBlur => {
            let k = box_kernel(param);
            separable_blur(x, &k, &k)
        }
        ShiftFamily::MotionBlur => {
            // a box of total width `param`, along a random axis
            let k = box_kernel((param.max(1.0) - 1.0) / 2.0);
            if rng.random_bool(0.5) {
                separable_blur(x, &[1.0], &k)
            } else {
                separable_blur(x, &k, &[1.0])
            }
        }
        ShiftFamily::Contrast => {
            let m = x.mean();
            let c = param as f32;
            x.map(|v| m + c * (v - m))
        }
        ShiftFamily::Brightness => x.map(|v| from_unit(1.0 - (1.0 - to_unit(v)) / param)),
        ShiftFamily::Pixelate => pixelate(x, param),
        ShiftFamily::Elastic => {
            if param == 0.0 {
                x.clone()
            } else {
                let waves: Vec<(f64, f64, f64, f64)> = (0..4)
                    .map(|_| {
                        (
                            rng.random_range(0.5..=1.5),
                            rng.random_range(0.5..=1.5),
                            rng.random_range(0.0..tau),
                            rng.random_range(0.0..tau),
                        )
                    })
                    .collect();
                let disp = |y: f64, x: f64, k: usize| {
                    let (fa, fb, p, _) = waves[k];
                    let (fc, fd, _, q) = waves[k + 1];
                    0.5 * param
                        * ((tau * (fa * y / h as f64 + fb * x / w as f64) + p).sin()
                            + (tau * (fc * y / h as f64 - fd * x / w as f64) + q).sin())
                };
                warp_map::<f32>(h, w, h, w, |y, xx| (y + disp(y, xx, 0), xx + disp(y, xx, 2))).apply(x)
            }
        }
        ShiftFamily::EdgeSketch => {
            let edges = sobel_magnitude(x);
            x.zip_map(&edges, |v, e| {
                let sketch = 1.0 - 2.0 * (e as f64 / 4.0).min(1.0);
                ((1.0 - param) * v as f64 + param * sketch) as f32
            })?
        }
        ShiftFamily::Inversion => x.map(|v| ((1.0 - 2.0 * param) * v as f64) as f32),
        ShiftFamily::TextureOverlay => {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let freq: f64 = rng.random_range(0.35..=0.45);
            let phase: f64 = rng.random_range(0.0..tau);
            let (s, c) = angle.sin_cos();
            let mut out = x.clone();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                let p = i % (h * w);
                let (y, xx) = ((p / w) as f64, (p % w) as f64);
                *v = (*v as f64 + param * (tau * freq * (c * y + s * xx) + phase).sin()) as f32;
            }
            out
        }
    };
    Ok(out.clamp(-1.0, 1.0))
}

pub fn apply_shift(x: &SampleTensor, shift: ShiftSpec, rng: &mut StreamRng) -> Result<SampleTensor> {
    ShiftSpec::new(shift.family, shift.severity)?;
    apply_family(x, shift.family, shift.parameter(), rng)
}

/// A shifted copy of a clean test sample.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchEntry {
    pub id: u64,
    pub clean_id: u64,
    pub label: usize,
    pub shift: ShiftSpec,
    pub x: SampleTensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub clean: Vec<LabeledSample>,
    pub entries: Vec<BenchEntry>,
}

/// Pairs the first `n_per_shift` clean samples with a shifted version
/// under every shift; entry `k * n + i` is shift `k` of clean sample `i`.
pub fn build_benchmark(
    clean: &[LabeledSample],
    shifts: &[ShiftSpec],
    n_per_shift: usize,
    seed: u64,
) -> Result<Benchmark> {
    if shifts.is_empty() {
        return Err(GdaError::InvalidParameter("benchmark needs at least one shift".into()));
    }
    if n_per_shift == 0 || n_per_shift > clean.len() {
        return Err(GdaError::InvalidParameter(format!(
            "n_per_shift {n_per_shift} with {} clean samples",
            clean.len()
        )));
    }
    let base = &clean[..n_per_shift];
    let mut entries = Vec::with_capacity(shifts.len() * n_per_shift);
    for (k, &shift) in shifts.iter().enumerate() {
        for (i, s) in base.iter().enumerate() {
            let id = (k * n_per_shift + i) as u64;
            let x = apply_shift(&s.x, shift, &mut stream(seed, id, Purpose::Shift))?;
            entries.push(BenchEntry {
                id,
                clean_id: s.id,
                label: s.label,
                shift,
                x,
            });
        }
    }
    Ok(Benchmark {
        clean: base.to_vec(),
        entries,
    })
}

/// One manifest line. Clean rows carry `family=none severity=0` and their
/// offset indexes the `clean` tensor; shifted rows index `shifted`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: u64,
    pub clean_id: u64,
    pub label: usize,
    pub shift: Option<ShiftSpec>,
    pub offset: usize,
}

impl ManifestEntry {
    fn to_line(&self) -> String {
        let (family, severity) = match self.shift {
            Some(s) => (s.family.name(), s.severity),
            None => ("none", 0),
        };
        format!(
            "id={} clean_id={} label={} family={} severity={} offset={}",
            self.id, self.clean_id, self.label, family, severity, self.offset
        )
    }

    fn parse(line: &str) -> Result<Self> {
        let bad = || GdaError::InvalidParameter(format!("bad manifest line {line:?}"));
        let mut fields = [""; 6];
        let keys = ["id", "clean_id", "label", "family", "severity", "offset"];
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != keys.len() {
            return Err(bad());
        }
        for ((slot, part), key) in fields.iter_mut().zip(&parts).zip(keys) {
            *slot = part
                .strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .ok_or_else(bad)?;
        }
        let num = |s: &str| s.parse::<u64>().map_err(|_| bad());
        let severity = num(fields[4])? as u8;
        let shift = match fields[3] {
            "none" if severity == 0 => None,
            "none" => return Err(bad()),
            name => Some(ShiftSpec::new(name.parse()?, severity)?),
        };
        Ok(Self {
            id: num(fields[0])?,
            clean_id: num(fields[1])?,
            label: num(fields[2])? as usize,
            shift,
            offset: num(fields[5])? as usize,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&e.to_line());
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(ManifestEntry::parse)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries })
    }
}

impl Benchmark {
    pub fn manifest(&self) -> Manifest {
        let clean = self.clean.iter().enumerate().map(|(i, s)| ManifestEntry {
            id: s.id,
            clean_id: s.id,
            label: s.label,
            shift: None,
            offset: i,
        });
        let shifted = self.entries.iter().enumerate().map(|(i, e)| ManifestEntry {
            id: e.id,
            clean_id: e.clean_id,
            label: e.label,
            shift: Some(e.shift),
            offset: i,
        });
        Manifest {
            entries: clean.chain(shifted).collect(),
        }
    }

    /// Writes the `clean` and `shifted` tensors plus clean geometry.
    pub fn write_tensors<W: Write>(&self, w: W) -> Result<()> {
        let clean: Vec<&SampleTensor> = self.clean.iter().map(|s| &s.x).collect();
        let shifted: Vec<&SampleTensor> = self.entries.iter().map(|e| &e.x).collect();
        let records = vec![
            Record {
                name: "clean".into(),
                tensor: Tensor::stack(&clean)?,
            },
            Record {
                name: "clean_geometry".into(),
                tensor: geometry_tensor(&self.clean),
            },
            Record {
                name: "shifted".into(),
                tensor: Tensor::stack(&shifted)?,
            },
        ];
        write_container(w, &records)
    }

    pub fn read<R: Read>(manifest: &Manifest, r: R) -> Result<Self> {
        let records = read_container(r)?;
        let clean_t = find_record(&records, "clean")?;
        let geo_t = find_record(&records, "clean_geometry")?;
        let shifted_t = find_record(&records, "shifted")?;
        let mut clean = Vec::new();
        let mut entries = Vec::new();
        for e in &manifest.entries {
            match e.shift {
                None => clean.push(LabeledSample {
                    id: e.id,
                    label: e.label,
                    geometry: geometry_at(geo_t, e.offset)?,
                    x: row(clean_t, e.offset)?,
                }),
                Some(shift) => entries.push(BenchEntry {
                    id: e.id,
                    clean_id: e.clean_id,
                    label: e.label,
                    shift,
                    x: row(shifted_t, e.offset)?,
                }),
            }
        }
        Ok(Self { clean, entries })
    }
}

fn find_record<'a>(records: &'a [Record], name: &str) -> Result<&'a Tensor<f32>> {
    records
        .iter()
        .find(|r| r.name == name)
        .map(|r| &r.tensor)
        .ok_or_else(|| GdaError::Checkpoint(format!("missing record {name}")))
}

fn row(t: &Tensor<f32>, i: usize) -> Result<SampleTensor> {
    if i >= t.shape()[0] {
        return Err(GdaError::Checkpoint(format!("offset {i} out of range")));
    }
    Ok(t.index_outer(i))
}

fn geometry_tensor(samples: &[LabeledSample]) -> Tensor<f32> {
    let data = samples
        .iter()
        .flat_map(|s| [s.geometry.cy as f32, s.geometry.cx as f32, s.geometry.scale as f32])
        .collect();
    Tensor::new(&[samples.len(), 3], data).expect("geometry shape")
}

fn geometry_at(t: &Tensor<f32>, i: usize) -> Result<Geometry> {
    let r = row(t, i)?;
    let d = r.data();
    Ok(Geometry {
        cy: d[0] as f64,
        cx: d[1] as f64,
        scale: d[2] as f64,
    })
}

/// Persists a labeled split as `x`, `label` and `geometry` records.
pub fn write_dataset<W: Write>(w: W, samples: &[LabeledSample]) -> Result<()> {
    let xs: Vec<&SampleTensor> = samples.iter().map(|s| &s.x).collect();
    let labels = samples.iter().map(|s| s.label as f32).collect();
    let records = vec![
        Record {
            name: "x".into(),
            tensor: Tensor::stack(&xs)?,
        },
        Record {
            name: "label".into(),
            tensor: Tensor::new(&[samples.len()], labels)?,
        },
        Record {
            name: "geometry".into(),
            tensor: geometry_tensor(samples),
        },
    ];
    write_container(w, &records)
}

pub fn read_dataset<R: Read>(r: R) -> Result<Vec<LabeledSample>> {
    let records = read_container(r)?;
    let x = find_record(&records, "x")?;
    let labels = find_record(&records, "label")?;
    let geo = find_record(&records, "geometry")?;
    (0..labels.len())
        .map(|i| {
            Ok(LabeledSample {
                id: i as u64,
                label: labels.data()[i] as usize,
                geometry: geometry_at(geo, i)?,
                x: row(x, i)?,
            })
        })
        .collect()
}

/// Binary PGM grid: one row per severity (1..=5), one column per sample,
/// with a one-pixel mid-grey gutter.
pub fn audit_sheet(samples: &[LabeledSample], family: ShiftFamily, seed: u64) -> Result<Vec<u8>> {
    if samples.is_empty() {
        return Err(GdaError::EmptyDataset);
    }
    let (h, w) = (samples[0].x.shape()[1], samples[0].x.shape()[2]);
    let cols = samples.len();
    let (gh, gw) = (5 * (h + 1) + 1, cols * (w + 1) + 1);
    let mut pix = vec![128u8; gh * gw];
    for sev in 1..=5u8 {
        let shift = ShiftSpec::new(family, sev)?;
        for (c, s) in samples.iter().enumerate() {
            let mut rng = stream(seed, (sev as u64) << 32 | s.id, Purpose::Shift);
            let x = apply_shift(&s.x, shift, &mut rng)?;
            let (oy, ox) = ((sev as usize - 1) * (h + 1) + 1, c * (w + 1) + 1);
            for y in 0..h {
                for xx in 0..w {
                    let v = x.data()[y * w + xx];
                    pix[(oy + y) * gw + ox + xx] = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    let mut out = format!("P5\n{gw} {gh}\n255\n").into_bytes();
    out.extend_from_slice(&pix);
    Ok(out)
}
