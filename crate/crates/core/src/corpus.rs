//! Synthetic (images, indicator states, report) records and their JSON-lines
//! interchange format.
//!
//! Each synthetic image is a grid with one cell per indicator. The cell's
//! intensity encodes the indicator state (negative 0.2, uncertain 0.5,
//! positive 0.8) and Gaussian pixel noise is added on top, clamped to
//! `[0, 1]`. Reports are the concatenated template sentences of the drawn
//! states, so the label → report map is exact.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::templates::IndicatorTemplates;

/// One grayscale view, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Visual {
    Images(Vec<Image>),
    Features(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRecord {
    pub id: String,
    pub visual: Visual,
    /// `T × M` one-hot rows.
    pub labels: Vec<Vec<u8>>,
    pub report: String,
}

impl ReportRecord {
    /// Index of the hot entry of every label row.
    pub fn states(&self) -> Vec<usize> {
        self.labels
            .iter()
            .map(|row| row.iter().position(|&x| x == 1).unwrap_or(0))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::Validation {
            id: self.id.clone(),
            reason,
        };
        if self.report.trim().is_empty() {
            return Err(fail("empty report".into()));
        }
        let m = self.labels.first().map_or(0, Vec::len);
        if self.labels.is_empty() || m == 0 {
            return Err(fail("no labels".into()));
        }
        for (t, row) in self.labels.iter().enumerate() {
            if row.len() != m {
                return Err(fail(format!("label row {t} has {} states, expected {m}", row.len())));
            }
            if row.iter().any(|&x| x > 1) || row.iter().map(|&x| x as usize).sum::<usize>() != 1 {
                return Err(fail(format!("label row {t} is not one-hot")));
            }
        }
        match &self.visual {
            Visual::Images(images) => {
                if images.is_empty() {
                    return Err(fail("empty image list".into()));
                }
                for (i, im) in images.iter().enumerate() {
                    if im.h == 0 || im.w == 0 || im.pixels.len() != im.h * im.w {
                        return Err(fail(format!("image {i} pixel count does not match {}x{}", im.h, im.w)));
                    }
                    if im.pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
                        return Err(fail(format!("image {i} has pixels outside [0, 1]")));
                    }
                }
            }
            Visual::Features(f) => {
                if f.is_empty() || f.iter().any(|x| !x.is_finite()) {
                    return Err(fail("features must be nonempty and finite".into()));
                }
            }
        }
        Ok(())
    }
}

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub indicators: usize,
    pub states: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Side length in pixels of one indicator cell.
    pub cell_size: usize,
    /// Views rendered per record.
    pub views: usize,
    pub noise_std: f64,
    /// `T × M` state distribution per indicator.
    pub priors: Vec<Vec<f64>>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec::new(11, 3, 0)
    }
}

impl CorpusSpec {
    /// Default priors favour "negative" as in real reports while keeping
    /// every state common enough to learn.
    pub fn new(indicators: usize, states: usize, seed: u64) -> Self {
        let row = if states == 3 {
            vec![0.25, 0.45, 0.30]
        } else {
            vec![1.0 / states as f64; states]
        };
        CorpusSpec {
            indicators,
            states,
            seed,
            n_train: 256,
            n_val: 32,
            n_test: 64,
            cell_size: 4,
            views: 2,
            noise_std: 0.05,
            priors: vec![row; indicators],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.indicators == 0 || self.states < 2 {
            return Err(Error::Config("need at least one indicator and two states".into()));
        }
        if self.n_train == 0 || self.cell_size == 0 || self.views == 0 {
            return Err(Error::Config("counts and sizes must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config("noise std must be finite and non-negative".into()));
        }
        if self.priors.len() != self.indicators {
            return Err(Error::Config("one prior row per indicator required".into()));
        }
        for (t, p) in self.priors.iter().enumerate() {
            let ok = p.len() == self.states
                && p.iter().all(|&x| (0.0..=1.0).contains(&x))
                && (p.iter().sum::<f64>() - 1.0).abs() < 1e-9;
            if !ok {
                return Err(Error::Config(format!("prior row {t} is not a probability vector")));
            }
        }
        Ok(())
    }

    /// `(rows, cols)` of the indicator grid.
    pub fn grid(&self) -> (usize, usize) {
        let cols = (self.indicators as f64).sqrt().ceil() as usize;
        (self.indicators.div_ceil(cols), cols)
    }

    /// `(height, width)` of each rendered view.
    pub fn image_size(&self) -> (usize, usize) {
        let (r, c) = self.grid();
        (r * self.cell_size, c * self.cell_size)
    }

    /// Mean cell intensity for a state id.
    pub fn intensity(&self, state: usize) -> f64 {
        if self.states == 3 {
            // uncertain, negative, positive
            [0.5, 0.2, 0.8][state]
        } else {
            0.2 + 0.6 * state as f64 / (self.states - 1) as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<ReportRecord>,
    pub val: Vec<ReportRecord>,
    pub test: Vec<ReportRecord>,
}

/// Draws all three splits from one seeded stream, train first.
pub fn generate(spec: &CorpusSpec, templates: &IndicatorTemplates) -> Result<Corpus> {
    spec.validate()?;
    if templates.num_indicators() != spec.indicators || templates.num_states() != spec.states {
        return Err(Error::Config(format!(
            "templates cover {}x{} pairs, spec asks for {}x{}",
            templates.num_indicators(),
            templates.num_states(),
            spec.indicators,
            spec.states
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut split = |name: &str, n: usize| -> Vec<ReportRecord> {
        (0..n)
            .map(|i| {
                let states: Vec<usize> = spec.priors.iter().map(|p| sample_categorical(p, &mut rng)).collect();
                let images = (0..spec.views).map(|_| render(spec, &states, &mut rng)).collect();
                let labels = states
                    .iter()
                    .map(|&m| (0..spec.states).map(|k| u8::from(k == m)).collect())
                    .collect();
                ReportRecord {
                    id: format!("{name}-{i:05}"),
                    visual: Visual::Images(images),
                    labels,
                    report: templates.report(&states),
                }
            })
            .collect()
    };
    let train = split("train", spec.n_train);
    let val = split("val", spec.n_val);
    let test = split("test", spec.n_test);
    Ok(Corpus { train, val, test })
}

fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // rounding slack: fall back to the last state with mass
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

/// Renders one view: each indicator cell at its state intensity plus noise.
/// Cells beyond the last indicator stay dark.
pub fn render<R: Rng + ?Sized>(spec: &CorpusSpec, states: &[usize], rng: &mut R) -> Image {
    let (h, w) = spec.image_size();
    let (_, cols) = spec.grid();
    let cs = spec.cell_size;
    let noise = (spec.noise_std > 0.0).then(|| Normal::new(0.0, spec.noise_std).unwrap());
    let mut pixels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let cell = (y / cs) * cols + x / cs;
            let base = states.get(cell).map_or(0.0, |&m| spec.intensity(m));
            let n = noise.map_or(0.0, |d| d.sample(rng));
            pixels.push((base + n).clamp(0.0, 1.0));
        }
    }
    Image { h, w, pixels }
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    features: Option<&'a [f64]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    images: Option<&'a [Image]>,
    labels: &'a [Vec<u8>],
    report: &'a str,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordIn {
    id: String,
    features: Option<Vec<f64>>,
    images: Option<Vec<Image>>,
    labels: Vec<Vec<f64>>,
    report: String,
}

/// One JSON object per record, fields in the fixed order
/// `id`, `features`|`images`, `labels`, `report`.
pub fn to_json_line(record: &ReportRecord) -> Result<String> {
    let (features, images) = match &record.visual {
        Visual::Features(f) => (Some(f.as_slice()), None),
        Visual::Images(i) => (None, Some(i.as_slice())),
    };
    Ok(serde_json::to_string(&RecordOut {
        id: &record.id,
        features,
        images,
        labels: &record.labels,
        report: &record.report,
    })?)
}

pub fn from_json_line(line: &str, line_no: usize) -> Result<ReportRecord> {
    let raw: RecordIn = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        reason: e.to_string(),
    })?;
    let invalid = |reason: &str| Error::Validation {
        id: raw.id.clone(),
        reason: reason.to_string(),
    };
    let visual = match (raw.features.clone(), raw.images.clone()) {
        (Some(f), None) => Visual::Features(f),
        (None, Some(i)) => Visual::Images(i),
        _ => return Err(invalid("exactly one of \"features\" or \"images\" is required")),
    };
    let mut labels = Vec::with_capacity(raw.labels.len());
    for (t, row) in raw.labels.iter().enumerate() {
        if row.iter().any(|&x| x != 0.0 && x != 1.0) {
            return Err(invalid(&format!("label row {t} is not one-hot: {row:?}")));
        }
        labels.push(row.iter().map(|&x| x as u8).collect());
    }
    let record = ReportRecord {
        id: raw.id,
        visual,
        labels,
        report: raw.report,
    };
    record.validate()?;
    Ok(record)
}

pub fn save_jsonl(records: &[ReportRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for r in records {
        writeln!(out, "{}", to_json_line(r)?)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads records, skipping blank lines. Errors carry the 1-based line number
/// or the offending record id.
pub fn load_jsonl(path: &Path) -> Result<Vec<ReportRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(from_json_line(&line, i + 1)?);
    }
    Ok(records)
}
