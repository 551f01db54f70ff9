use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{render_vehicle, VehicleSpec};
use super::{AnnotationKind, Labels, Schema};
use crate::error::{Error, Result};

/// Per-dataset acquisition conditions; differences between datasets act as domain shift.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainStyle {
    /// Multiplies every rendered intensity.
    pub brightness: f64,
    /// Mean background gray level.
    pub background: u8,
    /// Background noise amplitude (uniform ±).
    pub noise: u8,
    /// Sensor grain over the whole image (uniform ±).
    pub grain: u8,
}

impl Default for DomainStyle {
    fn default() -> Self {
        Self { brightness: 1.0, background: 110, noise: 12, grain: 4 }
    }
}

/// Which annotation kinds a dataset exposes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visibility {
    pub color: bool,
    #[serde(rename = "type")]
    pub body_type: bool,
    pub make: bool,
    pub model: bool,
}

impl Visibility {
    pub const ALL: Visibility = Visibility { color: true, body_type: true, make: true, model: true };

    pub fn shows(&self, kind: AnnotationKind) -> bool {
        match kind {
            AnnotationKind::Color => self.color,
            AnnotationKind::Type => self.body_type,
            AnnotationKind::Make => self.make,
            AnnotationKind::Model => self.model,
        }
    }
}

impl Default for Visibility {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: String,
    pub count: usize,
    #[serde(default)]
    pub visibility: Visibility,
    #[serde(default)]
    pub style: DomainStyle,
    /// Restrict sampling to these makes (all makes when absent).
    #[serde(default)]
    pub makes: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub seed: u64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default)]
    pub schema: Schema,
    pub datasets: Vec<DatasetConfig>,
}

fn default_image_size() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataRecord {
    pub id: String,
    pub image: RgbImage,
    pub labels: Labels,
    /// Complete ground truth when known (synthetic data); labeling code never reads it.
    pub truth: Option<Labels>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub schema: Schema,
    pub image_size: usize,
    pub records: Vec<DataRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Fraction of records carrying `kind`.
    pub fn coverage(&self, kind: AnnotationKind) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.labels.get(kind).is_some()).count() as f64 / self.records.len() as f64
    }

    /// True when every record carries `kind`.
    pub fn fully_labeled(&self, kind: AnnotationKind) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.labels.get(kind).is_some())
    }

    /// Deterministic split into `(train, held_out)` with `held_out_fraction` of records.
    pub fn split(&self, held_out_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut idx: Vec<usize> = (0..self.records.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let held = ((self.records.len() as f64) * held_out_fraction).round() as usize;
        let (held_idx, train_idx) = idx.split_at(held.min(idx.len()));
        let pick = |ids: &[usize], suffix: &str| {
            let mut ids = ids.to_vec();
            ids.sort_unstable();
            Dataset {
                name: format!("{}-{suffix}", self.name),
                schema: self.schema,
                image_size: self.image_size,
                records: ids.iter().map(|&i| self.records[i].clone()).collect(),
            }
        };
        (pick(train_idx, "train"), pick(held_idx, "heldout"))
    }

    /// Concatenates datasets sharing schema and image size.
    pub fn union(name: &str, parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or(Error::EmptyDataset)?;
        if parts.iter().any(|d| d.schema != first.schema || d.image_size != first.image_size) {
            return Err(Error::Config("cannot merge datasets with different schema or image size".into()));
        }
        Ok(Dataset {
            name: name.to_string(),
            schema: first.schema,
            image_size: first.image_size,
            records: parts.iter().flat_map(|d| d.records.iter().cloned()).collect(),
        })
    }
}

/// Balanced class sequence: every class appears ⌊n/k⌋ or ⌈n/k⌉ times, in shuffled order.
fn balanced(classes: &[usize], n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order = classes.to_vec();
    order.shuffle(rng);
    let mut out: Vec<usize> = order.iter().copied().cycle().take(n).collect();
    out.shuffle(rng);
    out
}

/// Like [`balanced`] over models, with the partial cycle chosen greedily so that the
/// make, type and variant marginals also stay within one of each other.
fn balanced_models(models: &[usize], schema: &Schema, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order = models.to_vec();
    order.shuffle(rng);
    let mut out: Vec<usize> = Vec::with_capacity(n);
    for _ in 0..n / models.len() {
        out.extend_from_slice(&order);
    }
    let mut counts = [vec![0usize; schema.makes], vec![0usize; schema.types], vec![0usize; schema.variants]];
    let mut used = vec![false; order.len()];
    for _ in 0..n % models.len() {
        let score = |m: usize| {
            let (a, b, c) = schema.decode_model(m);
            counts[0][a] + counts[1][b] + counts[2][c]
        };
        let pick = (0..order.len()).filter(|&i| !used[i]).min_by_key(|&i| score(order[i])).unwrap();
        used[pick] = true;
        let (a, b, c) = schema.decode_model(order[pick]);
        counts[0][a] += 1;
        counts[1][b] += 1;
        counts[2][c] += 1;
        out.push(order[pick]);
    }
    out.shuffle(rng);
    out
}

/// Renders one dataset. Visibility masks only hide labels; image bytes are unaffected.
pub fn generate_dataset(config: &DatasetConfig, schema: &Schema, image_size: usize, seed: u64) -> Result<Dataset> {
    schema.validate()?;
    if config.count == 0 {
        return Err(Error::Config(format!("dataset `{}` has count 0", config.name)));
    }
    let makes = match &config.makes {
        Some(list) => {
            if list.is_empty() {
                return Err(Error::Balance(format!("dataset `{}` allows no makes", config.name)));
            }
            if let Some(&bad) = list.iter().find(|&&m| m >= schema.makes) {
                return Err(Error::Balance(format!("dataset `{}` lists make {bad} of {}", config.name, schema.makes)));
            }
            list.clone()
        }
        None => (0..schema.makes).collect(),
    };
    let models: Vec<usize> = makes
        .iter()
        .flat_map(|&m| (0..schema.types).flat_map(move |t| (0..schema.variants).map(move |v| (m, t, v))))
        .map(|(m, t, v)| schema.model_id(m, t, v))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model_seq = balanced_models(&models, schema, config.count, &mut rng);
    let color_seq = balanced(&(0..schema.colors).collect::<Vec<_>>(), config.count, &mut rng);
    let mut records = Vec::with_capacity(config.count);
    for (i, (&model, &color)) in model_seq.iter().zip(&color_seq).enumerate() {
        let (make, body_type, variant) = schema.decode_model(model);
        let spec = VehicleSpec::sample(color, body_type, make, variant, &mut rng);
        let image = render_vehicle(&spec, schema, image_size, &config.style)?;
        let truth = Labels::of_spec(&spec, schema);
        let mut labels = Labels::default();
        for kind in AnnotationKind::ALL {
            if config.visibility.shows(kind) {
                labels.set(kind, truth.get(kind));
            }
        }
        records.push(DataRecord { id: format!("{}-{i:05}", config.name), image, labels, truth: Some(truth) });
    }
    Ok(Dataset { name: config.name.clone(), schema: *schema, image_size, records })
}

/// Generates every dataset in `config`; dataset `i` draws from seed `(config.seed, i)`.
pub fn generate_datasets(config: &GenerationConfig) -> Result<Vec<Dataset>> {
    config
        .datasets
        .iter()
        .enumerate()
        .map(|(i, d)| generate_dataset(d, &config.schema, config.image_size, crate::derive_seed(config.seed, i as u64)))
        .collect()
}


#[derive(Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    image_path: String,
    labels: Labels,
}

#[derive(Serialize, Deserialize)]
struct TruthLine {
    id: String,
    labels: Labels,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    name: String,
    schema: Schema,
    image_size: usize,
}

const MANIFEST: &str = "manifest.jsonl";
const TRUTH: &str = "ground_truth.jsonl";
const META: &str = "dataset.json";

/// Writes `manifest.jsonl`, `images/*.png`, `dataset.json` and, when known, `ground_truth.jsonl`.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    let meta = DatasetMeta { name: dataset.name.clone(), schema: dataset.schema, image_size: dataset.image_size };
    fs::write(dir.join(META), serde_json::to_vec_pretty(&meta)?)?;
    let mut manifest = BufWriter::new(fs::File::create(dir.join(MANIFEST))?);
    let has_truth = dataset.records.iter().all(|r| r.truth.is_some());
    let mut truth = if has_truth { Some(BufWriter::new(fs::File::create(dir.join(TRUTH))?)) } else { None };
    for r in &dataset.records {
        let image_path = format!("images/{}.png", r.id);
        r.image.save_with_format(dir.join(&image_path), image::ImageFormat::Png)?;
        serde_json::to_writer(&mut manifest, &ManifestLine { id: r.id.clone(), image_path, labels: r.labels })?;
        manifest.write_all(b"\n")?;
        if let (Some(w), Some(t)) = (truth.as_mut(), r.truth) {
            serde_json::to_writer(&mut *w, &TruthLine { id: r.id.clone(), labels: t })?;
            w.write_all(b"\n")?;
        }
    }
    manifest.flush()?;
    if let Some(mut w) = truth {
        w.flush()?;
    }
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: n + 1,
            detail: e.to_string(),
        })?;
        out.push(parsed);
    }
    Ok(out)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META);
    let meta: DatasetMeta =
        serde_json::from_slice(&fs::read(&meta_path).map_err(|_| Error::MissingFile(meta_path.clone()))?)?;
    let manifest_path = dir.join(MANIFEST);
    let lines: Vec<ManifestLine> = read_jsonl(&manifest_path)?;
    let truth_path = dir.join(TRUTH);
    let truths: Option<Vec<TruthLine>> = truth_path.exists().then(|| read_jsonl(&truth_path)).transpose()?;
    if let Some(t) = &truths {
        if t.len() != lines.len() {
            return Err(Error::Manifest {
                path: truth_path,
                line: t.len(),
                detail: format!("{} truth lines for {} records", t.len(), lines.len()),
            });
        }
    }
    let mut records = Vec::with_capacity(lines.len());
    for (i, line) in lines.into_iter().enumerate() {
        line.labels.validate(&meta.schema).map_err(|e| Error::Manifest {
            path: manifest_path.clone(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        let path: PathBuf = dir.join(&line.image_path);
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let image = image::open(&path)?.to_rgb8();
        if image.width() as usize != meta.image_size || image.height() as usize != meta.image_size {
            return Err(Error::Manifest {
                path: manifest_path.clone(),
                line: i + 1,
                detail: format!("image {}×{} in a {}-pixel dataset", image.width(), image.height(), meta.image_size),
            });
        }
        let truth = truths.as_ref().map(|t| t[i].labels);
        records.push(DataRecord { id: line.id, image, labels: line.labels, truth });
    }
    Ok(Dataset { name: meta.name, schema: meta.schema, image_size: meta.image_size, records })
}
