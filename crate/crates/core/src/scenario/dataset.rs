//! Windowed bimodal samples, their on-disk layout, and ingestion of
//! externally collected sequences.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! meta.json                   {Q, M, d_n, T, P, sample_rate, seed, H, W}
//! manifest.jsonl              one record per sample
//! numeric/<sample>.csv        T rows x d_n columns, 9 significant digits
//! images/<sample>_<t>.pgm     binary PGM, one per frame
//! trajectories/<id>.csv       generating flight (synthetic data only)
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{decode_pgm, encode_pgm, render_frame, GrayFrame};
use super::{gen_trajectory, numeric_features, oracle_label, Result, ScenarioConfig, ScenarioError, Trajectory, NUMERIC_DIM};
use crate::channel::{Codebook, OfdmConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(rename = "Q")]
    pub num_beams: usize,
    #[serde(rename = "M", default)]
    pub num_elements: usize,
    pub d_n: usize,
    #[serde(rename = "T")]
    pub seq_len: usize,
    #[serde(rename = "P")]
    pub horizon: usize,
    pub sample_rate: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
}

/// One aligned observation window and its future beam labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub trajectory: usize,
    pub split: Split,
    /// Index of the first observed step within its trajectory.
    pub start: usize,
    /// `T x d_n`, row-major.
    pub numeric: Vec<f64>,
    pub frames: Vec<Arc<GrayFrame>>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, split: Split) -> Dataset {
        Dataset {
            meta: self.meta.clone(),
            samples: self.samples.iter().filter(|s| s.split == split).cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_samples: usize,
    /// Share of samples assigned to the test split, by whole trajectories.
    pub test_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_samples: 1000,
            test_fraction: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDataset {
    pub dataset: Dataset,
    /// Indexed by trajectory id.
    pub trajectories: Vec<Trajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub trajectory: usize,
    pub split: Split,
    pub start: usize,
    pub numeric: String,
    pub images: Vec<String>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
    pub meta: DatasetMeta,
}

/// Rounds to 9 significant digits, the precision of the numeric CSV files.
fn quantize(v: f64) -> f64 {
    format!("{v:.8e}").parse().expect("formatted float parses")
}

pub fn generate_dataset(
    cfg: &ScenarioConfig,
    ofdm: &OfdmConfig,
    codebook: &Codebook,
    spec: DatasetSpec,
) -> Result<GeneratedDataset> {
    cfg.validate()?;
    ofdm.validate()?;
    if !(0.0..=1.0).contains(&spec.test_fraction) {
        return Err(ScenarioError::InvalidConfig("test_fraction must lie in [0, 1]".into()));
    }
    let (t_len, p_len) = (cfg.seq_len, cfg.horizon);
    let needed = t_len + p_len;
    if cfg.trajectory_len < needed {
        return Err(ScenarioError::InsufficientTrajectoryLength {
            len: cfg.trajectory_len,
            needed,
        });
    }
    let meta = DatasetMeta {
        num_beams: codebook.num_beams(),
        num_elements: codebook.num_elements(),
        d_n: NUMERIC_DIM,
        seq_len: t_len,
        horizon: p_len,
        sample_rate: cfg.sample_rate,
        seed: cfg.seed,
        height: cfg.camera.height,
        width: cfg.camera.width,
    };

    let n_test = (spec.test_fraction * spec.num_samples as f64).round() as usize;
    let n_train = spec.num_samples - n_test;
    let windows_per_traj = cfg.trajectory_len - needed + 1;
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trajectories = Vec::new();
    let mut samples = Vec::with_capacity(spec.num_samples);
    let (mut train_count, mut test_count) = (0usize, 0usize);

    while train_count < n_train || test_count < n_test {
        let split = if train_count < n_train
            && (test_count >= n_test || train_count * n_test <= test_count * n_train)
        {
            Split::Train
        } else {
            Split::Test
        };
        let remaining = match split {
            Split::Train => n_train - train_count,
            Split::Test => n_test - test_count,
        };
        let traj_id = trajectories.len();
        let traj = gen_trajectory(cfg, seeds.next_u64())?;

        let frames: Vec<Arc<GrayFrame>> = traj
            .positions
            .iter()
            .map(|&p| Arc::new(render_frame(p, cfg).frame))
            .collect();
        let features: Vec<[f64; NUMERIC_DIM]> = (0..traj.len())
            .map(|i| numeric_features(&traj, i, cfg.bs_position).map(quantize))
            .collect();
        let labels: Vec<usize> = traj
            .positions
            .iter()
            .zip(&traj.timestamps)
            .map(|(&p, &t)| oracle_label(cfg, ofdm, codebook, p, t))
            .collect::<Result<_>>()?;

        let take = windows_per_traj.min(remaining);
        for start in 0..take {
            samples.push(Sample {
                id: format!("s{:06}", samples.len()),
                trajectory: traj_id,
                split,
                start,
                numeric: features[start..start + t_len].iter().flatten().copied().collect(),
                frames: frames[start..start + t_len].to_vec(),
                labels: labels[start + t_len..start + needed].to_vec(),
            });
        }
        match split {
            Split::Train => train_count += take,
            Split::Test => test_count += take,
        }
        trajectories.push(traj);
    }

    Ok(GeneratedDataset {
        dataset: Dataset { meta, samples },
        trajectories,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn numeric_csv(values: &[f64], d_n: usize) -> String {
    let mut out = String::new();
    for row in values.chunks(d_n) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.8e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn trajectory_csv(traj: &Trajectory) -> String {
    let mut out = String::from("t,x,y,z,vx,vy,vz\n");
    for i in 0..traj.len() {
        let p = traj.positions[i];
        let v = traj.velocities[i];
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            traj.timestamps[i], p[0], p[1], p[2], v[0], v[1], v[2]
        ));
    }
    out
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut traj = Trajectory {
        positions: Vec::new(),
        velocities: Vec::new(),
        timestamps: Vec::new(),
    };
    for (lineno, line) in text.lines().enumerate().skip(1) {
        let vals: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| ScenarioError::SchemaViolation {
                record: format!("{}:{}", path.display(), lineno + 1),
                reason: e.to_string(),
            })?;
        if vals.len() != 7 {
            return Err(ScenarioError::SchemaViolation {
                record: format!("{}:{}", path.display(), lineno + 1),
                reason: format!("expected 7 columns, found {}", vals.len()),
            });
        }
        traj.timestamps.push(vals[0]);
        traj.positions.push([vals[1], vals[2], vals[3]]);
        traj.velocities.push([vals[4], vals[5], vals[6]]);
    }
    Ok(traj)
}

/// Writes `dataset` under `dir`. Trajectories, when given, are indexed by
/// trajectory id.
pub fn write_dataset(dataset: &Dataset, trajectories: Option<&[Trajectory]>, dir: &Path) -> Result<DatasetManifest> {
    for sub in ["numeric", "images"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    let meta_json = serde_json::to_string_pretty(&dataset.meta).expect("meta serializes");
    write_file(&dir.join("meta.json"), meta_json.as_bytes())?;

    let mut records = Vec::with_capacity(dataset.samples.len());
    let mut manifest = String::new();
    for s in &dataset.samples {
        let numeric = format!("numeric/{}.csv", s.id);
        write_file(&dir.join(&numeric), numeric_csv(&s.numeric, dataset.meta.d_n).as_bytes())?;
        let mut images = Vec::with_capacity(s.frames.len());
        for (t, frame) in s.frames.iter().enumerate() {
            let name = format!("images/{}_{}.pgm", s.id, t);
            write_file(&dir.join(&name), &encode_pgm(frame))?;
            images.push(name);
        }
        let record = ManifestRecord {
            id: s.id.clone(),
            trajectory: s.trajectory,
            split: s.split,
            start: s.start,
            numeric,
            images,
            labels: s.labels.clone(),
        };
        manifest.push_str(&serde_json::to_string(&record).expect("record serializes"));
        manifest.push('\n');
        records.push(record);
    }
    write_file(&dir.join("manifest.jsonl"), manifest.as_bytes())?;

    if let Some(trajs) = trajectories {
        let tdir = dir.join("trajectories");
        fs::create_dir_all(&tdir).map_err(io_err(&tdir))?;
        for (id, traj) in trajs.iter().enumerate() {
            write_file(&tdir.join(format!("{id:05}.csv")), trajectory_csv(traj).as_bytes())?;
        }
    }

    Ok(DatasetManifest {
        root: dir.to_path_buf(),
        records,
        meta: dataset.meta.clone(),
    })
}

/// Generates a labeled synthetic dataset and writes it under `dir`.
pub fn build_dataset(
    cfg: &ScenarioConfig,
    ofdm: &OfdmConfig,
    codebook: &Codebook,
    spec: DatasetSpec,
    dir: &Path,
) -> Result<DatasetManifest> {
    let generated = generate_dataset(cfg, ofdm, codebook, spec)?;
    write_dataset(&generated.dataset, Some(&generated.trajectories), dir)
}

fn read_meta(dir: &Path) -> Result<DatasetMeta> {
    let path = dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(|_| ScenarioError::MissingFile {
        sample: "<meta>".into(),
        path: path.display().to_string(),
    })?;
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| ScenarioError::SchemaViolation {
        record: "meta.json".into(),
        reason: e.to_string(),
    })?;
    if meta.num_beams == 0 || meta.d_n == 0 || meta.seq_len == 0 || meta.horizon == 0 {
        return Err(ScenarioError::SchemaViolation {
            record: "meta.json".into(),
            reason: "Q, d_n, T and P must be >= 1".into(),
        });
    }
    Ok(meta)
}

fn load_frame(dir: &Path, rel: &str, sample: &str, meta: &DatasetMeta) -> Result<GrayFrame> {
    let path = dir.join(rel);
    let bytes = fs::read(&path).map_err(|_| ScenarioError::MissingFile {
        sample: sample.to_string(),
        path: path.display().to_string(),
    })?;
    let frame = decode_pgm(&bytes).map_err(|reason| ScenarioError::Decode {
        sample: sample.to_string(),
        path: path.display().to_string(),
        reason,
    })?;
    if frame.width != meta.width || frame.height != meta.height {
        return Err(ScenarioError::Decode {
            sample: sample.to_string(),
            path: path.display().to_string(),
            reason: format!(
                "frame is {}x{}, metadata declares {}x{}",
                frame.width, frame.height, meta.width, meta.height
            ),
        });
    }
    Ok(frame)
}

fn parse_numeric(text: &str, sample: &str, meta: &DatasetMeta) -> Result<Vec<f64>> {
    let schema = |reason: String| ScenarioError::SchemaViolation {
        record: sample.to_string(),
        reason,
    };
    let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if rows.len() != meta.seq_len {
        return Err(schema(format!("numeric window has {} rows, expected {}", rows.len(), meta.seq_len)));
    }
    let mut values = Vec::with_capacity(meta.seq_len * meta.d_n);
    for row in rows {
        let cells: Vec<&str> = row.split(',').collect();
        if cells.len() != meta.d_n {
            return Err(schema(format!("numeric row has {} columns, expected {}", cells.len(), meta.d_n)));
        }
        for c in cells {
            let v: f64 = c.trim().parse().map_err(|_| schema(format!("bad number {c:?}")))?;
            if !v.is_finite() {
                return Err(schema(format!("non-finite value {c:?}")));
            }
            values.push(v);
        }
    }
    Ok(values)
}

fn check_labels(labels: &[usize], sample: &str, meta: &DatasetMeta) -> Result<()> {
    if let Some(&label) = labels.iter().find(|&&l| l >= meta.num_beams) {
        return Err(ScenarioError::LabelOutOfRange {
            sample: sample.to_string(),
            label,
            num_beams: meta.num_beams,
        });
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta = read_meta(dir)?;
    let manifest_path = dir.join("manifest.jsonl");
    let text = fs::read_to_string(&manifest_path).map_err(|_| ScenarioError::MissingFile {
        sample: "<manifest>".into(),
        path: manifest_path.display().to_string(),
    })?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(line).map_err(|e| ScenarioError::SchemaViolation {
            record: format!("manifest.jsonl:{}", lineno + 1),
            reason: e.to_string(),
        })?;
        let id = record.id.as_str();
        if record.labels.len() != meta.horizon {
            return Err(ScenarioError::SchemaViolation {
                record: id.to_string(),
                reason: format!("{} labels, expected {}", record.labels.len(), meta.horizon),
            });
        }
        check_labels(&record.labels, id, &meta)?;
        if record.images.len() != meta.seq_len {
            return Err(ScenarioError::SchemaViolation {
                record: id.to_string(),
                reason: format!("{} images, expected {}", record.images.len(), meta.seq_len),
            });
        }
        let numeric_path = dir.join(&record.numeric);
        let numeric_text = fs::read_to_string(&numeric_path).map_err(|_| ScenarioError::MissingFile {
            sample: id.to_string(),
            path: numeric_path.display().to_string(),
        })?;
        let numeric = parse_numeric(&numeric_text, id, &meta)?;
        let frames = record
            .images
            .iter()
            .map(|rel| load_frame(dir, rel, id, &meta).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            id: record.id,
            trajectory: record.trajectory,
            split: record.split,
            start: record.start,
            numeric,
            frames,
            labels: record.labels,
        });
    }
    Ok(Dataset { meta, samples })
}

/// Reads an externally collected dataset and windows it into samples.
///
/// Expected layout: `meta.json` (as for synthetic datasets; `M` and `seed`
/// optional) and `sequences.csv` with header
/// `sequence,index,image,beam,f0,...,f{d_n-1}`, one row per time step.
/// Image paths are relative to `dir`. Beam indices are taken as given.
pub fn ingest_external(dir: &Path) -> Result<Dataset> {
    let meta = read_meta(dir)?;
    let csv_path = dir.join("sequences.csv");
    let text = fs::read_to_string(&csv_path).map_err(|_| ScenarioError::MissingFile {
        sample: "<sequences>".into(),
        path: csv_path.display().to_string(),
    })?;
    let mut lines = text.lines().enumerate();
    let header: Vec<String> = lines
        .next()
        .map(|(_, h)| h.split(',').map(|c| c.trim().to_string()).collect())
        .unwrap_or_default();
    let mut expected_header = vec!["sequence".to_string(), "index".into(), "image".into(), "beam".into()];
    expected_header.extend((0..meta.d_n).map(|i| format!("f{i}")));
    if header != expected_header {
        return Err(ScenarioError::SchemaViolation {
            record: "sequences.csv:1".into(),
            reason: format!("header must be {}", expected_header.join(",")),
        });
    }

    struct Row {
        index: usize,
        image: String,
        beam: usize,
        features: Vec<f64>,
    }
    let mut sequences: BTreeMap<String, Vec<Row>> = BTreeMap::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let record = format!("sequences.csv:{}", lineno + 1);
        let schema = |reason: String| ScenarioError::SchemaViolation {
            record: record.clone(),
            reason,
        };
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != expected_header.len() {
            return Err(schema(format!("{} columns, expected {}", cells.len(), expected_header.len())));
        }
        let index = cells[1].parse().map_err(|_| schema(format!("bad index {:?}", cells[1])))?;
        let beam = cells[3].parse().map_err(|_| schema(format!("bad beam {:?}", cells[3])))?;
        let features = cells[4..]
            .iter()
            .map(|c| c.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| schema("non-numeric or non-finite feature".into()))?;
        sequences.entry(cells[0].to_string()).or_default().push(Row {
            index,
            image: cells[2].to_string(),
            beam,
            features,
        });
    }

    let (t_len, p_len) = (meta.seq_len, meta.horizon);
    let mut cache: HashMap<String, Arc<GrayFrame>> = HashMap::new();
    let mut samples = Vec::new();
    for (ordinal, (name, mut rows)) in sequences.into_iter().enumerate() {
        rows.sort_by_key(|r| r.index);
        let split = if ordinal % 10 < 7 { Split::Train } else { Split::Test };
        if rows.len() < t_len + p_len {
            continue;
        }
        for start in 0..=rows.len() - t_len - p_len {
            let id = format!("ext_{name}_{start}");
            let labels: Vec<usize> = rows[start + t_len..start + t_len + p_len].iter().map(|r| r.beam).collect();
            check_labels(&labels, &id, &meta)?;
            let mut frames = Vec::with_capacity(t_len);
            for r in &rows[start..start + t_len] {
                let frame = match cache.get(&r.image) {
                    Some(f) => f.clone(),
                    None => {
                        let f = Arc::new(load_frame(dir, &r.image, &id, &meta)?);
                        cache.insert(r.image.clone(), f.clone());
                        f
                    }
                };
                frames.push(frame);
            }
            samples.push(Sample {
                id,
                trajectory: ordinal,
                split,
                start,
                numeric: rows[start..start + t_len].iter().flat_map(|r| r.features.iter().copied()).collect(),
                frames,
                labels,
            });
        }
    }
    Ok(Dataset { meta, samples })
}
