use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{AgentError, Result};
use crate::predictor::{Mode, PredictorConfig};
use crate::scenario::{decode_pgm, GrayFrame};

/// Laplacian variance below which a frame counts as blurry (0-255 pixels).
pub const DEFAULT_BLUR_THRESHOLD: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlurReport {
    pub score: f64,
    pub is_blurry: bool,
}

/// Variance of the 4-neighbour Laplacian over interior pixels. Blurry when
/// the score is strictly below `threshold`.
pub fn assess_blurriness(frame: &GrayFrame, threshold: f64) -> Result<BlurReport> {
    let (w, h) = (frame.width, frame.height);
    if w < 3 || h < 3 || frame.pixels.len() != w * h {
        return Err(AgentError::EmptyFrame);
    }
    let p = |x: usize, y: usize| f64::from(frame.pixels[y * w + x]);
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let l = p(x - 1, y) + p(x + 1, y) + p(x, y - 1) + p(x, y + 1) - 4.0 * p(x, y);
            sum += l;
            sum2 += l * l;
        }
    }
    let n = ((w - 2) * (h - 2)) as f64;
    let mean = sum / n;
    let score = (sum2 / n - mean * mean).max(0.0);
    Ok(BlurReport {
        score,
        is_blurry: score < threshold,
    })
}

/// 3x3 mean filter with clamped edges, rounded to the nearest level.
pub fn box_blur3(frame: &GrayFrame) -> GrayFrame {
    let (w, h) = (frame.width, frame.height);
    let mut out = frame.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0u32;
            for dy in [-1isize, 0, 1] {
                for dx in [-1isize, 0, 1] {
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    acc += u32::from(frame.pixels[yy * w + xx]);
                }
            }
            out.pixels[y * w + x] = ((acc + 4) / 9) as u8;
        }
    }
    out
}

fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Unigram F1 between lowercased, punctuation-stripped token multisets.
pub fn semantic_similarity(candidate: &str, reference: &str) -> Result<f64> {
    let (c, r) = (tokens(candidate), tokens(reference));
    if c.is_empty() || r.is_empty() {
        return Err(AgentError::EmptyText);
    }
    let mut pool: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &r {
        *pool.entry(t).or_default() += 1;
    }
    let mut matched = 0usize;
    for t in &c {
        if let Some(n) = pool.get_mut(t.as_str()).filter(|n| **n > 0) {
            *n -= 1;
            matched += 1;
        }
    }
    if matched == 0 {
        return Ok(0.0);
    }
    let p = matched as f64 / c.len() as f64;
    let rc = matched as f64 / r.len() as f64;
    Ok(2.0 * p * rc / (p + rc))
}

/// Scores a draft against a reference answer in `[0, 1]`.
pub trait SimilarityScorer: Send + Sync {
    fn score(&self, candidate: &str, reference: &str) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TokenF1;

impl SimilarityScorer for TokenF1 {
    fn score(&self, candidate: &str, reference: &str) -> Result<f64> {
        semantic_similarity(candidate, reference)
    }
}

/// A tool the planning agent may call with a free-text input.
pub trait Tool: Send + Sync {
    fn name(&self) -> &str;
    fn description(&self) -> &str;
    fn call(&self, input: &str) -> std::result::Result<String, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolFinding {
    pub tool: String,
    pub input: String,
    pub result: String,
    pub ok: bool,
}

impl ToolFinding {
    /// The blurriness verdict, when this is a successful blurriness call.
    pub fn blurry(&self) -> Option<bool> {
        if self.tool != BlurrinessTool::NAME || !self.ok {
            return None;
        }
        serde_json::from_str::<Value>(&self.result).ok()?.get("is_blurry")?.as_bool()
    }
}

/// Mean blurriness over up to `max_frames` PGM frames found at a path: a
/// single `.pgm` file, a directory of them, or a dataset directory with an
/// `images/` folder.
#[derive(Debug, Clone)]
pub struct BlurrinessTool {
    pub threshold: f64,
    pub max_frames: usize,
}

impl BlurrinessTool {
    pub const NAME: &'static str = "blurriness";

    pub fn new(threshold: f64) -> Self {
        Self {
            threshold,
            max_frames: 32,
        }
    }

    fn frame_files(&self, path: &Path) -> std::result::Result<Vec<PathBuf>, String> {
        if path.is_file() {
            return Ok(vec![path.to_path_buf()]);
        }
        let dir = if path.join("images").is_dir() {
            path.join("images")
        } else {
            path.to_path_buf()
        };
        let entries = fs::read_dir(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(format!("no .pgm frames under {}", dir.display()));
        }
        // Spread the sample across the whole set.
        let n = files.len();
        let k = n.min(self.max_frames.max(1));
        Ok((0..k).map(|i| files[i * n / k].clone()).collect())
    }

    pub fn assess_path(&self, path: &Path) -> std::result::Result<(BlurReport, usize), String> {
        let files = self.frame_files(path)?;
        let mut total = 0.0;
        for f in &files {
            let bytes = fs::read(f).map_err(|e| format!("{}: {e}", f.display()))?;
            let frame = decode_pgm(&bytes).map_err(|e| format!("{}: {e}", f.display()))?;
            total += assess_blurriness(&frame, self.threshold).map_err(|e| e.to_string())?.score;
        }
        let score = total / files.len() as f64;
        Ok((
            BlurReport {
                score,
                is_blurry: score < self.threshold,
            },
            files.len(),
        ))
    }
}

impl Tool for BlurrinessTool {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn description(&self) -> &str {
        "input: path to frames; returns mean Laplacian variance and whether the frames are blurry"
    }

    fn call(&self, input: &str) -> std::result::Result<String, String> {
        let (r, frames) = self.assess_path(Path::new(input.trim()))?;
        Ok(json!({"score": r.score, "is_blurry": r.is_blurry, "frames": frames, "threshold": self.threshold}).to_string())
    }
}

/// Placeholder for document retrieval; always reports that no store is
/// configured.
#[derive(Debug, Clone, Copy, Default)]
pub struct RetrievalStub;

impl Tool for RetrievalStub {
    fn name(&self) -> &str {
        "retrieve"
    }

    fn description(&self) -> &str {
        "input: query; document retrieval (no store configured in this build)"
    }

    fn call(&self, _input: &str) -> std::result::Result<String, String> {
        Err("no document store configured".into())
    }
}

#[derive(Default)]
pub struct ToolRegistry {
    tools: BTreeMap<String, Box<dyn Tool>>,
}

impl ToolRegistry {
    /// Blurriness assessment plus the retrieval stub.
    pub fn standard(blur_threshold: f64) -> Self {
        let mut r = Self::default();
        r.register(Box::new(BlurrinessTool::new(blur_threshold)));
        r.register(Box::new(RetrievalStub));
        r
    }

    pub fn register(&mut self, tool: Box<dyn Tool>) {
        self.tools.insert(tool.name().to_string(), tool);
    }

    pub fn describe(&self) -> String {
        self.tools
            .values()
            .map(|t| format!("- {}: {}", t.name(), t.description()))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Runs a tool; failures come back as a finding with `ok == false`.
    pub fn call(&self, name: &str, input: &str) -> ToolFinding {
        let (ok, result) = match self.tools.get(name) {
            Some(t) => match t.call(input) {
                Ok(r) => (true, r),
                Err(e) => (false, format!("error: {e}")),
            },
            None => (false, format!("error: unknown tool {name:?}")),
        };
        ToolFinding {
            tool: name.to_string(),
            input: input.to_string(),
            result,
            ok,
        }
    }
}

impl std::fmt::Debug for ToolRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.tools.keys()).finish()
    }
}

/// Architecture knobs a plan chooses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub numeric_blocks: usize,
    pub image_blocks: usize,
    pub attn_heads: usize,
    pub decoder_layers: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.numeric_blocks == 0 || self.image_blocks == 0 || self.attn_heads == 0 || self.decoder_layers == 0 {
            return Err(format!("model values must be positive: {self:?}"));
        }
        Ok(())
    }

    pub fn apply(&self, cfg: &mut PredictorConfig) {
        cfg.numeric_blocks = self.numeric_blocks;
        cfg.image_blocks = self.image_blocks;
        cfg.attn_heads = self.attn_heads;
        cfg.decoder_layers = self.decoder_layers;
    }
}

/// Maps an accuracy requirement to a named architecture tier: deeper
/// encoders for stricter requirements.
pub fn tier_for_accuracy(accuracy: f64) -> (&'static str, ModelSpec) {
    let spec = |n, h| ModelSpec {
        numeric_blocks: n,
        image_blocks: n,
        attn_heads: h,
        decoder_layers: 2,
    };
    if accuracy < 0.85 {
        ("small", spec(1, 1))
    } else if accuracy < 0.92 {
        ("medium", spec(2, 2))
    } else {
        ("large", spec(4, 2))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub name: String,
    pub mode: Mode,
    pub model: ModelSpec,
    pub checkpoint: String,
}

/// Known trained models the planner can point a command at.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelRegistry {
    pub entries: Vec<RegistryEntry>,
}

impl ModelRegistry {
    /// One entry per mode and tier, at `<root>/<mode>-<tier>`.
    pub fn standard(root: &str) -> Self {
        let root = root.trim_end_matches('/');
        let mut entries = Vec::new();
        for mode in Mode::ALL {
            for acc in [0.8, 0.9, 0.95] {
                let (tier, model) = tier_for_accuracy(acc);
                let name = format!("{mode}-{tier}");
                entries.push(RegistryEntry {
                    checkpoint: format!("{root}/{name}"),
                    name,
                    mode,
                    model,
                });
            }
        }
        Self { entries }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| AgentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| AgentError::BadFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn lookup(&self, mode: Mode, model: &ModelSpec) -> Option<&RegistryEntry> {
        self.entries.iter().find(|e| e.mode == mode && e.model == *model)
    }
}
