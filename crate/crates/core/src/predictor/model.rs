use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Mode, Prediction, PredictorConfig, PredictorError, Result};
use crate::nn::layers::{
    add_positional, apply_ffn, apply_layer_norm, apply_linear, conv_backbone, dropout, init_backbone, init_ffn,
    init_layer_norm, init_linear, init_mha, init_ssm_block, multi_head_attention, ssm_block,
};
use crate::nn::{grad_check, GradCheckOptions, GradCheckReport, Graph, NnError, ParameterSet, Scalar, Tensor, Var};
use crate::scenario::{GrayFrame, Sample};

/// RNG type to name in `None::<&mut NoRng>` when running without dropout.
pub type NoRng = ChaCha8Rng;

const FFN_MULT: usize = 4;

/// Inputs for a batch of samples. Numeric rows are `batch * window * d_n`
/// values; frames are `batch * window`, sample-major.
#[derive(Debug, Clone, Default)]
pub struct ModelInput {
    pub batch: usize,
    pub numeric: Option<Vec<f64>>,
    pub frames: Option<Vec<Arc<GrayFrame>>>,
}

impl ModelInput {
    /// Gathers the modalities `mode` needs from dataset samples.
    pub fn from_samples(samples: &[&Sample], mode: Mode) -> Self {
        Self {
            batch: samples.len(),
            numeric: mode
                .uses_numeric()
                .then(|| samples.iter().flat_map(|s| s.numeric.iter().copied()).collect()),
            frames: mode
                .uses_image()
                .then(|| samples.iter().flat_map(|s| s.frames.iter().cloned()).collect()),
        }
    }

    pub fn labels(samples: &[&Sample]) -> Vec<usize> {
        samples.iter().flat_map(|s| s.labels.iter().copied()).collect()
    }
}

/// Intermediate fusion results, exposed for inspection.
#[derive(Debug, Clone, Copy)]
pub struct Fusion {
    pub memory: Var,
    pub z_v: Var,
    pub z_n: Var,
    pub gate: Var,
}

#[derive(Debug)]
pub struct HybridModel<T: Scalar> {
    pub config: PredictorConfig,
    pub params: ParameterSet<T>,
    /// Replaces the learned gate by a constant when set. Test hook.
    pub gate_override: Option<f64>,
    image_calls: AtomicUsize,
}

impl<T: Scalar> Clone for HybridModel<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            gate_override: self.gate_override,
            image_calls: AtomicUsize::new(0),
        }
    }
}

fn build_params<T: Scalar, R: Rng>(cfg: &PredictorConfig, rng: &mut R) -> crate::nn::Result<ParameterSet<T>> {
    let d = cfg.hidden_dim;
    let mut ps = ParameterSet::new();
    // Numeric branch. Input standardization is stored with the weights but
    // never trained.
    ps.insert_const("num.norm.shift", &[cfg.numeric_dim], 0.0, false)?;
    ps.insert_const("num.norm.scale", &[cfg.numeric_dim], 1.0, false)?;
    init_linear(&mut ps, "num.proj", cfg.numeric_dim, d, rng)?;
    for i in 0..cfg.numeric_blocks {
        init_ssm_block(&mut ps, &format!("num.blk{i}"), d, rng)?;
    }
    // Image branch.
    init_backbone(&mut ps, "img.cnn", &cfg.backbone_widths, rng)?;
    init_linear(&mut ps, "img.proj", cfg.image_feature_dim(), d, rng)?;
    for i in 0..cfg.image_blocks {
        init_ssm_block(&mut ps, &format!("img.blk{i}"), d, rng)?;
    }
    // Fusion: one cross-attention direction per modality, then the gate.
    for side in ["v", "n"] {
        init_mha(&mut ps, &format!("fuse.{side}.attn"), d, rng)?;
        init_layer_norm(&mut ps, &format!("fuse.{side}.ln1"), d)?;
        init_ffn(&mut ps, &format!("fuse.{side}.ffn"), d, FFN_MULT * d, rng)?;
        init_layer_norm(&mut ps, &format!("fuse.{side}.ln2"), d)?;
    }
    ps.insert_uniform("fuse.gate.w", &[d, 2 * d], 2 * d, rng)?;
    ps.insert_const("fuse.gate.b", &[d], 0.0, true)?;
    // Decoder.
    for l in 0..cfg.decoder_layers {
        init_mha(&mut ps, &format!("dec.l{l}.self"), d, rng)?;
        init_layer_norm(&mut ps, &format!("dec.l{l}.ln1"), d)?;
        init_mha(&mut ps, &format!("dec.l{l}.cross"), d, rng)?;
        init_layer_norm(&mut ps, &format!("dec.l{l}.ln2"), d)?;
        init_ffn(&mut ps, &format!("dec.l{l}.ffn"), d, FFN_MULT * d, rng)?;
        init_layer_norm(&mut ps, &format!("dec.l{l}.ln3"), d)?;
    }
    init_linear(&mut ps, "head", d, cfg.num_classes, rng)?;
    Ok(ps)
}

impl<T: Scalar> HybridModel<T> {
    pub fn new(config: PredictorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = build_params(&config, &mut rng)?;
        Ok(Self {
            config,
            params,
            gate_override: None,
            image_calls: AtomicUsize::new(0),
        })
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> HybridModel<U> {
        HybridModel {
            config: self.config.clone(),
            params: self.params.cast(),
            gate_override: self.gate_override,
            image_calls: AtomicUsize::new(0),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.num_values()
    }

    /// How many times the image encoder has run since construction.
    pub fn image_encoder_calls(&self) -> usize {
        self.image_calls.load(Ordering::Relaxed)
    }

    /// Sets the per-feature standardization `(x - mean) / std` applied before
    /// the numeric projection.
    pub fn set_numeric_normalization(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        let n = self.config.numeric_dim;
        if mean.len() != n || std.len() != n {
            return Err(PredictorError::ShapeMismatch(format!("normalization needs {n} values")));
        }
        let shift = self.params.get_mut("num.norm.shift")?;
        for (dst, &m) in shift.value.data_mut().iter_mut().zip(mean) {
            *dst = T::lit(-m);
        }
        let scale = self.params.get_mut("num.norm.scale")?;
        for (dst, &s) in scale.value.data_mut().iter_mut().zip(std) {
            *dst = T::lit(1.0 / s.max(1e-6));
        }
        Ok(())
    }

    /// True once standardization has been fitted (anything but identity).
    pub fn has_numeric_normalization(&self) -> bool {
        let is = |name: &str, v: f64| {
            self.params
                .get(name)
                .map(|p| p.value.data().iter().all(|&x| x == T::lit(v)))
                .unwrap_or(true)
        };
        !(is("num.norm.shift", 0.0) && is("num.norm.scale", 1.0))
    }

    /// `x` is `batch * T * d_n` raw features; returns `H_n[batch*T, d]`.
    pub fn encode_numeric<R: Rng>(&self, g: &mut Graph<T>, x: &[f64], batch: usize, mut rng: Option<&mut R>) -> Result<Var> {
        let c = &self.config;
        let (t, dn) = (c.window, c.numeric_dim);
        if x.len() != batch * t * dn {
            return Err(PredictorError::ShapeMismatch(format!(
                "numeric input has {} values, expected {batch}x{t}x{dn}",
                x.len()
            )));
        }
        let xv = g.constant(Tensor::new(vec![batch * t, dn], x.iter().map(|&v| T::lit(v)).collect())?);
        let shift = g.param(&self.params, "num.norm.shift")?;
        let scale = g.param(&self.params, "num.norm.scale")?;
        let xn = g.add_row(xv, shift)?;
        let xn = g.mul_row(xn, scale)?;
        let mut h = apply_linear(g, &self.params, "num.proj", xn)?;
        h = add_positional(g, h, t)?;
        for i in 0..c.numeric_blocks {
            h = ssm_block(g, &self.params, &format!("num.blk{i}"), h, t, c.dropout, rng.as_deref_mut())?;
        }
        Ok(h)
    }

    /// `frames` are `batch * T` grayscale frames; returns `H_v[batch*T, d]`.
    /// Identical frames (by content) share one backbone evaluation.
    pub fn encode_image<R: Rng>(
        &self,
        g: &mut Graph<T>,
        frames: &[Arc<GrayFrame>],
        batch: usize,
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        self.image_calls.fetch_add(1, Ordering::Relaxed);
        let c = &self.config;
        let t = c.window;
        if frames.len() != batch * t {
            return Err(PredictorError::ShapeMismatch(format!(
                "{} frames, expected {batch}x{t}",
                frames.len()
            )));
        }
        let (h, w) = (c.frame_height, c.frame_width);
        let mut unique: HashMap<&GrayFrame, usize> = HashMap::new();
        let mut order: Vec<&GrayFrame> = Vec::new();
        let mut idx = Vec::with_capacity(frames.len());
        for f in frames {
            if f.width != w || f.height != h || f.pixels.len() != w * h {
                return Err(PredictorError::FrameSizeMismatch {
                    want_w: w,
                    want_h: h,
                    got_w: f.width,
                    got_h: f.height,
                });
            }
            let next = order.len();
            let id = *unique.entry(f.as_ref()).or_insert(next);
            if id == next {
                order.push(f.as_ref());
            }
            idx.push(id);
        }
        let scale = T::lit(1.0 / 255.0);
        let pixels: Vec<T> = order
            .iter()
            .flat_map(|f| f.pixels.iter().map(move |&p| T::lit(f64::from(p)) * scale))
            .collect();
        let input = g.constant(Tensor::new(vec![order.len(), 1, h, w], pixels)?);
        let feats = conv_backbone(g, &self.params, "img.cnn", input, c.backbone_widths.len())?;
        let feats = g.gather_rows(feats, &idx)?;
        let mut hv = apply_linear(g, &self.params, "img.proj", feats)?;
        hv = add_positional(g, hv, t)?;
        for i in 0..c.image_blocks {
            hv = ssm_block(g, &self.params, &format!("img.blk{i}"), hv, t, c.dropout, rng.as_deref_mut())?;
        }
        Ok(hv)
    }

    /// One cross-attention direction: `query` attends to `memory`, then a
    /// feed-forward sublayer; both residual with post-normalization.
    fn cross_direction<R: Rng>(
        &self,
        g: &mut Graph<T>,
        side: &str,
        query: Var,
        memory: Var,
        batch: usize,
        mut rng: Option<&mut R>,
    ) -> Result<Var> {
        let p = &self.params;
        let c = &self.config;
        let a = multi_head_attention(g, p, &format!("fuse.{side}.attn"), query, memory, batch, c.attn_heads)?;
        let a = dropout(g, a, c.dropout, rng.as_deref_mut())?;
        let u = g.add(query, a)?;
        let u = apply_layer_norm(g, p, &format!("fuse.{side}.ln1"), u)?;
        let f = apply_ffn(g, p, &format!("fuse.{side}.ffn"), u)?;
        let f = dropout(g, f, c.dropout, rng)?;
        let z = g.add(u, f)?;
        Ok(apply_layer_norm(g, p, &format!("fuse.{side}.ln2"), z)?)
    }

    /// Bidirectional cross-attention and gated fusion of `H_n` and `H_v`.
    pub fn fuse_multimodal<R: Rng>(
        &self,
        g: &mut Graph<T>,
        h_n: Var,
        h_v: Var,
        batch: usize,
        mut rng: Option<&mut R>,
    ) -> Result<Fusion> {
        if g.shape(h_n) != g.shape(h_v) {
            return Err(PredictorError::ShapeMismatch(format!(
                "fusion inputs {:?} and {:?}",
                g.shape(h_n),
                g.shape(h_v)
            )));
        }
        let z_v = self.cross_direction(g, "v", h_v, h_n, batch, rng.as_deref_mut())?;
        let z_n = self.cross_direction(g, "n", h_n, h_v, batch, rng)?;
        let gate = match self.gate_override {
            Some(v) => g.constant(Tensor::new(g.shape(z_v).to_vec(), vec![T::lit(v); g.value(z_v).numel()])?),
            None => {
                let cat = g.concat(z_v, z_n, 1)?;
                let logits = apply_linear(g, &self.params, "fuse.gate", cat)?;
                g.sigmoid(logits)
            }
        };
        let memory = g.gate_mix(gate, z_v, z_n)?;
        Ok(Fusion { memory, z_v, z_n, gate })
    }

    /// Parallel decoding of all `P` steps from zero queries plus positional
    /// encoding. Returns logits `[batch*P, K]`.
    pub fn decode<R: Rng>(&self, g: &mut Graph<T>, memory: Var, batch: usize, mut rng: Option<&mut R>) -> Result<Var> {
        let c = &self.config;
        let p = &self.params;
        let (d, horizon) = (c.hidden_dim, c.horizon);
        let zeros = g.constant(Tensor::zeros(&[batch * horizon, d]));
        let mut t = add_positional(g, zeros, horizon)?;
        for l in 0..c.decoder_layers {
            let s = multi_head_attention(g, p, &format!("dec.l{l}.self"), t, t, batch, c.attn_heads)?;
            let s = dropout(g, s, c.dropout, rng.as_deref_mut())?;
            let a1 = g.add(t, s)?;
            let a1 = apply_layer_norm(g, p, &format!("dec.l{l}.ln1"), a1)?;
            let x = multi_head_attention(g, p, &format!("dec.l{l}.cross"), a1, memory, batch, c.attn_heads)?;
            let x = dropout(g, x, c.dropout, rng.as_deref_mut())?;
            let a2 = g.add(a1, x)?;
            let a2 = apply_layer_norm(g, p, &format!("dec.l{l}.ln2"), a2)?;
            let f = apply_ffn(g, p, &format!("dec.l{l}.ffn"), a2)?;
            let f = dropout(g, f, c.dropout, rng.as_deref_mut())?;
            let tl = g.add(a2, f)?;
            t = apply_layer_norm(g, p, &format!("dec.l{l}.ln3"), tl)?;
        }
        Ok(apply_linear(g, p, "head", t)?)
    }

    /// Routes the input through the branches the configured mode enables.
    /// Passing an RNG turns dropout on.
    pub fn forward<R: Rng>(&self, g: &mut Graph<T>, input: &ModelInput, mut rng: Option<&mut R>) -> Result<Var> {
        let mode = self.config.mode;
        let batch = input.batch;
        if batch == 0 {
            return Err(PredictorError::ShapeMismatch("empty batch".into()));
        }
        let numeric = match (&input.numeric, mode.uses_numeric()) {
            (Some(x), true) => Some(x.as_slice()),
            (None, true) => return Err(PredictorError::MissingModality { mode, missing: "numeric" }),
            _ => None,
        };
        let frames = match (&input.frames, mode.uses_image()) {
            (Some(f), true) => Some(f.as_slice()),
            (None, true) => return Err(PredictorError::MissingModality { mode, missing: "image" }),
            _ => None,
        };
        let h_n = numeric
            .map(|x| self.encode_numeric(g, x, batch, rng.as_deref_mut()))
            .transpose()?;
        let h_v = frames
            .map(|f| self.encode_image(g, f, batch, rng.as_deref_mut()))
            .transpose()?;
        let memory = match (h_n, h_v) {
            (Some(n), Some(v)) => self.fuse_multimodal(g, n, v, batch, rng.as_deref_mut())?.memory,
            (Some(n), None) => n,
            (None, Some(v)) => v,
            (None, None) => unreachable!("every mode enables a branch"),
        };
        self.decode(g, memory, batch, rng)
    }

    /// Evaluation-mode prediction for each sample of the batch.
    pub fn predict(&self, input: &ModelInput) -> Result<Vec<Prediction>> {
        let start = Instant::now();
        let mut g = Graph::new();
        let logits = self.forward(&mut g, input, None::<&mut NoRng>)?;
        let k = self.config.num_classes;
        let horizon = self.config.horizon;
        let raw = g.value(logits).to_f64();
        let per_frame = start.elapsed().as_secs_f64() * 1e3 / (input.batch * horizon) as f64;
        Ok(raw
            .chunks(horizon * k)
            .map(|sample| {
                let mut probs = sample.to_vec();
                for row in probs.chunks_mut(k) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    row.iter_mut().for_each(|v| *v = (*v - max).exp() / z);
                }
                let beam_indices = probs.chunks(k).map(crate::metrics::argmax).collect();
                Prediction {
                    num_classes: k,
                    logits: sample.to_vec(),
                    probabilities: probs,
                    beam_indices,
                    per_frame_latency_ms: per_frame,
                }
            })
            .collect())
    }
}

/// Central-difference check of the whole forward pass plus loss on the
/// micro config, in 64-bit precision, probing a few entries per parameter.
pub fn micro_gradcheck(mode: Mode) -> Result<GradCheckReport> {
    let cfg = PredictorConfig::micro(mode);
    let model = HybridModel::<f64>::new(cfg.clone(), 10)?;
    let batch = 2;
    let n = batch * cfg.window * cfg.numeric_dim;
    let input = ModelInput {
        batch,
        numeric: Some((0..n).map(|i| ((i * 7919) % 113) as f64 / 50.0 - 1.0).collect()),
        frames: Some(
            (0..batch * cfg.window)
                .map(|f| {
                    let pixels = (0..cfg.frame_height * cfg.frame_width)
                        .map(|i| ((i * 37 + f * 91) % 251) as u8)
                        .collect();
                    Arc::new(GrayFrame {
                        width: cfg.frame_width,
                        height: cfg.frame_height,
                        pixels,
                    })
                })
                .collect(),
        ),
    };
    let labels: Vec<usize> = (0..batch * cfg.horizon).map(|i| (i * 3 + 1) % cfg.num_classes).collect();
    let mut params = model.params.clone();
    // Zero-initialised conv biases put pre-activations over all-zero
    // patches exactly on the relu kink; nudge them off it.
    for (name, p) in params.iter_mut() {
        if name.ends_with(".b") {
            p.value.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += 0.01 * (1.0 + i as f64 * 0.37).sin());
        }
    }
    let opts = GradCheckOptions {
        max_entries_per_param: 4,
        ..GradCheckOptions::default()
    };
    let report = grad_check(&mut params, &opts, |g, ps| {
        let m = HybridModel {
            config: cfg.clone(),
            params: ps.clone(),
            gate_override: None,
            image_calls: AtomicUsize::new(0),
        };
        let logits = match m.forward(g, &input, None::<&mut NoRng>) {
            Ok(l) => l,
            Err(PredictorError::Nn(e)) => return Err(e),
            Err(other) => return Err(NnError::ShapeMismatch(other.to_string())),
        };
        g.cross_entropy(logits, &labels, batch)
    })?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro(mode: Mode) -> PredictorConfig {
        PredictorConfig::micro(mode)
    }

    fn frame(seed: u8) -> Arc<GrayFrame> {
        let pixels = (0..256u32).map(|i| ((i * 37 + u32::from(seed) * 91) % 251) as u8).collect();
        Arc::new(GrayFrame {
            width: 16,
            height: 16,
            pixels,
        })
    }

    fn input(batch: usize, cfg: &PredictorConfig) -> ModelInput {
        let n = batch * cfg.window * cfg.numeric_dim;
        ModelInput {
            batch,
            numeric: Some((0..n).map(|i| ((i * 7919) % 113) as f64 / 50.0 - 1.0).collect()),
            frames: Some((0..batch * cfg.window).map(|i| frame(i as u8)).collect()),
        }
    }

    fn eval_var(model: &HybridModel<f64>, f: impl FnOnce(&HybridModel<f64>, &mut Graph<f64>) -> Var) -> Vec<f64> {
        let mut g = Graph::new();
        let v = f(model, &mut g);
        g.value(v).data().to_vec()
    }

    #[test]
    fn empty_numeric_stack_is_projection_plus_pe() {
        let cfg = PredictorConfig {
            numeric_blocks: 0,
            ..micro(Mode::Numeric)
        };
        let model = HybridModel::<f64>::new(cfg.clone(), 1).unwrap();
        let x = input(1, &cfg).numeric.unwrap();
        let got = eval_var(&model, |m, g| m.encode_numeric(g, &x, 1, None::<&mut NoRng>).unwrap());
        let w = model.params.get("num.proj.w").unwrap().value.data().to_vec();
        let b = model.params.get("num.proj.b").unwrap().value.data().to_vec();
        let pe = crate::nn::positional_encoding::<f64>(3, 8).unwrap();
        for t in 0..3 {
            for o in 0..8 {
                let lin: f64 = (0..7).map(|i| x[t * 7 + i] * w[o * 7 + i]).sum::<f64>() + b[o];
                let expect = lin + pe.data()[t * 8 + o];
                assert!((got[t * 8 + o] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn numeric_encoder_shape_and_causality() {
        let cfg = PredictorConfig {
            window: 10,
            hidden_dim: 32,
            attn_heads: 2,
            ..micro(Mode::Numeric)
        };
        let model = HybridModel::<f64>::new(cfg.clone(), 2).unwrap();
        let x = input(1, &cfg).numeric.unwrap();
        let base = eval_var(&model, |m, g| m.encode_numeric(g, &x, 1, None::<&mut NoRng>).unwrap());
        assert_eq!(base.len(), 10 * 32);
        let mut p = x.clone();
        p[9 * 7 + 2] += 0.5;
        let pert = eval_var(&model, |m, g| m.encode_numeric(g, &p, 1, None::<&mut NoRng>).unwrap());
        assert_eq!(&pert[..9 * 32], &base[..9 * 32]);
        assert_ne!(&pert[9 * 32..], &base[9 * 32..]);
    }

    #[test]
    fn image_encoder_permutation_and_constant_frames() {
        let cfg = PredictorConfig {
            image_blocks: 0,
            ..micro(Mode::Image)
        };
        let model = HybridModel::<f64>::new(cfg.clone(), 3).unwrap();
        let frames: Vec<_> = (0..3).map(frame).collect();
        let permuted = vec![frames[2].clone(), frames[0].clone(), frames[1].clone()];
        let pe = crate::nn::positional_encoding::<f64>(3, 8).unwrap();
        let strip = |v: Vec<f64>| -> Vec<f64> { v.iter().zip(pe.data()).map(|(a, p)| a - p).collect() };
        let a = strip(eval_var(&model, |m, g| m.encode_image(g, &frames, 1, None::<&mut NoRng>).unwrap()));
        let b = strip(eval_var(&model, |m, g| m.encode_image(g, &permuted, 1, None::<&mut NoRng>).unwrap()));
        for (t, src) in [2usize, 0, 1].iter().enumerate() {
            for j in 0..8 {
                assert!((b[t * 8 + j] - a[src * 8 + j]).abs() < 1e-12);
            }
        }
        let same = vec![frames[1].clone(); 3];
        let c = strip(eval_var(&model, |m, g| m.encode_image(g, &same, 1, None::<&mut NoRng>).unwrap()));
        for t in 1..3 {
            for j in 0..8 {
                assert!((c[t * 8 + j] - c[j]).abs() < 1e-12);
            }
        }
        // Without deduplication the backbone rows are still bit-identical.
        let px: Vec<f64> = (0..3).flat_map(|_| frames[1].pixels.iter().map(|&p| f64::from(p) / 255.0)).collect();
        let feats = eval_var(&model, |m, g| {
            let x = g.constant(Tensor::new(vec![3, 1, 16, 16], px).unwrap());
            conv_backbone(g, &m.params, "img.cnn", x, 4).unwrap()
        });
        assert_eq!(&feats[0..4], &feats[4..8]);
        assert_eq!(&feats[0..4], &feats[8..12]);

        let small = vec![Arc::new(GrayFrame::filled(8, 8, 0)); 3];
        let mut g = Graph::new();
        assert!(matches!(
            model.encode_image(&mut g, &small, 1, None::<&mut NoRng>),
            Err(PredictorError::FrameSizeMismatch { .. })
        ));
    }

    #[test]
    fn gate_override_and_convexity() {
        let cfg = micro(Mode::Multi);
        let mut model = HybridModel::<f64>::new(cfg.clone(), 4).unwrap();
        let inp = input(2, &cfg);
        let run = |model: &HybridModel<f64>| {
            let mut g = Graph::new();
            let hn = model.encode_numeric(&mut g, inp.numeric.as_ref().unwrap(), 2, None::<&mut NoRng>).unwrap();
            let hv = model.encode_image(&mut g, inp.frames.as_ref().unwrap(), 2, None::<&mut NoRng>).unwrap();
            let f = model.fuse_multimodal(&mut g, hn, hv, 2, None::<&mut NoRng>).unwrap();
            let get = |v: Var| g.value(v).data().to_vec();
            (get(f.memory), get(f.z_v), get(f.z_n))
        };
        let (m, zv, zn) = run(&model);
        for i in 0..m.len() {
            assert!(zv[i].min(zn[i]) <= m[i] && m[i] <= zv[i].max(zn[i]));
        }
        model.gate_override = Some(1.0);
        let (m, zv, _) = run(&model);
        assert_eq!(m, zv);
        model.gate_override = Some(0.5);
        let (m, zv, zn) = run(&model);
        for i in 0..m.len() {
            assert!((m[i] - (zv[i] + zn[i]) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_decoder_ignores_memory() {
        let cfg = PredictorConfig {
            decoder_layers: 0,
            ..micro(Mode::Numeric)
        };
        let model = HybridModel::<f64>::new(cfg.clone(), 5).unwrap();
        let logits = |mem: Vec<f64>| {
            eval_var(&model, |m, g| {
                let mv = g.constant(Tensor::new(vec![3, 8], mem).unwrap());
                m.decode(g, mv, 1, None::<&mut NoRng>).unwrap()
            })
        };
        assert_eq!(logits(vec![0.0; 24]), logits((0..24).map(|v| v as f64).collect()));
    }

    #[test]
    fn zeroed_cross_attention_ignores_memory_order() {
        let cfg = PredictorConfig {
            decoder_layers: 1,
            ..micro(Mode::Numeric)
        };
        let mut model = HybridModel::<f64>::new(cfg, 6).unwrap();
        for p in ["wq", "wk", "wv", "wo"] {
            model
                .params
                .get_mut(&format!("dec.l0.cross.{p}"))
                .unwrap()
                .value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let mem: Vec<f64> = (0..24).map(|v| (v as f64 * 0.37).sin()).collect();
        let mut rev = Vec::new();
        for t in (0..3).rev() {
            rev.extend_from_slice(&mem[t * 8..(t + 1) * 8]);
        }
        let logits = |mem: Vec<f64>| {
            eval_var(&model, |m, g| {
                let mv = g.constant(Tensor::new(vec![3, 8], mem).unwrap());
                m.decode(g, mv, 1, None::<&mut NoRng>).unwrap()
            })
        };
        assert_eq!(logits(mem), logits(rev));
    }

    #[test]
    fn predict_switches_and_determinism() {
        let cfg = micro(Mode::Numeric);
        let model = HybridModel::<f32>::new(cfg.clone(), 7).unwrap();
        let mut inp = input(2, &cfg);
        inp.frames = None;
        let preds = model.predict(&inp).unwrap();
        assert_eq!(preds.len(), 2);
        assert_eq!(model.image_encoder_calls(), 0);
        for p in &preds {
            for row in p.probability_rows() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            assert_eq!(p.beam_indices.len(), 2);
        }

        let mut image = HybridModel::<f32>::new(PredictorConfig { mode: Mode::Image, ..cfg.clone() }, 7).unwrap();
        assert!(matches!(
            image.predict(&inp),
            Err(PredictorError::MissingModality { missing: "image", .. })
        ));

        image.config.mode = Mode::Multi;
        let full = input(2, &cfg);
        let a = image.predict(&full).unwrap();
        let b = image.predict(&full).unwrap();
        assert_eq!(a[0].beam_indices, b[0].beam_indices);
        assert_eq!(a[1].logits, b[1].logits);
        assert_eq!(image.image_encoder_calls(), 2);
    }

    #[test]
    fn eval_output_independent_of_dropout_rate() {
        let mut cfg = micro(Mode::Multi);
        let a = HybridModel::<f64>::new(cfg.clone(), 8).unwrap();
        cfg.dropout = 0.7;
        let mut b = HybridModel::<f64>::new(cfg.clone(), 8).unwrap();
        b.params = a.params.clone();
        let inp = input(1, &cfg);
        assert_eq!(a.predict(&inp).unwrap()[0].logits, b.predict(&inp).unwrap()[0].logits);
    }

    #[test]
    fn mode_isolation_of_gradients() {
        for mode in [Mode::Numeric, Mode::Image] {
            let cfg = micro(mode);
            let mut model = HybridModel::<f32>::new(cfg.clone(), 9).unwrap();
            let mut g = Graph::new();
            let mut rng = NoRng::seed_from_u64(1);
            let logits = model.forward(&mut g, &input(2, &cfg), Some(&mut rng)).unwrap();
            let loss = g.cross_entropy(logits, &[0, 1, 2, 3], 2).unwrap();
            g.backward_into(loss, &mut model.params);
            let other = if mode == Mode::Numeric { "img." } else { "num." };
            for (name, p) in model.params.iter() {
                if name.starts_with(other) || name.starts_with("fuse.") {
                    assert!(!p.has_grad, "{name} received a gradient in {mode} mode");
                    assert!(p.grad.iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn end_to_end_gradcheck_micro_config() {
        for mode in Mode::ALL {
            let report = micro_gradcheck(mode).unwrap();
            assert!(report.max_rel_error < 1e-4, "{mode}: {report:?}");
            assert!(report.entries_checked > 40);
        }
    }
}
