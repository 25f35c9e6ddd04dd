//! Parameterized building blocks. Each block has an `init_*` function that
//! registers its parameters under a name prefix and an apply function that
//! reads them back from a [`ParameterSet`].

use rand::Rng;

use super::{positional_encoding, Graph, NnError, ParameterSet, Result, Scalar, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const BACKBONE_WIDTHS: [usize; 4] = [16, 32, 64, 128];
pub const MIN_FRAME_SIDE: usize = 16;
/// Grayscale input plus two coordinate channels.
const BACKBONE_IN_CHANNELS: usize = 3;

/// `y = x W^T + b` for `W[out, in]`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let (ws, bs) = (g.shape(w).to_vec(), g.shape(b).to_vec());
    let in_dim = g.value(x).cols();
    if ws.len() != 2 || ws[1] != in_dim || bs.iter().product::<usize>() != ws[0] {
        return Err(NnError::ShapeMismatch(format!(
            "linear: x [..,{in_dim}], W {ws:?}, b {bs:?}"
        )));
    }
    let y = g.matmul_nt(x, w)?;
    g.add_row(y, b)
}

pub fn init_linear<T: Scalar, R: Rng>(ps: &mut ParameterSet<T>, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Result<()> {
    ps.insert_uniform(&format!("{name}.w"), &[out_dim, in_dim], in_dim, rng)?;
    ps.insert_uniform(&format!("{name}.b"), &[out_dim], in_dim, rng)?;
    Ok(())
}

pub fn apply_linear<T: Scalar>(g: &mut Graph<T>, ps: &ParameterSet<T>, name: &str, x: Var) -> Result<Var> {
    let w = g.param(ps, &format!("{name}.w"))?;
    let b = g.param(ps, &format!("{name}.b"))?;
    linear(g, x, w, b)
}

pub fn init_layer_norm<T: Scalar>(ps: &mut ParameterSet<T>, name: &str, dim: usize) -> Result<()> {
    ps.insert_const(&format!("{name}.gamma"), &[dim], 1.0, true)?;
    ps.insert_const(&format!("{name}.beta"), &[dim], 0.0, true)?;
    Ok(())
}

pub fn apply_layer_norm<T: Scalar>(g: &mut Graph<T>, ps: &ParameterSet<T>, name: &str, x: Var) -> Result<Var> {
    let gamma = g.param(ps, &format!("{name}.gamma"))?;
    let beta = g.param(ps, &format!("{name}.beta"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Query, key, value and output projections, `[d, d]` each, no biases.
pub fn init_mha<T: Scalar, R: Rng>(ps: &mut ParameterSet<T>, name: &str, dim: usize, rng: &mut R) -> Result<()> {
    for p in ["wq", "wk", "wv", "wo"] {
        ps.insert_uniform(&format!("{name}.{p}"), &[dim, dim], dim, rng)?;
    }
    Ok(())
}

/// Multi-head attention of `query[batch*Tq, d]` over `memory[batch*Tk, d]`.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    ps: &ParameterSet<T>,
    name: &str,
    query: Var,
    memory: Var,
    batch: usize,
    heads: usize,
) -> Result<Var> {
    let d = g.value(query).cols();
    if heads == 0 || d % heads != 0 {
        return Err(NnError::IndivisibleHeads { dim: d, heads });
    }
    let [wq, wk, wv, wo] = ["wq", "wk", "wv", "wo"].map(|p| g.param(ps, &format!("{name}.{p}")));
    let q = g.matmul_nt(query, wq?)?;
    let k = g.matmul_nt(memory, wk?)?;
    let v = g.matmul_nt(memory, wv?)?;
    let o = g.attention(q, k, v, batch, heads)?;
    g.matmul_nt(o, wo?)
}

/// Two-layer ReLU MLP applied row-wise.
pub fn init_ffn<T: Scalar, R: Rng>(ps: &mut ParameterSet<T>, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Result<()> {
    init_linear(ps, &format!("{name}.fc1"), dim, hidden, rng)?;
    init_linear(ps, &format!("{name}.fc2"), hidden, dim, rng)
}

pub fn apply_ffn<T: Scalar>(g: &mut Graph<T>, ps: &ParameterSet<T>, name: &str, x: Var) -> Result<Var> {
    let h = apply_linear(g, ps, &format!("{name}.fc1"), x)?;
    let h = g.relu(h);
    apply_linear(g, ps, &format!("{name}.fc2"), h)
}

/// Inverted dropout. Identity when `rng` is `None` (evaluation) or the rate
/// is zero.
pub fn dropout<T: Scalar, R: Rng>(g: &mut Graph<T>, x: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let shape = g.shape(x).to_vec();
    let n = g.value(x).numel();
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect();
    let m = g.constant(Tensor::new(shape, mask)?);
    g.mul(x, m)
}

/// Adds the sinusoidal encoding to every sequence of `x[batch*seq_len, d]`.
pub fn add_positional<T: Scalar>(g: &mut Graph<T>, x: Var, seq_len: usize) -> Result<Var> {
    let d = g.value(x).cols();
    let rows = g.value(x).rows();
    if seq_len == 0 || rows % seq_len != 0 {
        return Err(NnError::ShapeMismatch(format!("positional: {rows} rows, sequence length {seq_len}")));
    }
    let pe = positional_encoding::<T>(seq_len, d)?;
    let tiled: Vec<T> = pe.data().iter().copied().cycle().take(rows * d).collect();
    let c = g.constant(Tensor::new(g.shape(x).to_vec(), tiled)?);
    g.add(x, c)
}

/// Registers the parameters of a selective state-space mixer of width `dim`.
pub fn init_ssm<T: Scalar, R: Rng>(ps: &mut ParameterSet<T>, name: &str, dim: usize, rng: &mut R) -> Result<()> {
    init_linear(ps, &format!("{name}.delta"), dim, dim, rng)?;
    init_linear(ps, &format!("{name}.in"), dim, dim, rng)?;
    ps.insert_const(&format!("{name}.c"), &[dim], 1.0, true)?;
    ps.insert_const(&format!("{name}.skip"), &[dim], 1.0, true)?;
    init_linear(ps, &format!("{name}.out"), dim, dim, rng)
}

/// Selective scan over sequences of `seq_len` rows of `x[batch*seq_len, d]`:
/// step size `softplus(x W_delta + b_delta)` and input `x W_in + b_in` drive a
/// per-channel state; the readout `c * s + skip * x` goes through an output
/// projection.
pub fn selective_ssm_scan<T: Scalar>(g: &mut Graph<T>, ps: &ParameterSet<T>, name: &str, x: Var, seq_len: usize) -> Result<Var> {
    let delta = apply_linear(g, ps, &format!("{name}.delta"), x)?;
    let u = apply_linear(g, ps, &format!("{name}.in"), x)?;
    let s = g.selective_scan(delta, u, seq_len)?;
    let c = g.param(ps, &format!("{name}.c"))?;
    let skip = g.param(ps, &format!("{name}.skip"))?;
    let read = g.mul_row(s, c)?;
    let direct = g.mul_row(x, skip)?;
    let y = g.add(read, direct)?;
    apply_linear(g, ps, &format!("{name}.out"), y)
}

pub fn init_ssm_block<T: Scalar, R: Rng>(ps: &mut ParameterSet<T>, name: &str, dim: usize, rng: &mut R) -> Result<()> {
    init_layer_norm(ps, &format!("{name}.ln"), dim)?;
    init_ssm(ps, &format!("{name}.ssm"), dim, rng)
}

/// Pre-norm residual block: `x + dropout(ssm(LN(x)))`.
#[allow(clippy::too_many_arguments)]
pub fn ssm_block<T: Scalar, R: Rng>(
    g: &mut Graph<T>,
    ps: &ParameterSet<T>,
    name: &str,
    x: Var,
    seq_len: usize,
    dropout_rate: f64,
    rng: Option<&mut R>,
) -> Result<Var> {
    let h = apply_layer_norm(g, ps, &format!("{name}.ln"), x)?;
    let h = selective_ssm_scan(g, ps, &format!("{name}.ssm"), h, seq_len)?;
    let h = dropout(g, h, dropout_rate, rng)?;
    g.add(x, h)
}

/// Registers a four-stage backbone; `widths` are the stage output channels.
pub fn init_backbone<T: Scalar, R: Rng>(ps: &mut ParameterSet<T>, name: &str, widths: &[usize], rng: &mut R) -> Result<()> {
    let mut c = BACKBONE_IN_CHANNELS;
    for (i, &o) in widths.iter().enumerate() {
        ps.insert_he(&format!("{name}.s{i}.conv.w"), &[o, c, 3, 3], c * 9, rng)?;
        ps.insert_const(&format!("{name}.s{i}.conv.b"), &[o], 0.0, true)?;
        ps.insert_uniform(&format!("{name}.s{i}.proj.w"), &[o, c, 1, 1], c, rng)?;
        c = o;
    }
    Ok(())
}

/// Residual convolutional encoder: `frames[B,1,H,W]` (scaled to `[0,1]`)
/// gets two coordinate channels appended, then each stage computes
/// `relu(conv3x3_s2(x) + proj1x1_s2(x))`, and global average pooling gives
/// `[B, widths.last()]`.
pub fn conv_backbone<T: Scalar>(g: &mut Graph<T>, ps: &ParameterSet<T>, name: &str, frames: Var, stages: usize) -> Result<Var> {
    let s = g.shape(frames).to_vec();
    if s.len() != 4 || s[1] != 1 {
        return Err(NnError::ShapeMismatch(format!("backbone expects [B,1,H,W], got {s:?}")));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    if h < MIN_FRAME_SIDE || w < MIN_FRAME_SIDE {
        return Err(NnError::InputTooSmall {
            height: h,
            width: w,
            min: MIN_FRAME_SIDE,
        });
    }
    // Coordinate channels let pooled features retain where things are.
    let mut coords = Vec::with_capacity(b * 2 * h * w);
    for _ in 0..b {
        for y in 0..h {
            for _ in 0..w {
                coords.push(T::lit(2.0 * (y as f64 + 0.5) / h as f64 - 1.0));
            }
        }
        for _ in 0..h {
            for x in 0..w {
                coords.push(T::lit(2.0 * (x as f64 + 0.5) / w as f64 - 1.0));
            }
        }
    }
    let coords = g.constant(Tensor::new(vec![b, 2, h, w], coords)?);
    let mut x = g.concat(frames, coords, 1)?;
    for i in 0..stages {
        let cw = g.param(ps, &format!("{name}.s{i}.conv.w"))?;
        let cb = g.param(ps, &format!("{name}.s{i}.conv.b"))?;
        let pw = g.param(ps, &format!("{name}.s{i}.proj.w"))?;
        let out = g.shape(pw)[0];
        let zero = g.constant(Tensor::zeros(&[out]));
        let main = g.conv2d(x, cw, cb, 2, 1)?;
        let short = g.conv2d(x, pw, zero, 2, 0)?;
        let sum = g.add(main, short)?;
        x = g.relu(sum);
    }
    g.global_avg_pool(x)
}
