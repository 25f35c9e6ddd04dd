//! Central-difference checks for every graph op and layer, shared by the
//! test suites and the `gradcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{self, BACKBONE_WIDTHS, LN_EPS};
use super::{grad_check, GradCheckOptions, GradCheckReport, Graph, ParameterSet, Result, Tensor, Var};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    // Magnitudes in [0.1, 1] keep relu inputs clear of the kink.
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Weights every output entry by a fixed random factor and sums, so that
/// each entry's gradient path is exercised.
fn weighted_sum(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let w = random(&g.shape(y).to_vec(), g.value(y).numel() as u64 ^ 0x77);
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

type Build = Box<dyn Fn(&mut Graph<f64>, &ParameterSet<f64>) -> Result<Var>>;

struct Case {
    name: &'static str,
    params: ParameterSet<f64>,
    build: Build,
    max_entries: usize,
}

fn case(
    name: &'static str,
    inputs: &[(&str, &[usize])],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    let mut params = ParameterSet::new();
    for (i, (n, shape)) in inputs.iter().enumerate() {
        params.insert(n, random(shape, 1000 + i as u64 * 17 + name.len() as u64), true).expect("unique names");
    }
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.to_string()).collect();
    Case {
        name,
        params,
        build: Box::new(move |g, ps| {
            let vars = names.iter().map(|n| g.param(ps, n)).collect::<Result<Vec<_>>>()?;
            let y = build(g, &vars)?;
            weighted_sum(g, y)
        }),
        max_entries: usize::MAX,
    }
}

fn layer_case(
    name: &'static str,
    input: &[usize],
    max_entries: usize,
    init: impl FnOnce(&mut ParameterSet<f64>, &mut ChaCha8Rng) -> Result<()>,
    build: impl Fn(&mut Graph<f64>, &ParameterSet<f64>, Var) -> Result<Var> + 'static,
) -> Result<Case> {
    let mut params = ParameterSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
    init(&mut params, &mut rng)?;
    // Zero biases put relu inputs on the kink for symmetric patches.
    for (n, p) in params.iter_mut() {
        if n.ends_with(".b") && p.trainable {
            for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                *v += 0.01 * (1.0 + i as f64 * 0.37).sin();
            }
        }
    }
    params.insert("x", random(input, 4242), true)?;
    Ok(Case {
        name,
        params,
        build: Box::new(move |g, ps| {
            let x = g.param(ps, "x")?;
            let y = build(g, ps, x)?;
            weighted_sum(g, y)
        }),
        max_entries,
    })
}

fn cases() -> Result<Vec<Case>> {
    let mut out = vec![
        case("add", &[("a", &[3, 4]), ("b", &[3, 4])], |g, v| g.add(v[0], v[1])),
        case("sub", &[("a", &[3, 4]), ("b", &[3, 4])], |g, v| g.sub(v[0], v[1])),
        case("mul", &[("a", &[3, 4]), ("b", &[3, 4])], |g, v| g.mul(v[0], v[1])),
        case("add_row", &[("x", &[5, 3]), ("b", &[3])], |g, v| g.add_row(v[0], v[1])),
        case("mul_row", &[("x", &[5, 3]), ("s", &[3])], |g, v| g.mul_row(v[0], v[1])),
        case("scale", &[("x", &[3, 4])], |g, v| Ok(g.scale(v[0], -1.7))),
        case("matmul", &[("a", &[2, 5, 4]), ("b", &[4, 3])], |g, v| g.matmul(v[0], v[1])),
        case("matmul_nt", &[("a", &[5, 4]), ("b", &[3, 4])], |g, v| g.matmul_nt(v[0], v[1])),
        case("relu", &[("x", &[3, 4])], |g, v| Ok(g.relu(v[0]))),
        case("sigmoid", &[("x", &[3, 4])], |g, v| Ok(g.sigmoid(v[0]))),
        case("softplus", &[("x", &[3, 4])], |g, v| Ok(g.softplus(v[0]))),
        case("softmax", &[("x", &[3, 5])], |g, v| Ok(g.softmax(v[0]))),
        case("layer_norm", &[("x", &[4, 5]), ("gamma", &[5]), ("beta", &[5])], |g, v| {
            g.layer_norm(v[0], v[1], v[2], LN_EPS)
        }),
        case("attention", &[("q", &[6, 4]), ("k", &[8, 4]), ("v", &[8, 4])], |g, v| {
            g.attention(v[0], v[1], v[2], 2, 2)
        }),
        case("selective_scan", &[("delta", &[6, 3]), ("u", &[6, 3])], |g, v| g.selective_scan(v[0], v[1], 3)),
        case("conv2d", &[("x", &[2, 2, 5, 6]), ("w", &[3, 2, 3, 3]), ("b", &[3])], |g, v| {
            g.conv2d(v[0], v[1], v[2], 2, 1)
        }),
        case("global_avg_pool", &[("x", &[2, 3, 2, 2])], |g, v| g.global_avg_pool(v[0])),
        case("reshape", &[("x", &[4, 3])], |g, v| g.reshape(v[0], &[2, 6])),
        case("concat", &[("a", &[4, 3]), ("b", &[4, 2])], |g, v| g.concat(v[0], v[1], 1)),
        case("gather_rows", &[("x", &[4, 3])], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3])),
        case("gate_mix", &[("z", &[2, 3]), ("a", &[2, 3]), ("b", &[2, 3])], |g, v| {
            let gate = g.sigmoid(v[0]);
            g.gate_mix(gate, v[1], v[2])
        }),
        case("cross_entropy", &[("x", &[3, 4])], |g, v| g.cross_entropy(v[0], &[2, 0, 1], 2)),
        case("mean", &[("x", &[3, 4])], |g, v| Ok(g.mean(v[0]))),
    ];
    out.push(layer_case(
        "linear",
        &[5, 4],
        usize::MAX,
        |ps, rng| layers::init_linear(ps, "lin", 4, 3, rng),
        |g, ps, x| layers::apply_linear(g, ps, "lin", x),
    )?);
    out.push(layer_case(
        "ffn",
        &[5, 4],
        usize::MAX,
        |ps, rng| layers::init_ffn(ps, "ffn", 4, 16, rng),
        |g, ps, x| layers::apply_ffn(g, ps, "ffn", x),
    )?);
    out.push(layer_case(
        "multi_head_attention",
        &[6, 4],
        usize::MAX,
        |ps, rng| layers::init_mha(ps, "mha", 4, rng),
        |g, ps, x| layers::multi_head_attention(g, ps, "mha", x, x, 2, 2),
    )?);
    out.push(layer_case(
        "ssm_block",
        &[6, 4],
        usize::MAX,
        |ps, rng| layers::init_ssm_block(ps, "ssm", 4, rng),
        |g, ps, x| layers::ssm_block(g, ps, "ssm", x, 3, 0.0, None::<&mut ChaCha8Rng>),
    )?);
    out.push(layer_case(
        "conv_backbone",
        &[2, 1, 16, 16],
        6,
        |ps, rng| layers::init_backbone(ps, "cnn", &BACKBONE_WIDTHS, rng),
        |g, ps, x| layers::conv_backbone(g, ps, "cnn", x, BACKBONE_WIDTHS.len()),
    )?);
    Ok(out)
}

/// Runs every op and layer check in 64-bit precision; returns one report
/// per check, in a fixed order.
pub fn op_gradchecks() -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut reports = Vec::new();
    for mut c in cases()? {
        let opts = GradCheckOptions {
            max_entries_per_param: c.max_entries,
            ..GradCheckOptions::default()
        };
        let build = &c.build;
        let r = grad_check(&mut c.params, &opts, |g, ps| build(g, ps))?;
        reports.push((c.name, r));
    }
    Ok(reports)
}
