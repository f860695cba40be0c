//! Finite-difference gradient checks, loop-based reference oracles and the
//! seeded property suite.
//!
//! The oracles work on plain `f64` tensors with explicit loops and share no
//! code with the tape operations they check.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    gram_schmidt_basis, gram_schmidt_thin_qr, grassmann_distance_map, grassmann_projector, linear,
    mma_attention_forward, mma_attention_traced, spd_distance_map, token_covariance,
    vanilla_mhsa_forward, AttentionConfig, AttentionWeights, Fusion, ManifoldSet,
};
use crate::data::{encode_records, parse_records, record_len, ChannelStats};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::tape::{channel_mix_1x1, concat, Fault, Tape, Var};
use crate::tensor::Tensor;
use crate::train::{
    label_smoothed_cross_entropy, read_checkpoint, write_checkpoint, ScheduleConfig,
};

/// Outcome of one finite-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub input_shapes: Vec<Vec<usize>>,
    pub max_rel_err: f64,
    /// `(input, flat coordinate)` of the largest relative error.
    pub worst: (usize, usize),
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    /// Location of the worst coordinate when the check failed.
    pub fn failing_index(&self) -> Option<(usize, usize)> {
        (!self.passed()).then_some(self.worst)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        write!(
            f,
            "GRAD {} {status} max_rel_err={:.3e}",
            self.name, self.max_rel_err
        )?;
        if let Some((i, j)) = self.failing_index() {
            write!(f, " at input {i} index {j}")?;
        }
        Ok(())
    }
}

/// Central-difference gradient check settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub step: f64,
    pub tolerance: f64,
    /// Fault injected into the analytic backward pass (negative controls).
    pub fault: Option<Fault>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            fault: None,
        }
    }
}

impl GradCheck {
    /// Compares the tape gradient of the scalar `f(inputs)` with central
    /// differences, coordinate by coordinate. Relative error uses the
    /// denominator `max(|a|, |n|, 1e-8)`.
    pub fn run<F>(&self, name: &str, inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
    where
        F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
    {
        let tape = match self.fault {
            Some(fault) => Tape::with_fault(fault),
            None => Tape::new(),
        };
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&vars)?;
        if out.shape().iter().product::<usize>() != 1 {
            return Err(Error::Contract(format!(
                "{name}: grad check needs a scalar function"
            )));
        }
        let grads = tape.backward(out)?;
        let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

        let eval = |pert: &[Tensor<f64>]| -> Result<f64> {
            let tape = Tape::new();
            let vars: Vec<_> = pert.iter().map(|t| tape.constant(t.clone())).collect();
            let v = f(&vars)?.value().data()[0];
            if !v.is_finite() {
                return Err(Error::NumericDomain(format!(
                    "{name}: non-finite function value {v}"
                )));
            }
            Ok(v)
        };
        let mut report = GradCheckReport {
            name: name.to_string(),
            input_shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
            max_rel_err: 0.0,
            worst: (0, 0),
            tolerance: self.tolerance,
        };
        let mut current = inputs.to_vec();
        for i in 0..inputs.len() {
            for j in 0..inputs[i].len() {
                let base = inputs[i].to_vec();
                let mut shifted = |delta: f64| -> Result<f64> {
                    let mut d = base.clone();
                    d[j] += delta;
                    current[i] = Tensor::new(inputs[i].shape().to_vec(), d)?;
                    eval(&current)
                };
                let numeric = (shifted(self.step)? - shifted(-self.step)?) / (2.0 * self.step);
                current[i] = inputs[i].clone();
                let a = analytic[i].data()[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                if rel > report.max_rel_err || rel.is_nan() {
                    report.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
                    report.worst = (i, j);
                }
            }
        }
        Ok(report)
    }
}

/// [`GradCheck::run`] with step `1e-5` and tolerance `1e-4`.
pub fn finite_diff_grad_check<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    GradCheck::default().run(name, inputs, f)
}

// ---------------------------------------------------------------------------
// Oracles

fn dims2(x: &Tensor<f64>, what: &str) -> Result<(usize, usize)> {
    match x.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Dimension(format!(
            "{what}: expected a matrix, got {s:?}"
        ))),
    }
}

/// Token covariance by explicit loops:
/// `C[i][j] = Σ_t (X[i][t] − mean_i)(X[j][t] − mean_j) / (d − 1)`.
pub fn covariance_oracle(x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (l, d) = dims2(x, "covariance_oracle")?;
    if d < 2 {
        return Err(Error::Config("covariance_oracle needs d >= 2".into()));
    }
    let v = x.data();
    let mut mean = vec![0.0; l];
    for i in 0..l {
        for t in 0..d {
            mean[i] += v[i * d + t];
        }
        mean[i] /= d as f64;
    }
    let mut out = vec![0.0; l * l];
    for i in 0..l {
        for j in 0..l {
            let mut s = 0.0;
            for t in 0..d {
                s += (v[i * d + t] - mean[i]) * (v[j * d + t] - mean[j]);
            }
            out[i * l + j] = s / (d as f64 - 1.0);
        }
    }
    Tensor::new([l, l], out)
}

/// Classical Gram–Schmidt thin QR: every projection coefficient of column
/// `j` is taken against the original column. Dependent columns (residual
/// norm below `tol`) give a zero column and a zero diagonal.
pub fn classical_gs_qr_oracle(x: &Tensor<f64>, tol: f64) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let (l, d) = dims2(x, "classical_gs_qr_oracle")?;
    let a = x.data();
    let mut g = vec![0.0; l * d];
    let mut r = vec![0.0; d * d];
    for j in 0..d {
        let mut v: Vec<f64> = (0..l).map(|row| a[row * d + j]).collect();
        for i in 0..j {
            let mut dot = 0.0;
            for row in 0..l {
                dot += g[row * d + i] * a[row * d + j];
            }
            r[i * d + j] = dot;
            for row in 0..l {
                v[row] -= dot * g[row * d + i];
            }
        }
        let norm = v.iter().map(|e| e * e).sum::<f64>().sqrt();
        if norm >= tol {
            r[j * d + j] = norm;
            for row in 0..l {
                g[row * d + j] = v[row] * (1.0 / norm);
            }
        }
    }
    Ok((Tensor::new([l, d], g)?, Tensor::new([d, d], r)?))
}

/// `A B` by the textbook triple loop.
pub fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (m, k) = dims2(a, "matmul_oracle")?;
    let (k2, n) = dims2(b, "matmul_oracle")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul_oracle: {m}×{k} times {k2}×{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a.data()[i * k + t] * b.data()[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new([m, n], out)
}

fn transpose_oracle(a: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (m, n) = dims2(a, "transpose")?;
    Tensor::new(
        [n, m],
        (0..m * n)
            .map(|i| a.data()[(i % m) * n + i / m])
            .collect::<Vec<_>>(),
    )
}

// ---------------------------------------------------------------------------
// Random instances

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Entries with magnitude in `[0.1, 1)`, so `abs` kinks stay far from the
/// finite-difference stencil.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Random orthogonal `n × n` matrix.
fn orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    loop {
        let (g, r) =
            classical_gs_qr_oracle(&uniform(&[n, n], -1.0, 1.0, rng), 1e-6).expect("square");
        if (0..n).all(|i| r.data()[i * n + i] > 1e-3) {
            return g;
        }
    }
}

/// Random invertible matrix with condition number at most 10.
fn well_conditioned(n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let u = orthogonal(n, rng);
    let v = orthogonal(n, rng);
    let s = Tensor::from_fn([n, n], |i| {
        if i / n == i % n {
            rng.gen_range(1.0..10.0)
        } else {
            0.0
        }
    });
    matmul_oracle(&matmul_oracle(&u, &s).expect("square"), &v).expect("square")
}

/// Reduces a tensor to a scalar with fixed pseudo-random weights, so every
/// output coordinate contributes to the checked gradient.
fn weighted_sum<'t>(out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&out.shape(), -1.0, 1.0, &mut rng);
    Ok(out.mul(out.tape().constant(w))?.sum_all())
}

// ---------------------------------------------------------------------------
// Gradient checks

/// Gradient checks of every differentiable primitive on seeded inputs.
pub fn primitive_grad_checks(seed: u64, check: &GradCheck) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let mut run = |name: &str,
                   inputs: Vec<Tensor<f64>>,
                   f: &dyn for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>>| {
        reports.push(check.run(name, &inputs, |v| weighted_sum(f(v)?, 99))?);
        Ok::<_, Error>(())
    };
    let a = |s: &[usize], rng: &mut ChaCha8Rng| uniform(s, -1.0, 1.0, rng);

    run(
        "matmul",
        vec![a(&[2, 3, 4], &mut rng), a(&[2, 4, 2], &mut rng)],
        &|v| v[0].matmul(v[1]),
    )?;
    run("transpose", vec![a(&[2, 3, 4], &mut rng)], &|v| {
        v[0].transpose()
    })?;
    run("permute", vec![a(&[2, 3, 4], &mut rng)], &|v| {
        v[0].permute(&[2, 0, 1])
    })?;
    run("reshape", vec![a(&[2, 3, 4], &mut rng)], &|v| {
        v[0].reshape(&[6, 4])
    })?;
    run(
        "add",
        vec![a(&[3, 4], &mut rng), a(&[3, 4], &mut rng)],
        &|v| v[0].add(v[1]),
    )?;
    run(
        "sub",
        vec![a(&[3, 4], &mut rng), a(&[3, 4], &mut rng)],
        &|v| v[0].sub(v[1]),
    )?;
    run(
        "mul",
        vec![a(&[3, 4], &mut rng), a(&[3, 4], &mut rng)],
        &|v| v[0].mul(v[1]),
    )?;
    run("scale", vec![a(&[3, 4], &mut rng)], &|v| {
        Ok(v[0].scale(-1.7))
    })?;
    run(
        "add_trailing",
        vec![a(&[2, 3, 4], &mut rng), a(&[3, 4], &mut rng)],
        &|v| v[0].add_trailing(v[1]),
    )?;
    run(
        "scale_rows",
        vec![a(&[2, 3, 4], &mut rng), a(&[2, 3], &mut rng)],
        &|v| v[0].scale_rows(v[1]),
    )?;
    run("abs", vec![away_from_zero(&[3, 4], &mut rng)], &|v| {
        Ok(v[0].abs())
    })?;
    run("gelu", vec![uniform(&[3, 4], -3.0, 3.0, &mut rng)], &|v| {
        Ok(v[0].gelu())
    })?;
    run("sum_last", vec![a(&[3, 4], &mut rng)], &|v| v[0].sum_last())?;
    run("mean_last", vec![a(&[3, 4], &mut rng)], &|v| {
        v[0].mean_last()
    })?;
    run("norm_last", vec![away_from_zero(&[3, 4], &mut rng)], &|v| {
        v[0].norm_last()
    })?;
    run("sum_all", vec![a(&[3, 4], &mut rng)], &|v| {
        Ok(v[0].sum_all())
    })?;
    run("broadcast_last", vec![a(&[3, 2], &mut rng)], &|v| {
        v[0].broadcast_last(3)
    })?;
    run(
        "recip_or_zero",
        vec![away_from_zero(&[3, 4], &mut rng)],
        &|v| Ok(v[0].recip_or_zero(1e-3)),
    )?;
    run(
        "softmax_rows",
        vec![uniform(&[3, 5], -2.0, 2.0, &mut rng)],
        &|v| v[0].softmax_rows(),
    )?;
    run(
        "log_softmax_rows",
        vec![uniform(&[3, 5], -2.0, 2.0, &mut rng)],
        &|v| v[0].log_softmax_rows(),
    )?;
    run(
        "layer_norm",
        vec![
            uniform(&[2, 3, 5], -2.0, 2.0, &mut rng),
            uniform(&[5], 0.5, 1.5, &mut rng),
            a(&[5], &mut rng),
        ],
        &|v| v[0].layer_norm(v[1], v[2]),
    )?;
    run("slice", vec![a(&[2, 5, 3], &mut rng)], &|v| {
        v[0].slice(1, 1, 3)
    })?;
    run(
        "concat",
        vec![a(&[2, 3], &mut rng), a(&[2, 2], &mut rng)],
        &|v| concat(&[v[0], v[1]], 1),
    )?;
    run(
        "channel_mix_1x1",
        vec![
            a(&[2, 6, 3, 3], &mut rng),
            a(&[2, 6], &mut rng),
            a(&[2], &mut rng),
        ],
        &|v| channel_mix_1x1(v[0], v[1], v[2]),
    )?;
    run("token_covariance", vec![a(&[2, 5, 4], &mut rng)], &|v| {
        token_covariance(v[0])
    })?;
    run(
        "spd_distance_map",
        vec![a(&[5, 4], &mut rng), a(&[5, 4], &mut rng)],
        &|v| spd_distance_map(token_covariance(v[0])?, token_covariance(v[1])?, 4),
    )?;
    run("gram_schmidt_q", vec![a(&[6, 3], &mut rng)], &|v| {
        Ok(gram_schmidt_thin_qr(v[0], 1e-10)?.0)
    })?;
    run("gram_schmidt_r", vec![a(&[6, 3], &mut rng)], &|v| {
        Ok(gram_schmidt_thin_qr(v[0], 1e-10)?.1)
    })?;
    run("grassmann_projector", vec![a(&[6, 3], &mut rng)], &|v| {
        grassmann_projector(gram_schmidt_basis(v[0], 1e-10)?)
    })?;
    run(
        "grassmann_distance_map",
        vec![a(&[6, 3], &mut rng), a(&[6, 3], &mut rng)],
        &|v| {
            grassmann_distance_map(
                gram_schmidt_basis(v[0], 1e-10)?,
                gram_schmidt_basis(v[1], 1e-10)?,
            )
        },
    )?;
    let targets = Tensor::new([2, 3], vec![0.2, 0.8, 0.0, 0.0, 0.0, 1.0])?;
    reports.push(check.run(
        "label_smoothed_cross_entropy",
        &[a(&[2, 3], &mut rng)],
        |v| label_smoothed_cross_entropy(v[0], &targets, 0.1),
    )?);
    Ok(reports)
}

/// Names of the finite-difference inputs of [`mma_block_grad_check`], in
/// order.
pub const MMA_BLOCK_INPUTS: [&str; 15] = [
    "x",
    "ln1.gamma",
    "ln1.beta",
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "attn.wo_bias",
    "attn.mix.weight",
    "ln2.gamma",
    "ln2.beta",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

/// Gradient check of a full pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockCheckReport {
    /// Central differences over the input and every parameter except the
    /// fusion bias.
    pub grad: GradCheckReport,
    /// Largest tape gradient of the fusion bias. The bias shifts a whole
    /// softmax row, so its exact gradient is zero; central differences only
    /// see rounding noise there and cannot resolve it.
    pub mix_bias_grad: f64,
}

impl BlockCheckReport {
    pub const MIX_BIAS_TOLERANCE: f64 = 1e-12;

    pub fn passed(&self) -> bool {
        self.grad.passed() && self.mix_bias_grad <= Self::MIX_BIAS_TOLERANCE
    }
}

impl fmt::Display for BlockCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} mix_bias_grad={:.3e}", self.grad, self.mix_bias_grad)
    }
}

fn mma_block_loss<'t>(
    cfg: &AttentionConfig,
    v: &[Var<'t, f64>],
    mix_bias: Var<'t, f64>,
) -> Result<Var<'t, f64>> {
    let normed = v[0].layer_norm(v[1], v[2])?;
    let weights = AttentionWeights::from_lookup(cfg, |name| match name {
        "wq" => Ok(v[3]),
        "wk" => Ok(v[4]),
        "wv" => Ok(v[5]),
        "wo" => Ok(v[6]),
        "wo_bias" => Ok(v[7]),
        "mix.weight" => Ok(v[8]),
        "mix.bias" => Ok(mix_bias),
        other => Err(Error::MissingNode(other.to_string())),
    })?;
    let x = v[0].add(mma_attention_forward(normed, &weights, cfg)?)?;
    let normed = x.layer_norm(v[9], v[10])?;
    let hidden = linear(normed, v[11], Some(v[12]))?.gelu();
    let out = x.add(linear(hidden, v[13], Some(v[14]))?)?;
    weighted_sum(out, 7)
}

/// Gradient check of a full pre-norm transformer block with early-fusion
/// MMA over all three manifolds, `L = 6`, `D = 8`, `h = 2`.
pub fn mma_block_grad_check(seed: u64, check: &GradCheck) -> Result<BlockCheckReport> {
    let (l, dm, h, hid) = (6, 8, 2, 16);
    let cfg = AttentionConfig::euclidean(h, dm).with_manifolds(ManifoldSet::ALL, Fusion::Early);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |s: &[usize], lo: f64, hi: f64| uniform(s, lo, hi, &mut rng);
    let inputs = vec![
        u(&[1, l, dm], -1.0, 1.0),
        u(&[dm], 0.5, 1.5),
        u(&[dm], -0.5, 0.5),
        u(&[dm, dm], -0.6, 0.6),
        u(&[dm, dm], -0.6, 0.6),
        u(&[dm, dm], -0.6, 0.6),
        u(&[dm, dm], -0.6, 0.6),
        u(&[dm], -0.5, 0.5),
        u(&[h, 3 * h], -1.0, 1.0),
        u(&[dm], 0.5, 1.5),
        u(&[dm], -0.5, 0.5),
        u(&[dm, hid], -0.5, 0.5),
        u(&[hid], -0.5, 0.5),
        u(&[hid, dm], -0.5, 0.5),
        u(&[dm], -0.5, 0.5),
    ];
    let bias = u(&[h], -0.5, 0.5);
    let grad = check.run("mma_block", &inputs, |v| {
        let b = v[0].tape().constant(bias.clone());
        mma_block_loss(&cfg, v, b)
    })?;

    let tape = match check.fault {
        Some(fault) => Tape::with_fault(fault),
        None => Tape::new(),
    };
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let b = tape.param(bias.clone());
    let grads = tape.backward(mma_block_loss(&cfg, &vars, b)?)?;
    Ok(BlockCheckReport {
        grad,
        mix_bias_grad: grads.get_or_zeros(b).max_abs(),
    })
}

// ---------------------------------------------------------------------------
// Property suite

/// Result of one seeded property.
#[derive(Clone, Debug, PartialEq)]
pub struct PropResult {
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed error (or mismatch count) over all cases.
    pub metric: f64,
    pub cases: usize,
}

impl fmt::Display for PropResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "PROP {} {status} {:.3e}", self.name, self.metric)
    }
}

fn prop(name: &'static str, cases: usize, tol: f64, worst: f64) -> PropResult {
    PropResult {
        name,
        passed: worst <= tol,
        metric: worst,
        cases,
    }
}

fn random_attention_weights<'t>(
    tape: &'t Tape<f64>,
    cfg: &AttentionConfig,
    rng: &mut ChaCha8Rng,
    selector: bool,
) -> Result<AttentionWeights<'t, f64>> {
    let params: Vec<(String, Tensor<f64>)> = cfg
        .param_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let t = match (name.as_str(), selector) {
                ("mix.weight", true) => {
                    cfg.init_params::<f64, _>(rng, 0.0)
                        .into_iter()
                        .find(|(n, _)| n == "mix.weight")
                        .expect("mix")
                        .1
                }
                ("mix.bias", true) => Tensor::zeros(shape),
                _ => uniform(&shape, -0.5, 0.5, rng),
            };
            (name, t)
        })
        .collect();
    AttentionWeights::from_lookup(cfg, |name| {
        params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| tape.constant(t.clone()))
            .ok_or_else(|| Error::MissingNode(name.to_string()))
    })
}

/// Every attention row of an all-manifold layer sums to one.
pub fn prop_row_stochastic(seed: u64, cases: usize) -> Result<PropResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let l = rng.gen_range(3..9);
        let fusion = if rng.gen_bool(0.5) {
            Fusion::Early
        } else {
            Fusion::Late
        };
        let cfg = AttentionConfig::euclidean(2, 8).with_manifolds(ManifoldSet::ALL, fusion);
        let tape = Tape::new();
        let w = random_attention_weights(&tape, &cfg, &mut rng, false)?;
        let x = tape.constant(uniform(&[2, l, 8], -2.0, 2.0, &mut rng));
        let (_, trace) = mma_attention_traced(x, &w, &cfg)?;
        for a in trace.attention {
            for row in a.value().data().chunks(l) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                if row.iter().any(|&p| p < 0.0) {
                    worst = f64::INFINITY;
                }
            }
        }
    }
    Ok(prop("attention_row_stochastic", cases, 1e-12, worst))
}

/// `D_SPD(X, X)` and `D_G(X, X)` are exactly zero.
pub fn prop_zero_self_distance(seed: u64, cases: usize) -> Result<(PropResult, PropResult)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut spd, mut grass): (f64, f64) = (0.0, 0.0);
    for _ in 0..cases {
        let l = rng.gen_range(2..10);
        let d = rng.gen_range(2..6);
        let tape = Tape::new();
        let x = tape.constant(uniform(&[l, d], -3.0, 3.0, &mut rng));
        let c = token_covariance(x)?;
        spd = spd.max(spd_distance_map(c, c, d)?.value().max_abs());
        let g = gram_schmidt_basis(x, 1e-10)?;
        grass = grass.max(grassmann_distance_map(g, g)?.value().max_abs());
    }
    Ok((
        prop("spd_zero_self_distance", cases, 0.0, spd),
        prop("grassmann_zero_self_distance", cases, 0.0, grass),
    ))
}

/// `D_G(QR(XA), QR(X)) = 0` for invertible `A` with condition number ≤ 10.
pub fn prop_grassmann_right_invariance(seed: u64, cases: usize) -> Result<PropResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let d = rng.gen_range(2..5);
        let l = rng.gen_range(d + 2..d + 8);
        let x = uniform(&[l, d], -1.0, 1.0, &mut rng);
        let xa = matmul_oracle(&x, &well_conditioned(d, &mut rng))?;
        let tape = Tape::new();
        let g1 = gram_schmidt_basis(tape.constant(xa), 1e-10)?;
        let g2 = gram_schmidt_basis(tape.constant(x), 1e-10)?;
        worst = worst.max(grassmann_distance_map(g1, g2)?.value().max_abs());
    }
    Ok(prop("grassmann_right_invariance", cases, 1e-8, worst))
}

/// Adding a constant to every feature of a token leaves the token
/// covariance unchanged.
pub fn prop_covariance_shift_invariance(seed: u64, cases: usize) -> Result<PropResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (l, d) = (rng.gen_range(2..9), rng.gen_range(2..9));
        let x = uniform(&[l, d], -1.0, 1.0, &mut rng);
        let shifts: Vec<f64> = (0..l).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let shifted = Tensor::from_fn([l, d], |i| x.data()[i] + shifts[i / d]);
        let tape = Tape::new();
        let a = token_covariance(tape.constant(x))?.value();
        let b = token_covariance(tape.constant(shifted))?.value();
        worst = worst.max(a.max_abs_diff(&b));
    }
    Ok(prop("covariance_shift_invariance", cases, 1e-10, worst))
}

/// `P = G Gᵀ` is symmetric and idempotent.
pub fn prop_projector_idempotent(seed: u64, cases: usize) -> Result<PropResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let d = rng.gen_range(1..5);
        let l = rng.gen_range(d..d + 6);
        let tape = Tape::new();
        let g = gram_schmidt_basis(tape.constant(uniform(&[l, d], -1.0, 1.0, &mut rng)), 1e-10)?;
        let p = grassmann_projector(g)?.value();
        let pp = matmul_oracle(&p, &p)?;
        worst = worst
            .max(pp.max_abs_diff(&p))
            .max(transpose_oracle(&p)?.max_abs_diff(&p));
    }
    Ok(prop("projector_idempotent_symmetric", cases, 1e-10, worst))
}

/// All-manifold early fusion with a Euclidean selector mix reproduces plain
/// multi-head attention.
pub fn prop_fusion_reduction(seed: u64, cases: usize) -> Result<PropResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let h = rng.gen_range(1..4);
        let dm = h * rng.gen_range(2..5);
        let l = rng.gen_range(2..9);
        let cfg = AttentionConfig::euclidean(h, dm).with_manifolds(ManifoldSet::ALL, Fusion::Early);
        let tape = Tape::new();
        let w = random_attention_weights(&tape, &cfg, &mut rng, true)?;
        let x = tape.constant(uniform(&[2, l, dm], -2.0, 2.0, &mut rng));
        let mma = mma_attention_forward(x, &w, &cfg)?.value();
        let vanilla = vanilla_mhsa_forward(x, &w, h)?.value();
        worst = worst.max(mma.max_abs_diff(&vanilla));
    }
    Ok(prop("fusion_reduction", cases, 1e-10, worst))
}

/// Production covariance, QR projector and matmul against the loop oracles.
pub fn prop_oracles(seed: u64, cases: usize) -> Result<[PropResult; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut cov, mut qr, mut mm): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..cases {
        let (l, d) = (rng.gen_range(2..17), rng.gen_range(2..9));
        let x = uniform(&[l, d], -1.0, 1.0, &mut rng);
        let tape = Tape::new();
        let c = token_covariance(tape.constant(x.clone()))?.value();
        cov = cov.max(c.max_abs_diff(&covariance_oracle(&x)?));

        let d = d.min(l);
        let x = uniform(&[l, d], -1.0, 1.0, &mut rng);
        let (g_oracle, _) = classical_gs_qr_oracle(&x, 1e-10)?;
        let p_oracle = matmul_oracle(&g_oracle, &transpose_oracle(&g_oracle)?)?;
        let p = grassmann_projector(gram_schmidt_basis(tape.constant(x), 1e-10)?)?.value();
        qr = qr.max(p.max_abs_diff(&p_oracle));

        let (m, k, n) = (
            rng.gen_range(1..12),
            rng.gen_range(1..12),
            rng.gen_range(1..12),
        );
        let a = uniform(&[m, k], -1.0, 1.0, &mut rng);
        let b = uniform(&[k, n], -1.0, 1.0, &mut rng);
        let prod = tape
            .constant(a.clone())
            .matmul(tape.constant(b.clone()))?
            .value();
        mm = mm.max(prod.max_abs_diff(&matmul_oracle(&a, &b)?));
    }
    Ok([
        prop("covariance_oracle", cases, 1e-12, cov),
        prop("qr_projector_oracle", cases, 1e-8, qr),
        prop("matmul_oracle", cases, 1e-12, mm),
    ])
}

/// Random record bytes parse and re-encode to identical bytes; the metric
/// counts mismatching files.
pub fn prop_loader_round_trip(seed: u64, cases: usize) -> Result<PropResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0usize;
    for _ in 0..cases {
        let size = rng.gen_range(1..6);
        let n = rng.gen_range(1..5);
        let mut bytes: Vec<u8> = (0..n * record_len(size)).map(|_| rng.gen()).collect();
        for r in 0..n {
            bytes[r * record_len(size)] %= 10;
        }
        if encode_records(&parse_records(&bytes, size, 10)?)? != bytes {
            bad += 1;
        }
    }
    Ok(prop("loader_round_trip", cases, 0.0, bad as f64))
}

/// Checkpoint bytes survive a read/write cycle unchanged.
pub fn prop_checkpoint_round_trip(seed: u64, cases: usize) -> Result<PropResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0usize;
    for _ in 0..cases {
        let mut cfg = ModelConfig::default();
        cfg.image_size = 8;
        cfg.depth = rng.gen_range(1..3);
        cfg.attention.heads = 2;
        cfg.attention.model_dim = 8;
        cfg.attention.fusion = if rng.gen_bool(0.5) {
            Fusion::Early
        } else {
            Fusion::Late
        };
        let w = ModelWeights::<f64>::init(&cfg, &mut rng)?;
        let stats = ChannelStats {
            mean: (0..3).map(|_| rng.gen()).collect(),
            std: (0..3).map(|_| rng.gen_range(0.1..1.0)).collect(),
        };
        let bytes = write_checkpoint(&cfg, &w, &stats)?;
        let ck = read_checkpoint(&bytes)?;
        if write_checkpoint(&ck.config, &ck.weights, &ck.stats)? != bytes
            || ck.config != cfg
            || ck.stats != stats
        {
            bad += 1;
        }
    }
    Ok(prop("checkpoint_round_trip", cases, 0.0, bad as f64))
}

/// Warmup starts at zero, peaks at the base rate, is continuous at the
/// warmup boundary, never goes negative and clamps past the end.
pub fn prop_schedule(seed: u64, cases: usize) -> Result<PropResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let total = rng.gen_range(1..40);
        let s = ScheduleConfig {
            base_lr: rng.gen_range(1e-5..1e-2),
            warmup_epochs: rng.gen_range(0..=total),
            total_epochs: total,
            steps_per_epoch: rng.gen_range(1..20),
        };
        s.validate()?;
        let (warm, end) = (s.warmup_steps(), s.total_steps());
        let rel = |x: f64| x / s.base_lr;
        if warm > 0 {
            worst = worst.max(rel(s.lr(0).abs()));
            // one warmup increment is the largest admissible jump
            let jump = (s.lr(warm) - s.lr(warm - 1)).abs();
            worst = worst.max(rel((jump - s.base_lr / warm as f64).max(0.0)));
        }
        let peak = (0..=end).map(|t| s.lr(t)).fold(f64::MIN, f64::max);
        worst = worst.max(rel((peak - s.base_lr).abs()));
        if (0..=end + 5).any(|t| s.lr(t) < 0.0) {
            worst = f64::INFINITY;
        }
        worst = worst.max(rel((s.lr(end + 7) - s.lr(end)).abs()));
    }
    Ok(prop("schedule_properties", cases, 1e-12, worst))
}

/// Uniform logits give loss `ln K` for any stochastic targets and any ε.
pub fn prop_uniform_logit_loss(seed: u64, cases: usize) -> Result<PropResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (b, k) = (rng.gen_range(1..6), rng.gen_range(2..12));
        let raw = uniform(&[b, k], 0.0, 1.0, &mut rng);
        let targets = Tensor::from_fn([b, k], |i| {
            let row = &raw.data()[i / k * k..(i / k + 1) * k];
            raw.data()[i] / row.iter().sum::<f64>()
        });
        let c = rng.gen_range(-3.0..3.0);
        let tape = Tape::new();
        let logits = tape.constant(Tensor::full([b, k], c));
        let eps = rng.gen_range(0.0..0.99);
        let loss = label_smoothed_cross_entropy(logits, &targets, eps)?
            .value()
            .data()[0];
        worst = worst.max((loss - (k as f64).ln()).abs());
    }
    Ok(prop("uniform_logit_loss", cases, 1e-12, worst))
}

/// Aggregated property results.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteReport {
    pub seed: u64,
    pub results: Vec<PropResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &PropResult> {
        self.results.iter().filter(|r| !r.passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(f, "{r}")?;
        }
        let failed = self.failures().count();
        write!(
            f,
            "SUITE seed={} {} properties, {failed} failed",
            self.seed,
            self.results.len()
        )
    }
}

/// Runs every property over seeded random instances. `fault` is injected
/// into the gradient checks only.
pub fn run_property_suite(seed: u64, fault: Option<Fault>) -> Result<SuiteReport> {
    let mut results = vec![prop_row_stochastic(seed, 30)?];
    let (spd, grass) = prop_zero_self_distance(seed, 100)?;
    results.extend([spd, grass]);
    results.push(prop_grassmann_right_invariance(seed, 100)?);
    results.push(prop_covariance_shift_invariance(seed, 100)?);
    results.push(prop_projector_idempotent(seed, 100)?);
    results.push(prop_fusion_reduction(seed, 20)?);
    results.extend(prop_oracles(seed, 100)?);
    results.push(prop_loader_round_trip(seed, 50)?);
    results.push(prop_checkpoint_round_trip(seed, 5)?);
    results.push(prop_schedule(seed, 100)?);
    results.push(prop_uniform_logit_loss(seed, 100)?);

    let check = GradCheck {
        fault,
        ..GradCheck::default()
    };
    let prims = primitive_grad_checks(seed, &check)?;
    let worst = prims.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    results.push(PropResult {
        name: "gradient_primitives",
        passed: prims.iter().all(GradCheckReport::passed),
        metric: worst,
        cases: prims.len(),
    });
    let block = mma_block_grad_check(seed, &check)?;
    results.push(PropResult {
        name: "gradient_mma_block",
        passed: block.passed(),
        metric: block.grad.max_rel_err,
        cases: 1,
    });
    Ok(SuiteReport { seed, results })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_check() {
        let x = Tensor::new([4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let r = finite_diff_grad_check("sum_sq", &[x], |v| Ok(v[0].mul(v[0])?.sum_all())).unwrap();
        assert!(r.passed());
        assert!(r.max_rel_err < 1e-8, "{r}");
    }

    #[test]
    fn faulty_abs_is_caught_with_index() {
        let x = Tensor::new([3], vec![0.5, -0.7, 0.9]).unwrap();
        let check = GradCheck {
            fault: Some(Fault::AbsGradient),
            ..Default::default()
        };
        let r = check
            .run("abs", &[x], |v| Ok(v[0].abs().sum_all()))
            .unwrap();
        assert!(!r.passed());
        assert_eq!(r.failing_index().map(|(i, _)| i), Some(0));
        assert!(r.to_string().contains("FAIL"));
    }

    #[test]
    fn covariance_oracle_edge_cases() {
        let c = covariance_oracle(&Tensor::full([3, 4], 2.5)).unwrap();
        assert_eq!(c.max_abs(), 0.0);
        let x = Tensor::new([1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(covariance_oracle(&x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn single_column_qr_matches_production() {
        let x = Tensor::new([3, 1], vec![3.0, 0.0, 4.0]).unwrap();
        let (g, r) = classical_gs_qr_oracle(&x, 1e-10).unwrap();
        let tape = Tape::new();
        let (gp, rp) = gram_schmidt_thin_qr(tape.constant(x), 1e-10).unwrap();
        assert_eq!(g, gp.value());
        assert_eq!(r, rp.value());
    }

    #[test]
    fn near_collinear_projectors_stay_idempotent() {
        let x = Tensor::new(
            [4, 2],
            vec![1.0, 1.0, 1.0, 1.0 + 1e-9, 1.0, 1.0, 1.0, 1.0 - 1e-9],
        )
        .unwrap();
        let (g, _) = classical_gs_qr_oracle(&x, 1e-10).unwrap();
        let p = matmul_oracle(&g, &transpose_oracle(&g).unwrap()).unwrap();
        assert!(matmul_oracle(&p, &p).unwrap().max_abs_diff(&p) < 1e-6);
        let tape = Tape::new();
        let pp = grassmann_projector(gram_schmidt_basis(tape.constant(x), 1e-10).unwrap())
            .unwrap()
            .value();
        assert!(matmul_oracle(&pp, &pp).unwrap().max_abs_diff(&pp) < 1e-6);
    }
}
