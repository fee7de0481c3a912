use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor, TensorError, Var};

/// Outcome of comparing the tape's gradient with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tol: f64,
    pub passed: bool,
}

/// Denominator floor so near-zero gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks `d f / d x` against `(f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)` for every coordinate.
///
/// `f` must build a scalar on the tape it is given. Non-finite values abort
/// the check with the name of the producing op.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(TensorError::InvalidShape {
            op: "grad_check",
            msg: format!("eps {eps} outside [1e-6, 1e-4]"),
        });
    }
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe);
        let out = f(&mut t, v)?;
        Ok(t.value(out).data()[0])
    };

    let mut numeric = Vec::with_capacity(x.numel());
    let mut max_rel_error = 0.0f64;
    let mut worst_index = 0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let d = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = relative_error(analytic[i], d);
        if err > max_rel_error {
            max_rel_error = err;
            worst_index = i;
        }
        numeric.push(d);
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
        tol,
        passed: max_rel_error <= tol,
    })
}

/// Worst-case result of repeated gradient checks on one primitive.
#[derive(Debug, Clone)]
pub struct PrimitiveCheck {
    pub op: &'static str,
    pub trials: usize,
    pub max_rel_error: f64,
}

type Probe = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

/// Builds a random scalar probe `sum(w ∘ op(x, ..))` for the named primitive,
/// returning the probe and the input it should be differentiated at.
fn primitive_probe(op: &'static str, rng: &mut ChaCha8Rng) -> (Probe, Tensor<f64>) {
    let mut randn = |shape: &[usize]| Tensor::<f64>::randn(shape, 1.0, &mut *rng);
    let x = match op {
        "log" => randn(&[6]).data().iter().map(|v| v.abs() + 0.5).collect::<Vec<_>>(),
        "clamp_min" => randn(&[6]).data().iter().map(|v| if v.abs() < 0.1 { 0.3 } else { *v }).collect(),
        _ => Vec::new(),
    };
    let shape_x: Vec<usize> = match op {
        "matmul_a" | "matmul_b" | "matmul_nt" => vec![3, 4],
        "batched_matmul" => vec![2, 3, 4],
        "permute" => vec![2, 3, 2],
        "masked_softmax" | "layer_norm" | "layer_norm_gain" | "cross_entropy" | "mean_rows" | "gather" | "concat" => {
            vec![3, 5]
        }
        _ => vec![6],
    };
    let x = if x.is_empty() {
        randn(&shape_x)
    } else {
        Tensor::new(&[6], x).expect("shape")
    };
    let mut gen = |s: &[usize]| randn(s);
    let c1 = gen(&[6]);
    let w6 = gen(&[6]);
    let m44 = gen(&[4, 2]);
    let m34 = gen(&[3, 4]);
    let b3 = gen(&[2, 4, 3]);
    let w_out = gen(&[64]);
    let g5 = gen(&[5]);
    let b5 = gen(&[5]);
    let extra = gen(&[3, 2]);

    // reduce an arbitrary output against fixed random weights
    let dot = move |t: &mut Tape<f64>, y: Var| -> Result<Var> {
        let n = t.value(y).numel();
        let w = Tensor::new(t.shape(y), w_out.data()[..n].to_vec())?;
        let w = t.constant(w);
        let p = t.mul(y, w)?;
        t.sum(p)
    };
    let probe: Probe = match op {
        "add" => Box::new(move |t, x| {
            let c = t.constant(c1.clone());
            let y = t.add(x, c)?;
            let y = t.mul(y, x)?;
            dot(t, y)
        }),
        "sub" => Box::new(move |t, x| {
            let c = t.constant(c1.clone());
            let y = t.sub(c, x)?;
            let y = t.mul(y, y)?;
            dot(t, y)
        }),
        "mul" => Box::new(move |t, x| {
            let c = t.constant(w6.clone());
            let y = t.mul(x, c)?;
            let y = t.mul(y, x)?;
            dot(t, y)
        }),
        "scale" => Box::new(move |t, x| {
            let y = t.scale(x, -1.7)?;
            dot(t, y)
        }),
        "add_scalar" => Box::new(move |t, x| {
            let y = t.add_scalar(x, 0.4)?;
            let y = t.square(y)?;
            dot(t, y)
        }),
        "matmul_a" => Box::new(move |t, x| {
            let b = t.constant(m44.clone());
            let y = t.matmul(x, b)?;
            dot(t, y)
        }),
        "matmul_b" => Box::new(move |t, x| {
            let a = t.constant(Tensor::new(&[2, 3], m34.data()[..6].to_vec())?);
            let y = t.matmul(a, x)?;
            dot(t, y)
        }),
        "matmul_nt" => Box::new(move |t, x| {
            let a = t.constant(m34.clone());
            let y = t.matmul_nt(a, x)?;
            let z = t.matmul_nt(x, a)?;
            let s = t.add(y, z)?;
            dot(t, s)
        }),
        "batched_matmul" => Box::new(move |t, x| {
            let b = t.constant(b3.clone());
            let y = t.matmul(x, b)?;
            let z = t.matmul(y, x)?;
            dot(t, z)
        }),
        "reshape" => Box::new(move |t, x| {
            let y = t.reshape(x, &[2, 3])?;
            let y = t.mean_rows(y)?;
            let y = t.square(y)?;
            dot(t, y)
        }),
        "permute" => Box::new(move |t, x| {
            let y = t.permute(x, &[2, 0, 1])?;
            dot(t, y)
        }),
        "masked_softmax" => Box::new(move |t, x| {
            let mask = [true, true, false, true, false, true, false, false, false, false, true, true, true, true, true];
            let y = t.masked_softmax(x, Some(&mask))?;
            dot(t, y)
        }),
        "layer_norm" => Box::new(move |t, x| {
            let g = t.constant(g5.clone());
            let b = t.constant(b5.clone());
            let y = t.layer_norm(x, g, b, 1e-5)?;
            dot(t, y)
        }),
        "layer_norm_gain" => Box::new(move |t, x| {
            let g = t.reshape(x, &[15])?;
            let g = t.gather(g, &[0, 1, 2, 3, 4])?;
            let bsrc = t.reshape(x, &[15])?;
            let b = t.gather(bsrc, &[5, 6, 7, 8, 9])?;
            let shifted = extra.data().iter().cycle().take(15).enumerate().map(|(i, v)| v + i as f64 * 0.1);
            let inp = t.constant(Tensor::new(&[3, 5], shifted.collect())?);
            let y = t.layer_norm(inp, g, b, 1e-5)?;
            dot(t, y)
        }),
        "gelu" => Box::new(move |t, x| {
            let y = t.gelu(x)?;
            dot(t, y)
        }),
        "softplus" => Box::new(move |t, x| {
            let y = t.softplus(x)?;
            dot(t, y)
        }),
        "log" => Box::new(move |t, x| {
            let y = t.log(x)?;
            dot(t, y)
        }),
        "square" => Box::new(move |t, x| {
            let y = t.square(x)?;
            dot(t, y)
        }),
        "clamp_min" => Box::new(move |t, x| {
            let y = t.clamp_min(x, 0.0)?;
            dot(t, y)
        }),
        "sum" => Box::new(move |t, x| {
            let y = t.square(x)?;
            t.sum(y)
        }),
        "mean" => Box::new(move |t, x| {
            let y = t.square(x)?;
            t.mean(y)
        }),
        "mean_rows" => Box::new(move |t, x| {
            let y = t.mean_rows(x)?;
            let y = t.square(y)?;
            dot(t, y)
        }),
        "gather" => Box::new(move |t, x| {
            let y = t.gather(x, &[2, 0, 2, 1])?;
            dot(t, y)
        }),
        "concat" => Box::new(move |t, x| {
            let c = t.constant(extra.clone());
            let y = t.concat(&[c, x, x])?;
            dot(t, y)
        }),
        "cross_entropy" => Box::new(move |t, x| t.cross_entropy(x, &[4, 0, 2], Some(0))),
        other => unreachable!("unknown primitive {other}"),
    };
    (probe, x)
}

/// Every differentiable primitive on the tape, by probe name.
pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "matmul_a",
    "matmul_b",
    "matmul_nt",
    "batched_matmul",
    "reshape",
    "permute",
    "masked_softmax",
    "layer_norm",
    "layer_norm_gain",
    "gelu",
    "softplus",
    "log",
    "square",
    "clamp_min",
    "sum",
    "mean",
    "mean_rows",
    "gather",
    "concat",
    "cross_entropy",
];

/// Runs `trials` random central-difference checks per primitive in 64-bit mode.
pub fn check_primitives(trials: usize, seed: u64) -> Result<Vec<PrimitiveCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(PRIMITIVES.len());
    for &op in PRIMITIVES {
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let (probe, x) = primitive_probe(op, &mut rng);
            let report = grad_check(probe, &x, 1e-5, 1e-4)?;
            worst = worst.max(report.max_rel_error);
        }
        out.push(PrimitiveCheck {
            op,
            trials,
            max_rel_error: worst,
        });
    }
    Ok(out)
}
