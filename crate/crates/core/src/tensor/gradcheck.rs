//! Central finite-difference checks against the tape's analytic gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// `|a - b| / max(1, |a|, |b|)`.
pub fn relative_error<T: Scalar>(a: T, b: T) -> T {
    (a - b).abs() / T::one().max(a.abs()).max(b.abs())
}

fn eval<T: Scalar, F>(f: &F, x: &Tensor<T>) -> Result<T>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_grad(false));
    let out = f(&mut tape, xv)?;
    Ok(tape.value(out).item())
}

/// Central-difference gradient of scalar `f` at `x`.
pub fn numeric_gradient<T: Scalar, F>(f: &F, x: &Tensor<T>, eps: T) -> Result<Tensor<T>>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let two = T::one() + T::one();
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(f, &probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (two * eps));
    }
    Tensor::new(x.shape(), grad)
}

/// Largest relative error between the analytic gradient of scalar `f` at
/// `x` and its central finite-difference estimate.
///
/// `f` receives a fresh tape and the variable holding `x`, and must return a
/// one-element output.
pub fn grad_check<T: Scalar, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_grad(true));
    let out = f(&mut tape, xv)?;
    let analytic = tape.backward(out)?.tensor(xv);
    let numeric = numeric_gradient(&f, x, eps)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .fold(T::zero(), |m, (&a, &b)| m.max(relative_error(a, b))))
}

/// Runs [`grad_check`] on every differentiable op, for each of its inputs,
/// at random 64-bit inputs drawn from `seed`. Tensor-valued ops are reduced
/// to a scalar through a fixed random projection.
pub fn op_gradient_report(seed: u64) -> Result<Vec<(String, f64)>> {
    use super::{BatchNormStats, NormMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_t = |shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let eps = 1e-5;
    let mut report = Vec::new();

    type Op3 = fn(&mut Tape<f64>, Var, Var, Var) -> Result<Var>;
    let mut three = |name: &str, op: Op3, inputs: [Tensor<f64>; 3], out_len: usize, rng_t: &mut dyn FnMut(&[usize]) -> Tensor<f64>| -> Result<()> {
        let proj = rng_t(&[out_len]).into_data();
        for slot in 0..3 {
            let f = |tape: &mut Tape<f64>, probe: Var| -> Result<Var> {
                let vars: Vec<Var> =
                    (0..3).map(|i| if i == slot { probe } else { tape.leaf(inputs[i].clone()) }).collect();
                let y = op(tape, vars[0], vars[1], vars[2])?;
                tape.dot(y, proj.clone())
            };
            report.push((format!("{name}[{slot}]"), grad_check(f, &inputs[slot], eps)?));
        }
        Ok(())
    };

    let pe = [rand_t(&[2, 3, 4, 4]), rand_t(&[3, 3, 2, 2]), rand_t(&[3])];
    three("patch_embed", |t, x, w, b| t.patch_embed(x, w, b, 2), pe, 2 * 3 * 2 * 2, &mut rand_t)?;
    let dw = [rand_t(&[2, 2, 5, 5]), rand_t(&[2, 3, 3]), rand_t(&[2])];
    three("depthwise_conv", |t, x, w, b| t.depthwise_conv(x, w, b), dw, 2 * 2 * 25, &mut rand_t)?;
    let wide = [rand_t(&[1, 2, 3, 3]), rand_t(&[2, 7, 7]), rand_t(&[2])];
    three("depthwise_conv_wide", |t, x, w, b| t.depthwise_conv(x, w, b), wide, 2 * 9, &mut rand_t)?;
    let ca = [rand_t(&[2, 3, 2, 2]), rand_t(&[4, 3]), rand_t(&[4])];
    three("channel_affine", |t, x, w, b| t.channel_affine(x, w, b), ca, 2 * 4 * 4, &mut rand_t)?;
    let head = [rand_t(&[3, 5]), rand_t(&[2, 5]), rand_t(&[2])];
    three("channel_affine_rank2", |t, x, w, b| t.channel_affine(x, w, b), head, 3 * 2, &mut rand_t)?;
    let bn = [rand_t(&[3, 2, 2, 2]), rand_t(&[2]), rand_t(&[2])];
    three(
        "batchnorm_train",
        |t, x, g, b| t.batchnorm(x, g, b, &mut BatchNormStats::new(2), NormMode::Train),
        bn.clone(),
        3 * 2 * 4,
        &mut rand_t,
    )?;
    three(
        "batchnorm_eval",
        |t, x, g, b| {
            let mut stats = BatchNormStats::new(2);
            stats.running_mean = Tensor::new(&[2], vec![0.3, -0.2])?;
            stats.running_var = Tensor::new(&[2], vec![0.5, 2.0])?;
            t.batchnorm(x, g, b, &mut stats, NormMode::Eval)
        },
        bn,
        3 * 2 * 4,
        &mut rand_t,
    )?;
    let add_in = [rand_t(&[2, 3]), rand_t(&[2, 3]), rand_t(&[1])];
    three("add", |t, a, b, _| t.add(a, b), add_in, 6, &mut rand_t)?;

    let x = rand_t(&[2, 3, 3, 3]).map(|v| 3.0 * v);
    let proj = rand_t(&[x.numel()]).into_data();
    report.push((
        "gelu".into(),
        grad_check(|t, v| { let y = t.gelu(v); t.dot(y, proj.clone()) }, &x, eps)?,
    ));
    report.push((
        "scale".into(),
        grad_check(|t, v| { let y = t.scale(v, -1.7); t.dot(y, proj.clone()) }, &x, eps)?,
    ));
    report.push(("sum".into(), grad_check(|t, v| Ok(t.sum(v)), &x, eps)?));
    let proj6 = rand_t(&[6]).into_data();
    report.push((
        "global_avg_pool".into(),
        grad_check(|t, v| { let y = t.global_avg_pool(v)?; t.dot(y, proj6.clone()) }, &x, eps)?,
    ));

    let tokens = rand_t(&[2, 3, 2, 2]);
    let u = rand_t(&[4, 4]);
    let projt = rand_t(&[tokens.numel()]).into_data();
    report.push((
        "token_mix[x]".into(),
        grad_check(|t, v| { let uu = t.leaf(u.clone()); let y = t.token_mix(v, uu)?; t.dot(y, projt.clone()) }, &tokens, eps)?,
    ));
    report.push((
        "token_mix[u]".into(),
        grad_check(|t, v| { let xx = t.leaf(tokens.clone()); let y = t.token_mix(xx, v)?; t.dot(y, projt.clone()) }, &u, eps)?,
    ));

    let logits = rand_t(&[4, 10]).map(|v| 4.0 * v);
    let labels = [3usize, 0, 9, 3];
    report.push(("softmax_xent".into(), grad_check(|t, v| t.softmax_xent(v, &labels), &logits, eps)?));

    // keep entries away from the kink of min(u, 0)
    let pu = rand_t(&[5, 5]).map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v });
    report.push(("penalty_lu".into(), grad_check(|t, v| t.penalty_lu(v), &pu, eps)?));
    Ok(report)
}
