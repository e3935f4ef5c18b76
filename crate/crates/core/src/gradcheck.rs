//! Central finite differences, used as an independent oracle for the
//! analytic backward rules. Only forward evaluations are involved.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Central-difference gradient of a scalar function at `x`.
///
/// The step actually representable in f32 is used as the denominator.
pub fn numeric_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f32) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let x0 = x.data()[i];
        let (xp, xm) = (x0 + h, x0 - h);
        probe.data_mut()[i] = xp;
        let fp = f(&probe);
        probe.data_mut()[i] = xm;
        let fm = f(&probe);
        probe.data_mut()[i] = x0;
        g.data_mut()[i] = ((fp - fm) / (xp as f64 - xm as f64)) as f32;
    }
    g
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape(), "relative_error shapes");
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a.l2_norm().max(b.l2_norm()) as f64;
    if scale < 1e-12 {
        return diff as f32;
    }
    (diff / scale) as f32
}

/// Weighted sum `Σ wᵢ yᵢ` in f64, the usual way to reduce a tensor-valued
/// op to a scalar for checking.
pub fn weighted_sum(y: &Tensor, w: &Tensor) -> f64 {
    y.data()
        .iter()
        .zip(w.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

/// Relative error between the analytic gradient of `Σ w ⊙ f(inputs)` with
/// respect to `inputs[which]` and its central-difference estimate, for
/// seeded weights `w ∈ [0.5, 1.5]`.
pub fn gradient_error(
    f: impl Fn(&mut Tape, &[Var]) -> Var,
    inputs: &[Tensor],
    which: usize,
    seed: u64,
    h: f32,
) -> f32 {
    let mut r = crate::rng::seeded(seed ^ 0xfeed);
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&mut tape, &vars);
        tape.value(y).shape().to_vec()
    };
    let w = Tensor::uniform(&out_shape, 0.5, 1.5, &mut r);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = f(&mut tape, &vars);
    let wv = tape.constant(w.clone());
    let prod = tape.mul(y, wv).expect("same shape");
    let loss = tape.sum(prod).expect("reduction");
    let analytic = tape.backward(loss).expect("scalar root").wrt(vars[which]);

    let numeric = numeric_gradient(
        |x| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| tape.constant(if i == which { x.clone() } else { t.clone() }))
                .collect();
            let y = f(&mut tape, &vars);
            weighted_sum(tape.value(y), &w)
        },
        &inputs[which],
        h,
    );
    relative_error(&analytic, &numeric)
}
