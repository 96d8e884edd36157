//! Shared finite-difference machinery for gradient verification.
//!
//! The numeric side re-evaluates the forward graph at perturbed inputs;
//! it never touches the symbolic backward path it is checking.

use advcritic::autodiff::{gradient, Bindings, Graph, Mode, NodeId, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FIRST_ORDER_TOL: f64 = 1e-5;
pub const SECOND_ORDER_TOL: f64 = 1e-4;

/// Scale-aware relative error with a unit floor, so near-zero gradients
/// compare absolutely.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

pub fn eval_scalar(g: &Graph, node: NodeId, bind: &Bindings) -> f64 {
    g.eval_one(node, bind, Mode::Eval).unwrap().scalar_value()
}

pub fn eval_tensor(g: &Graph, node: NodeId, bind: &Bindings) -> Tensor {
    (*g.eval_one(node, bind, Mode::Eval).unwrap()).clone()
}

fn bind_all(inputs: &[(NodeId, &Tensor)]) -> Bindings {
    let mut b = Bindings::new();
    for (node, t) in inputs {
        b.set(*node, (*t).clone());
    }
    b
}

/// Check d(scalar)/d(wrt) against central differences, coordinate-wise.
/// `inputs` binds every placeholder; `wrt` must be among them.
pub fn check_first_order(
    g: &mut Graph,
    scalar: NodeId,
    wrt: NodeId,
    inputs: &[(NodeId, &Tensor)],
    label: &str,
) {
    let gm = gradient(g, scalar, &[wrt]).unwrap();
    let analytic = eval_tensor(g, gm.grad(wrt), &bind_all(inputs));
    let base = inputs
        .iter()
        .find(|(n, _)| *n == wrt)
        .map(|(_, t)| (*t).clone())
        .expect("wrt bound");
    for i in 0..base.numel() {
        let mut plus = base.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = base.clone();
        minus.data_mut()[i] -= FD_STEP;
        let rebind = |t: &Tensor| -> Bindings {
            let mut b = Bindings::new();
            for (node, orig) in inputs {
                if *node == wrt {
                    b.set(*node, t.clone());
                } else {
                    b.set(*node, (*orig).clone());
                }
            }
            b
        };
        let fp = eval_scalar(g, scalar, &rebind(&plus));
        let fm = eval_scalar(g, scalar, &rebind(&minus));
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        let a = analytic.data()[i];
        let e = rel_err(a, numeric);
        assert!(
            e <= FIRST_ORDER_TOL,
            "{label}: first-order mismatch at coord {i}: analytic {a}, numeric {numeric}, rel {e:.3e}"
        );
    }
}

/// Check that differentiating the analytic first gradient once more
/// matches finite differences of that analytic gradient.
///
/// first gradient: g1 = d(scalar)/d(first_wrt), contracted with `probe`;
/// analytic second: d(sum(probe * g1))/d(second_wrt);
/// numeric second: central differences of sum(probe * g1) in second_wrt.
pub fn check_second_order(
    g: &mut Graph,
    scalar: NodeId,
    first_wrt: NodeId,
    second_wrt: NodeId,
    inputs: &[(NodeId, &Tensor)],
    rng: &mut ChaCha8Rng,
    label: &str,
) {
    let gm = gradient(g, scalar, &[first_wrt]).unwrap();
    let g1 = gm.grad(first_wrt);
    let probe = Tensor::uniform(g.shape(g1), -1.0, 1.0, rng);
    let pc = g.constant(probe);
    let prod = g.mul(g1, pc).unwrap();
    let contracted = g.sum_all(prod);
    let gm2 = gradient(g, contracted, &[second_wrt]).unwrap();
    let analytic = eval_tensor(g, gm2.get(second_wrt).unwrap().node, &bind_all(inputs));

    let base = inputs
        .iter()
        .find(|(n, _)| *n == second_wrt)
        .map(|(_, t)| (*t).clone())
        .expect("second_wrt bound");
    for i in 0..base.numel() {
        let mut plus = base.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = base.clone();
        minus.data_mut()[i] -= FD_STEP;
        let rebind = |t: &Tensor| -> Bindings {
            let mut b = Bindings::new();
            for (node, orig) in inputs {
                if *node == second_wrt {
                    b.set(*node, t.clone());
                } else {
                    b.set(*node, (*orig).clone());
                }
            }
            b
        };
        let fp = eval_scalar(g, contracted, &rebind(&plus));
        let fm = eval_scalar(g, contracted, &rebind(&minus));
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        let a = analytic.data()[i];
        let e = rel_err(a, numeric);
        assert!(
            e <= SECOND_ORDER_TOL,
            "{label}: second-order mismatch at coord {i}: analytic {a}, numeric {numeric}, rel {e:.3e}"
        );
    }
}

/// Random tensor in [-2, 2] with coordinates nudged away from `avoid`
/// kink points by at least `margin`.
pub fn random_away_from(
    shape: &[usize],
    avoid: &[f64],
    margin: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let v: f64 = rng.gen_range(-2.0..2.0);
        if avoid.iter().all(|&a| (v - a).abs() > margin) {
            data.push(v);
        }
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random tensor in [lo, hi].
pub fn random_in(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Distinct random coordinates for pairwise ops, separated so masks and
/// maxima do not sit on ties.
pub fn random_pair_separated(
    shape: &[usize],
    margin: f64,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Tensor) {
    let n: usize = shape.iter().product();
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    while a.len() < n {
        let x: f64 = rng.gen_range(-2.0..2.0);
        let y: f64 = rng.gen_range(-2.0..2.0);
        if (x - y).abs() > margin {
            a.push(x);
            b.push(y);
        }
    }
    (
        Tensor::new(shape.to_vec(), a).unwrap(),
        Tensor::new(shape.to_vec(), b).unwrap(),
    )
}
