//! Closed-form and cross-implementation verification of the attacks:
//! exact one-step behaviour on models with affine log-likelihood, the
//! DeepFool closed form on affine classifiers, trajectory equality of
//! the fixed-step policy against the independent basic-iterative loop,
//! and finite-difference verification of the parameter gradient carried
//! through the unrolled differentiable attack.

mod common;

use advcritic::attack::{
    bim, build_differentiable_attack, deepfool, high_confidence_attack,
    high_confidence_attack_traced, AttackConfig, DeepFoolConfig, IndicatorMode, ModelOracle,
    StepPolicy,
};
use advcritic::autodiff::{gradient, Bindings, Graph, Mode, NodeId, Tensor};
use advcritic::nn::DiffModel;
use common::rel_err;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// k-head model with raw affine "log-probabilities": log p_j = w_j.x + b_j.
/// The linearization the attack uses is exact on it.
fn affine_logp_oracle(w: Vec<Vec<f64>>, b: Vec<f64>) -> ModelOracle {
    let dim = w[0].len();
    let k = w.len();
    ModelOracle::from_builder(dim, k, move |g, x| {
        let mut cols = Vec::new();
        for (wj, bj) in w.iter().zip(&b) {
            let wt = g.constant(Tensor::new(vec![dim, 1], wj.clone()).unwrap());
            let zj = g.matmul(x, wt)?;
            cols.push(g.add_scalar(zj, *bj));
        }
        concat_cols(g, &cols)
    })
}

/// Affine logits put through log-softmax (a proper classifier head).
fn affine_softmax_oracle(w: Vec<Vec<f64>>, b: Vec<f64>) -> ModelOracle {
    let dim = w[0].len();
    let k = w.len();
    ModelOracle::from_builder(dim, k, move |g, x| {
        let mut cols = Vec::new();
        for (wj, bj) in w.iter().zip(&b) {
            let wt = g.constant(Tensor::new(vec![dim, 1], wj.clone()).unwrap());
            let zj = g.matmul(x, wt)?;
            cols.push(g.add_scalar(zj, *bj));
        }
        let z = concat_cols(g, &cols)?;
        g.log_softmax(z)
    })
}

/// Stack [B,1] columns into [B,k] via one-hot scatter sums.
fn concat_cols(g: &mut Graph, cols: &[NodeId]) -> advcritic::Result<NodeId> {
    let b = g.shape(cols[0])[0];
    let k = cols.len();
    let mut acc = None;
    for (j, &c) in cols.iter().enumerate() {
        let mut oh = Tensor::zeros(&[b, k]);
        for r in 0..b {
            oh.data_mut()[r * k + j] = 1.0;
        }
        let ohc = g.constant(oh);
        let spread = g.mul(c, ohc)?;
        acc = Some(match acc {
            None => spread,
            Some(a) => g.add(a, spread)?,
        });
    }
    Ok(acc.unwrap())
}

#[test]
fn affine_one_adaptive_step_hits_log_c_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..25 {
        let dim = rng.gen_range(2..6);
        let k = rng.gen_range(2..5);
        let w: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        // keep log-probs negative so p < 1
        let b: Vec<f64> = (0..k).map(|_| rng.gen_range(-6.0..-3.0)).collect();
        let oracle = affine_logp_oracle(w, b);
        let x = Tensor::uniform(&[1, dim], -1.0, 1.0, &mut rng);
        let target = rng.gen_range(0..k);
        let c: f64 = rng.gen_range(0.6..0.95);
        let (lp0, _) = oracle.probe_targeted(&x, &[target]).unwrap();
        if lp0[0] >= c.ln() {
            continue;
        }
        let cfg = AttackConfig {
            confidence: c,
            max_iter: 1,
            step: StepPolicy::Adaptive,
            clip_l2: None,
            bounds: (-1e6, 1e6),
            tau: 10.0,
            differentiable: false,
            indicator: IndicatorMode::Hard,
            project_each_iter: false,
        };
        let res = high_confidence_attack(&oracle, &x, &[target], &[c], &cfg).unwrap();
        let xadv = Tensor::new(vec![1, dim], res[0].x_adv.data().to_vec()).unwrap();
        let (lp1, _) = oracle.probe_targeted(&xadv, &[target]).unwrap();
        assert!(
            (lp1[0] - c.ln()).abs() < 1e-8,
            "one step should land on log C: got {}, want {}",
            lp1[0],
            c.ln()
        );
    }
}

#[test]
fn deepfool_single_step_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..25 {
        let dim = rng.gen_range(2..6);
        let w: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: f64 = rng.gen_range(-0.5..0.5);
        // binary classifier: logits [0, w.x + b]
        let oracle = affine_softmax_oracle(
            vec![vec![0.0; dim], w.clone()],
            vec![0.0, b],
        );
        let x = Tensor::uniform(&[1, dim], -1.0, 1.0, &mut rng);
        let f: f64 = x.data().iter().zip(&w).map(|(&a, &c)| a * c).sum::<f64>() + b;
        if f.abs() < 0.05 {
            continue; // too close to the boundary for a clean check
        }
        let cfg = DeepFoolConfig {
            max_iter: 10,
            overshoot: 0.02,
            clip_l2: None,
            bounds: (-1e6, 1e6),
            project_each_iter: false,
        };
        let res = deepfool(&oracle, &x, &cfg).unwrap();
        assert!(res[0].success);
        let wn2: f64 = w.iter().map(|v| v * v).sum();
        for d in 0..dim {
            let expect = -f * w[d] / wn2 * 1.02;
            assert!(
                (res[0].r.data()[d] - expect).abs() < 1e-10,
                "closed form mismatch: {} vs {}",
                res[0].r.data()[d],
                expect
            );
        }
    }
}

/// Random two-layer softmax network with sigmoid hidden units (smooth
/// everywhere, so finite differences behave).
fn random_small_net(rng: &mut ChaCha8Rng, dim: usize, hidden: usize, k: usize) -> ModelOracle {
    let w1 = Tensor::uniform(&[dim, hidden], -1.0, 1.0, rng);
    let b1 = Tensor::uniform(&[hidden], -0.2, 0.2, rng);
    let w2 = Tensor::uniform(&[hidden, k], -1.0, 1.0, rng);
    let b2 = Tensor::uniform(&[k], -0.2, 0.2, rng);
    ModelOracle::from_builder(dim, k, move |g, x| {
        let w1c = g.constant(w1.clone());
        let b1c = g.constant(b1.clone());
        let w2c = g.constant(w2.clone());
        let b2c = g.constant(b2.clone());
        let h = g.matmul(x, w1c)?;
        let h = g.add(h, b1c)?;
        let h = g.sigmoid(h);
        let z = g.matmul(h, w2c)?;
        let z = g.add(z, b2c)?;
        g.log_softmax(z)
    })
}

#[test]
fn fixed_step_trajectory_equals_bim_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for inst in 0..50 {
        let dim = rng.gen_range(3..8);
        let k = rng.gen_range(2..5);
        let hidden = rng.gen_range(4..9);
        let oracle = random_small_net(&mut rng, dim, hidden, k);
        let x = Tensor::uniform(&[dim], 0.1, 0.9, &mut rng);
        let target = rng.gen_range(0..k);
        let eps = rng.gen_range(0.02..0.1);
        // alternate projection settings across instances
        let project = inst % 2 == 0;
        let clip = if inst % 3 == 0 { Some(eps * 0.8) } else { None };
        let confidence = 0.999999; // effectively run to the iteration cap
        let max_iter = 15;
        let cfg = AttackConfig {
            confidence,
            max_iter,
            step: StepPolicy::Fixed(eps),
            clip_l2: clip,
            bounds: (0.0, 1.0),
            tau: 10.0,
            differentiable: false,
            indicator: IndicatorMode::Hard,
            project_each_iter: project,
        };
        let ours = high_confidence_attack_traced(&oracle, &x, target, confidence, &cfg).unwrap();
        let (bres, btraj) = bim(
            &oracle, &x, target, confidence, eps, max_iter, clip, (0.0, 1.0), project,
        )
        .unwrap();
        assert_eq!(
            ours.trajectory.len(),
            btraj.len(),
            "instance {inst}: iteration counts differ"
        );
        for (step, (a, b)) in ours.trajectory.iter().zip(&btraj).enumerate() {
            for d in 0..dim {
                assert!(
                    (a.data()[d] - b.data()[d]).abs() < 1e-10,
                    "instance {inst}, step {step}, coord {d}: {} vs {}",
                    a.data()[d],
                    b.data()[d]
                );
            }
        }
        assert_eq!(ours.result.iterations, bres.iterations);
    }
}

/// Tiny smooth classifier registered as graph variables, so weights can
/// be perturbed for finite differences.
struct TinyNet {
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
    k: usize,
}

impl TinyNet {
    fn build(g: &mut Graph, rng: &mut ChaCha8Rng, dim: usize, hidden: usize, k: usize) -> Self {
        TinyNet {
            w1: g.variable("tw1", Tensor::uniform(&[dim, hidden], -0.8, 0.8, rng)),
            b1: g.variable("tb1", Tensor::uniform(&[hidden], -0.2, 0.2, rng)),
            w2: g.variable("tw2", Tensor::uniform(&[hidden, k], -0.8, 0.8, rng)),
            b2: g.variable("tb2", Tensor::uniform(&[k], -0.2, 0.2, rng)),
            k,
        }
    }
}

impl DiffModel for TinyNet {
    fn class_count(&self) -> usize {
        self.k
    }

    fn logits(&self, g: &mut Graph, x: NodeId) -> advcritic::Result<NodeId> {
        let h = g.matmul(x, self.w1)?;
        let h = g.add(h, self.b1)?;
        let h = g.sigmoid(h);
        let z = g.matmul(h, self.w2)?;
        g.add(z, self.b2)
    }

    fn param_nodes(&self) -> Vec<NodeId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }
}

#[test]
fn differentiable_attack_parameter_gradient_matches_fd() {
    // the attack output, contracted with a fixed probe, differentiated
    // w.r.t. a weight; the smooth surrogate runs in the forward pass so
    // the finite-difference oracle is well-defined
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for inst in 0..5 {
        let (b, dim, hidden, k) = (3usize, 6usize, 5usize, 3usize);
        let mut g = Graph::new(0);
        let net = TinyNet::build(&mut g, &mut rng, dim, hidden, k);
        let x = g.placeholder("x", &[b, dim], true);
        let targets = g.constant(Tensor::new(vec![b], vec![1.0, 2.0, 0.0]).unwrap());
        let conf = g.constant(Tensor::full(&[b, 1], 0.9));
        let cfg = AttackConfig {
            confidence: 0.9,
            max_iter: 3,
            step: StepPolicy::Adaptive,
            clip_l2: None,
            bounds: (-5.0, 5.0),
            tau: 10.0,
            differentiable: true,
            indicator: IndicatorMode::Smooth,
            project_each_iter: false,
        };
        let x_adv = build_differentiable_attack(&mut g, &net, x, targets, conf, &cfg).unwrap();
        let probe = g.constant(Tensor::uniform(&[b, dim], -1.0, 1.0, &mut rng));
        let contracted = {
            let p = g.mul(x_adv, probe).unwrap();
            g.sum_all(p)
        };
        let gm = gradient(&mut g, contracted, &[net.w1]).unwrap();
        let xv = Tensor::uniform(&[b, dim], 0.2, 0.8, &mut rng);
        let bind = Bindings::new().bind(x, xv.clone());
        let analytic = (*g.eval_one(gm.grad(net.w1), &bind, Mode::Eval).unwrap()).clone();

        // finite differences over a sample of weight coordinates
        let w_base = (*g.variable_value(net.w1)).clone();
        let h = 1e-5;
        for probe_idx in 0..6 {
            let i = (probe_idx * 7) % w_base.numel();
            let mut plus = w_base.clone();
            plus.data_mut()[i] += h;
            g.set_variable(net.w1, plus).unwrap();
            let fp = g.eval_one(contracted, &bind, Mode::Eval).unwrap().scalar_value();
            let mut minus = w_base.clone();
            minus.data_mut()[i] -= h;
            g.set_variable(net.w1, minus).unwrap();
            let fm = g.eval_one(contracted, &bind, Mode::Eval).unwrap().scalar_value();
            g.set_variable(net.w1, w_base.clone()).unwrap();
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                rel_err(a, numeric) <= 1e-3,
                "instance {inst}, weight {i}: analytic {a}, numeric {numeric}"
            );
        }
    }
}

#[test]
fn hard_indicator_gates_forward_steps() {
    // the hard straight-through attack takes no step once p >= C, and its
    // forward values match the host-side attack exactly
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (b, dim, hidden, k) = (4usize, 5usize, 6usize, 3usize);
    let mut g = Graph::new(0);
    let net = TinyNet::build(&mut g, &mut rng, dim, hidden, k);
    let x = g.placeholder("x", &[b, dim], true);
    let tv = vec![2usize, 0, 1, 2];
    let targets = g.constant(Tensor::new(vec![b], tv.iter().map(|&v| v as f64).collect()).unwrap());
    let cv = 0.7;
    let conf = g.constant(Tensor::full(&[b, 1], cv));
    let cfg = AttackConfig {
        confidence: cv,
        max_iter: 4,
        step: StepPolicy::Adaptive,
        clip_l2: None,
        bounds: (0.0, 1.0),
        tau: 10.0,
        differentiable: true,
        indicator: IndicatorMode::Hard,
        project_each_iter: false,
    };
    let x_adv = build_differentiable_attack(&mut g, &net, x, targets, conf, &cfg).unwrap();
    let xv = Tensor::uniform(&[b, dim], 0.2, 0.8, &mut rng);
    let bind = Bindings::new().bind(x, xv.clone());
    let graph_out = (*g.eval_one(x_adv, &bind, Mode::Eval).unwrap()).clone();

    // host-side reference on the same weights
    let w1 = (*g.variable_value(net.w1)).clone();
    let b1 = (*g.variable_value(net.b1)).clone();
    let w2 = (*g.variable_value(net.w2)).clone();
    let b2 = (*g.variable_value(net.b2)).clone();
    let oracle = ModelOracle::from_builder(dim, k, move |g, x| {
        let w1c = g.constant(w1.clone());
        let b1c = g.constant(b1.clone());
        let w2c = g.constant(w2.clone());
        let b2c = g.constant(b2.clone());
        let h = g.matmul(x, w1c)?;
        let h = g.add(h, b1c)?;
        let h = g.sigmoid(h);
        let z = g.matmul(h, w2c)?;
        let z = g.add(z, b2c)?;
        g.log_softmax(z)
    });
    let host = high_confidence_attack(&oracle, &xv, &tv, &[cv; 4], &cfg).unwrap();
    for (row, res) in host.iter().enumerate() {
        for d in 0..dim {
            assert!(
                (graph_out.row(row)[d] - res.x_adv.data()[d]).abs() < 1e-12,
                "row {row} coord {d}: graph {} vs host {}",
                graph_out.row(row)[d],
                res.x_adv.data()[d]
            );
        }
    }
}

#[test]
fn attack_outputs_respect_domain_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..10 {
        let dim = 6;
        let k = 3;
        let oracle = random_small_net(&mut rng, dim, 7, k);
        let xs = Tensor::uniform(&[5, dim], 0.0, 1.0, &mut rng);
        let cfg = AttackConfig {
            confidence: 0.95,
            max_iter: 30,
            step: StepPolicy::Adaptive,
            clip_l2: Some(0.1),
            bounds: (0.0, 1.0),
            tau: 10.0,
            differentiable: false,
            indicator: IndicatorMode::Hard,
            project_each_iter: true,
        };
        let targets = vec![0usize; 5];
        let res = high_confidence_attack(&oracle, &xs, &targets, &[0.95; 5], &cfg).unwrap();
        for (row, r) in res.iter().enumerate() {
            for &v in r.x_adv.data() {
                assert!((0.0..=1.0).contains(&v));
            }
            // x_adv = clamp(x + r) exactly
            for d in 0..dim {
                let reconstructed = (xs.row(row)[d] + r.r.data()[d]).clamp(0.0, 1.0);
                assert_eq!(r.x_adv.data()[d], reconstructed);
            }
        }
        // success implies verified confidence
        for (i, r) in res.iter().enumerate() {
            if r.success {
                let xadv = Tensor::new(vec![1, dim], r.x_adv.data().to_vec()).unwrap();
                let (lp, _) = oracle.probe_targeted(&xadv, &[targets[i]]).unwrap();
                assert!(lp[0].exp() >= 0.95 - 1e-12);
            }
        }
    }
}
