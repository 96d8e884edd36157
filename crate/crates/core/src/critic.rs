//! Adversary-critic losses: the per-class discrimination objective and
//! the gradient-norm penalty evaluated at real and adversarial points
//! separately (no interpolation).

use crate::autodiff::{gradient, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::nn::CriticNet;

/// One batch for a critic update: natural pairs and adversarial examples
/// with their attack targets. Every adversarial example's source label
/// must differ from its target.
#[derive(Debug, Clone)]
pub struct CriticBatch {
    pub x_nat: Tensor,
    pub y: Vec<usize>,
    pub x_adv: Tensor,
    /// Source labels of the adversarial examples.
    pub y_src: Vec<usize>,
    /// Attack targets the critic scores them against.
    pub y_adv: Vec<usize>,
}

impl CriticBatch {
    pub fn new(
        x_nat: Tensor,
        y: Vec<usize>,
        x_adv: Tensor,
        y_src: Vec<usize>,
        y_adv: Vec<usize>,
    ) -> Result<Self> {
        if x_nat.shape()[0] != y.len() || x_adv.shape()[0] != y_adv.len() || y_src.len() != y_adv.len()
        {
            return Err(Error::Shape("critic batch row counts disagree".into()));
        }
        if y.is_empty() || y_adv.is_empty() {
            return Err(Error::Data("critic batch needs natural and adversarial examples".into()));
        }
        for (s, t) in y_src.iter().zip(&y_adv) {
            if s == t {
                return Err(Error::Data(format!(
                    "adversarial example keeps its source class {s}"
                )));
            }
        }
        Ok(CriticBatch {
            x_nat,
            y,
            x_adv,
            y_src,
            y_adv,
        })
    }
}

/// Discrimination loss, conventional sign:
///   -( mean log D_y(x_nat) + mean log(1 - D_{y_t}(x_adv)) )
///
/// Both terms go through softplus on the pre-sigmoid head for stability.
/// The caller detaches `x_adv` when only the critic should learn.
pub fn critic_loss(
    g: &mut Graph,
    critic: &CriticNet,
    x_nat: NodeId,
    y: NodeId,
    x_adv: NodeId,
    y_adv: NodeId,
) -> Result<NodeId> {
    let z_nat = critic.pre_sigmoid(g, x_nat)?;
    let z_nat_y = g.take_per_row(z_nat, y)?;
    // log D = -softplus(-z)
    let nz = g.neg(z_nat_y);
    let log_d = g.softplus(nz);
    let nat_term = g.mean_all(log_d);

    let z_adv = critic.pre_sigmoid(g, x_adv)?;
    let z_adv_t = g.take_per_row(z_adv, y_adv)?;
    // log(1 - D) = -softplus(z)
    let log_one_minus = g.softplus(z_adv_t);
    let adv_term = g.mean_all(log_one_minus);

    g.add(nat_term, adv_term)
}

/// Mean squared l2 norm of the input-gradient of the selected critic
/// score: mean_i || d D_{label_i}(x_i) / d x_i ||_2^2.
pub fn gradient_penalty(
    g: &mut Graph,
    critic: &CriticNet,
    points: NodeId,
    labels: NodeId,
) -> Result<NodeId> {
    gradient_penalty_with(g, points, labels, |g, x| critic.scores(g, x))
}

/// Penalty over an arbitrary score head (tests use closed-form models).
pub fn gradient_penalty_with(
    g: &mut Graph,
    points: NodeId,
    labels: NodeId,
    scores: impl FnOnce(&mut Graph, NodeId) -> Result<NodeId>,
) -> Result<NodeId> {
    let s = scores(g, points)?;
    let sel = g.take_per_row(s, labels)?;
    let total = g.sum_all(sel);
    // rows are independent, so this is the per-example gradient stack
    let gx = gradient(g, total, &[points])?.grad(points);
    let sq = g.mul(gx, gx)?;
    let per_row = g.row_sum(sq)?;
    Ok(g.mean_all(per_row))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Bindings, Mode};
    use crate::nn::{CriticSpec, ParamSet, CRITIC_ARCH_TAG};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_critic(g: &mut Graph, input_dim: usize, hidden: usize, k: usize) -> CriticNet {
        let spec = CriticSpec {
            input_dim,
            hidden,
            leaky_slope: 0.2,
            input_noise_std: 0.3,
            hidden_noise_std: 0.5,
            k,
        };
        let params = vec![
            ("w1".to_string(), Tensor::zeros(&[input_dim, hidden])),
            ("b1".to_string(), Tensor::zeros(&[hidden])),
            ("w2".to_string(), Tensor::zeros(&[hidden, hidden])),
            ("b2".to_string(), Tensor::zeros(&[hidden])),
            ("w3".to_string(), Tensor::zeros(&[hidden, k])),
            ("b3".to_string(), Tensor::zeros(&[k])),
        ];
        let ps = ParamSet::new(CRITIC_ARCH_TAG, k, 0, params);
        CriticNet::instantiate(g, &spec, &ps).unwrap()
    }

    #[test]
    fn half_scores_give_two_ln_two() {
        let mut g = Graph::new(0);
        let critic = zero_critic(&mut g, 3, 4, 2);
        let xn = g.placeholder("xn", &[2, 3], false);
        let yn = g.placeholder("yn", &[2], false);
        let xa = g.placeholder("xa", &[2, 3], false);
        let ya = g.placeholder("ya", &[2], false);
        let loss = critic_loss(&mut g, &critic, xn, yn, xa, ya).unwrap();
        let b = Bindings::new()
            .bind(xn, Tensor::full(&[2, 3], 0.4))
            .bind(yn, Tensor::new(vec![2], vec![0.0, 1.0]).unwrap())
            .bind(xa, Tensor::full(&[2, 3], 0.6))
            .bind(ya, Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        let v = g.eval_one(loss, &b, Mode::Eval).unwrap().scalar_value();
        assert!((v - 2.0 * (2.0f64).ln()).abs() < 1e-12, "{v}");
    }

    #[test]
    fn near_perfect_critic_loss_near_zero() {
        // passthrough net with a large final gain: D(+1) -> 1, D(-1) -> 0
        let mut g = Graph::new(0);
        let spec = CriticSpec {
            input_dim: 1,
            hidden: 2,
            leaky_slope: 0.2,
            input_noise_std: 0.3,
            hidden_noise_std: 0.5,
            k: 2,
        };
        let params = vec![
            (
                "w1".to_string(),
                Tensor::new(vec![1, 2], vec![5.0, 0.0]).unwrap(),
            ),
            ("b1".to_string(), Tensor::zeros(&[2])),
            (
                "w2".to_string(),
                Tensor::new(vec![2, 2], vec![5.0, 0.0, 0.0, 0.0]).unwrap(),
            ),
            ("b2".to_string(), Tensor::zeros(&[2])),
            (
                "w3".to_string(),
                Tensor::new(vec![2, 2], vec![0.0, 5.0, 0.0, 0.0]).unwrap(),
            ),
            ("b3".to_string(), Tensor::zeros(&[2])),
        ];
        let ps = ParamSet::new(CRITIC_ARCH_TAG, 2, 0, params);
        let critic = CriticNet::instantiate(&mut g, &spec, &ps).unwrap();
        let xn = g.placeholder("xn", &[1, 1], false);
        let yn = g.placeholder("yn", &[1], false);
        let xa = g.placeholder("xa", &[1, 1], false);
        let ya = g.placeholder("ya", &[1], false);
        let loss = critic_loss(&mut g, &critic, xn, yn, xa, ya).unwrap();
        let b = Bindings::new()
            .bind(xn, Tensor::new(vec![1, 1], vec![1.0]).unwrap())
            .bind(yn, Tensor::new(vec![1], vec![1.0]).unwrap())
            .bind(xa, Tensor::new(vec![1, 1], vec![-1.0]).unwrap())
            .bind(ya, Tensor::new(vec![1], vec![1.0]).unwrap());
        let v = g.eval_one(loss, &b, Mode::Eval).unwrap().scalar_value();
        assert!(v > 0.0 && v < 0.01, "{v}");
    }

    #[test]
    fn loss_matches_hand_rolled_summation() {
        let mut g = Graph::new(0);
        let spec = CriticSpec {
            input_dim: 4,
            hidden: 6,
            leaky_slope: 0.2,
            input_noise_std: 0.3,
            hidden_noise_std: 0.5,
            k: 3,
        };
        let (critic, _) = crate::nn::build_critic(&mut g, &spec, 21).unwrap();
        let xn = g.placeholder("xn", &[5, 4], false);
        let yn = g.placeholder("yn", &[5], false);
        let xa = g.placeholder("xa", &[4, 4], false);
        let ya = g.placeholder("ya", &[4], false);
        let scores_nat = critic.scores(&mut g, xn).unwrap();
        let scores_adv = critic.scores(&mut g, xa).unwrap();
        let loss = critic_loss(&mut g, &critic, xn, yn, xa, ya).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xnv = Tensor::uniform(&[5, 4], 0.0, 1.0, &mut rng);
        let xav = Tensor::uniform(&[4, 4], 0.0, 1.0, &mut rng);
        let ynv = vec![0usize, 1, 2, 0, 1];
        let yav = vec![2usize, 0, 1, 2];
        let b = Bindings::new()
            .bind(xn, xnv)
            .bind(yn, Tensor::new(vec![5], ynv.iter().map(|&v| v as f64).collect()).unwrap())
            .bind(xa, xav)
            .bind(ya, Tensor::new(vec![4], yav.iter().map(|&v| v as f64).collect()).unwrap());
        let outs = g.eval(&[loss, scores_nat, scores_adv], &b, Mode::Eval).unwrap();
        let v = outs[0].scalar_value();
        // direct re-summation from the scores
        let mut nat = 0.0;
        for (i, &c) in ynv.iter().enumerate() {
            nat += outs[1].row(i)[c].ln();
        }
        nat /= ynv.len() as f64;
        let mut adv = 0.0;
        for (i, &c) in yav.iter().enumerate() {
            adv += (1.0 - outs[2].row(i)[c]).ln();
        }
        adv /= yav.len() as f64;
        let expect = -(nat + adv);
        assert!((v - expect).abs() < 1e-12, "{v} vs {expect}");
    }

    #[test]
    fn loss_permutation_invariant() {
        let mut g = Graph::new(0);
        let spec = CriticSpec {
            input_dim: 3,
            hidden: 5,
            leaky_slope: 0.2,
            input_noise_std: 0.3,
            hidden_noise_std: 0.5,
            k: 2,
        };
        let (critic, _) = crate::nn::build_critic(&mut g, &spec, 4).unwrap();
        let xn = g.placeholder("xn", &[4, 3], false);
        let yn = g.placeholder("yn", &[4], false);
        let xa = g.placeholder("xa", &[4, 3], false);
        let ya = g.placeholder("ya", &[4], false);
        let loss = critic_loss(&mut g, &critic, xn, yn, xa, ya).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xnv = Tensor::uniform(&[4, 3], 0.0, 1.0, &mut rng);
        let xav = Tensor::uniform(&[4, 3], 0.0, 1.0, &mut rng);
        let ynv = [0.0, 1.0, 0.0, 1.0];
        let yav = [1.0, 0.0, 1.0, 1.0];
        let eval_with = |perm: &[usize]| {
            let rows: Vec<&[f64]> = perm.iter().map(|&i| xnv.row(i)).collect();
            let xp = Tensor::stack_rows(&rows);
            let yp: Vec<f64> = perm.iter().map(|&i| ynv[i]).collect();
            let rows: Vec<&[f64]> = perm.iter().map(|&i| xav.row(i)).collect();
            let xap = Tensor::stack_rows(&rows);
            let yap: Vec<f64> = perm.iter().map(|&i| yav[i]).collect();
            let b = Bindings::new()
                .bind(xn, xp)
                .bind(yn, Tensor::new(vec![4], yp).unwrap())
                .bind(xa, xap)
                .bind(ya, Tensor::new(vec![4], yap).unwrap());
            g.eval_one(loss, &b, Mode::Eval).unwrap().scalar_value()
        };
        let a = eval_with(&[0, 1, 2, 3]);
        let b = eval_with(&[3, 0, 2, 1]);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn penalty_zero_for_constant_critic() {
        let mut g = Graph::new(0);
        let critic = zero_critic(&mut g, 3, 4, 2);
        let x = g.placeholder("x", &[2, 3], true);
        let y = g.placeholder("y", &[2], false);
        let gp = gradient_penalty(&mut g, &critic, x, y).unwrap();
        let b = Bindings::new()
            .bind(x, Tensor::full(&[2, 3], 0.5))
            .bind(y, Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
        let v = g.eval_one(gp, &b, Mode::Eval).unwrap().scalar_value();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn penalty_matches_logistic_closed_form() {
        // D(x) = sigmoid(w.x): penalty = ||sigma' w||^2 at each point
        let w = [0.7, -1.3, 0.4];
        let mut g = Graph::new(0);
        let x = g.placeholder("x", &[2, 3], true);
        let y = g.placeholder("y", &[2], false);
        let gp = gradient_penalty_with(&mut g, x, y, |g, xin| {
            let wt = g.constant(Tensor::new(vec![3, 1], w.to_vec()).unwrap());
            let z = g.matmul(xin, wt)?;
            Ok(g.sigmoid(z))
        })
        .unwrap();
        let xv = Tensor::new(vec![2, 3], vec![0.2, 0.4, 0.9, -0.3, 0.1, 0.5]).unwrap();
        let b = Bindings::new()
            .bind(x, xv.clone())
            .bind(y, Tensor::zeros(&[2]));
        let v = g.eval_one(gp, &b, Mode::Eval).unwrap().scalar_value();
        let wn2: f64 = w.iter().map(|v| v * v).sum();
        let mut expect = 0.0;
        for i in 0..2 {
            let z: f64 = xv.row(i).iter().zip(&w).map(|(&a, &b)| a * b).sum();
            let s = 1.0 / (1.0 + (-z).exp());
            let sp = s * (1.0 - s);
            expect += sp * sp * wn2;
        }
        expect /= 2.0;
        assert!((v - expect).abs() < 1e-10, "{v} vs {expect}");
    }

    #[test]
    fn penalty_nonnegative_and_scales_linearly() {
        let mut g = Graph::new(0);
        let spec = CriticSpec {
            input_dim: 4,
            hidden: 8,
            leaky_slope: 0.2,
            input_noise_std: 0.3,
            hidden_noise_std: 0.5,
            k: 3,
        };
        let (critic, _) = crate::nn::build_critic(&mut g, &spec, 9).unwrap();
        let x = g.placeholder("x", &[3, 4], true);
        let y = g.placeholder("y", &[3], false);
        let gp = gradient_penalty(&mut g, &critic, x, y).unwrap();
        let gp2 = g.scale(gp, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = Bindings::new()
            .bind(x, Tensor::uniform(&[3, 4], 0.0, 1.0, &mut rng))
            .bind(y, Tensor::new(vec![3], vec![0.0, 2.0, 1.0]).unwrap());
        let outs = g.eval(&[gp, gp2], &b, Mode::Eval).unwrap();
        let v = outs[0].scalar_value();
        assert!(v >= 0.0);
        assert!((outs[1].scalar_value() - 2.0 * v).abs() < 1e-15);
    }

    #[test]
    fn batch_rejects_source_equal_target() {
        let x = Tensor::zeros(&[1, 2]);
        assert!(CriticBatch::new(x.clone(), vec![0], x.clone(), vec![1], vec![1]).is_err());
        assert!(CriticBatch::new(x.clone(), vec![0], x, vec![0], vec![1]).is_ok());
    }
}
