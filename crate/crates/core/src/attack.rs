//! Targeted and untargeted attacks.
//!
//! The high-confidence attack drives the target-class probability to at
//! least C by iterating the l2-minimal step under a linearized
//! log-likelihood constraint:
//!
//!   r = (log C - log p_t(x)) / ||grad log p_t(x)||^2 * grad log p_t(x)
//!
//! With the fixed step policy it reduces to a basic iterative method
//! taking epsilon-norm steps along the log-likelihood gradient. The
//! differentiable variant unrolls the loop into the graph with the stop
//! condition rerouted through a sigmoid-adjusted straight-through
//! estimator, so the attack output carries gradients back to the model
//! parameters (second-order terms included). DeepFool and FGSM round out
//! the evaluation set.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::autodiff::{gradient, Bindings, Graph, Mode, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::nn::{ClassifierNet, DiffModel, ParamSet};

/// Gradient norms below this abort the step instead of dividing by
/// near-zero.
pub const DEGENERATE_GRAD_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepPolicy {
    /// Adaptive magnitude from the linearized constraint.
    Adaptive,
    /// Fixed l2 step of the given norm along the gradient direction.
    Fixed(f64),
}

/// How the discrete stop condition behaves in the differentiable graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndicatorMode {
    /// Forward in {0,1}; backward through the sigmoid surrogate.
    Hard,
    /// Sigmoid used in the forward pass as well (fully smooth; used by
    /// finite-difference verification).
    Smooth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    /// Target confidence C in (0,1).
    pub confidence: f64,
    pub max_iter: usize,
    pub step: StepPolicy,
    /// Per-iteration l2 clip on the step, if any.
    pub clip_l2: Option<f64>,
    /// Domain bounds [lo, hi].
    pub bounds: (f64, f64),
    /// Straight-through sigmoid temperature.
    pub tau: f64,
    pub differentiable: bool,
    pub indicator: IndicatorMode,
    /// Project the iterate onto the domain after each update.
    pub project_each_iter: bool,
}

impl AttackConfig {
    /// Training preset: 5 iterations, no per-iteration clip, differentiable.
    pub fn training() -> Self {
        AttackConfig {
            confidence: 0.8,
            max_iter: 5,
            step: StepPolicy::Adaptive,
            clip_l2: None,
            bounds: (0.0, 1.0),
            tau: 10.0,
            differentiable: true,
            indicator: IndicatorMode::Hard,
            project_each_iter: false,
        }
    }

    /// Evaluation preset: 500 iterations, per-iteration l2 clip 0.1,
    /// projection after each update.
    pub fn evaluation() -> Self {
        AttackConfig {
            confidence: 0.95,
            max_iter: 500,
            step: StepPolicy::Adaptive,
            clip_l2: Some(0.1),
            bounds: (0.0, 1.0),
            tau: 10.0,
            differentiable: false,
            indicator: IndicatorMode::Hard,
            project_each_iter: true,
        }
    }

    pub fn with_confidence(mut self, c: f64) -> Self {
        self.confidence = c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.confidence && self.confidence < 1.0) {
            return Err(Error::Config(format!(
                "confidence {} outside (0,1)",
                self.confidence
            )));
        }
        if self.max_iter < 1 {
            return Err(Error::Config("max_iter must be >= 1".into()));
        }
        if let Some(c) = self.clip_l2 {
            if c <= 0.0 {
                return Err(Error::Config(format!("clip {c} must be > 0")));
            }
        }
        if let StepPolicy::Fixed(e) = self.step {
            if e <= 0.0 {
                return Err(Error::Config(format!("fixed step {e} must be > 0")));
            }
        }
        if self.bounds.0 >= self.bounds.1 {
            return Err(Error::Config(format!(
                "bounds ({}, {}) need lo < hi",
                self.bounds.0, self.bounds.1
            )));
        }
        Ok(())
    }
}

/// Outcome of one attack on one example.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub x_adv: Tensor,
    pub r: Tensor,
    pub iterations: usize,
    pub success: bool,
    /// p of the attack target (targeted) or of the new argmax (untargeted).
    pub final_confidence: f64,
}

/// Per-iteration record for attack traces.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iteration: usize,
    pub confidence: f64,
    pub step_norm: f64,
    pub cumulative_norm: f64,
}

// ---------------------------------------------------------------------
// Model oracle: reusable probe graphs at any batch size. The builder
// closure instantiates the model into a fresh graph (its own variable
// copies), so sized oracles are independent of each other.
// ---------------------------------------------------------------------

type LogProbBuilder = Rc<dyn Fn(&mut Graph, NodeId) -> Result<NodeId>>;

struct SizedOracle {
    graph: Graph,
    x: NodeId,
    t: NodeId,
    y: NodeId,
    logp: NodeId,
    logp_t: NodeId,
    grad_t: NodeId,
    grad_nll: NodeId,
    jac: Vec<NodeId>,
}

/// Forward/gradient probes for a fixed model.
pub struct ModelOracle {
    dim: usize,
    k: usize,
    build: LogProbBuilder,
    sized: RefCell<HashMap<usize, Rc<SizedOracle>>>,
}

impl ModelOracle {
    /// Oracle over an arbitrary log-probability graph builder.
    pub fn from_builder(
        dim: usize,
        k: usize,
        build: impl Fn(&mut Graph, NodeId) -> Result<NodeId> + 'static,
    ) -> Self {
        ModelOracle {
            dim,
            k,
            build: Rc::new(build),
            sized: RefCell::new(HashMap::new()),
        }
    }

    /// Oracle for a classifier checkpoint.
    pub fn for_classifier(ps: &ParamSet) -> Self {
        let ps = ps.clone();
        let k = ps.k;
        ModelOracle::from_builder(784, k, move |g, x| {
            let net = ClassifierNet::instantiate(g, &ps)?;
            net.log_probs(g, x)
        })
    }

    pub fn class_count(&self) -> usize {
        self.k
    }

    pub fn input_dim(&self) -> usize {
        self.dim
    }

    fn sized(&self, b: usize) -> Result<Rc<SizedOracle>> {
        if let Some(s) = self.sized.borrow().get(&b) {
            return Ok(s.clone());
        }
        let mut graph = Graph::new(0);
        let x = graph.placeholder("x", &[b, self.dim], true);
        let t = graph.placeholder("t", &[b], false);
        let y = graph.placeholder("y", &[b], false);
        let logp = (self.build)(&mut graph, x)?;
        let logp_t = graph.take_per_row(logp, t)?;
        let s_t = graph.sum_all(logp_t);
        let grad_t = gradient(&mut graph, s_t, &[x])?.grad(x);
        let nll = crate::nn::nll_loss(&mut graph, logp, y)?;
        let grad_nll = gradient(&mut graph, nll, &[x])?.grad(x);
        let mut jac = Vec::with_capacity(self.k);
        for j in 0..self.k {
            let idx = graph.constant(Tensor::full(&[b], j as f64));
            let lpj = graph.take_per_row(logp, idx)?;
            let sj = graph.sum_all(lpj);
            jac.push(gradient(&mut graph, sj, &[x])?.grad(x));
        }
        let oracle = Rc::new(SizedOracle {
            graph,
            x,
            t,
            y,
            logp,
            logp_t,
            grad_t,
            grad_nll,
            jac,
        });
        self.sized.borrow_mut().insert(b, oracle.clone());
        Ok(oracle)
    }

    /// Log-probabilities [B,k] (evaluation mode).
    pub fn log_probs(&self, x: &Tensor) -> Result<Tensor> {
        let b = x.shape()[0];
        let s = self.sized(b)?;
        let mut bind = Bindings::new();
        bind.set(s.x, x.clone());
        Ok((*s.graph.eval_one(s.logp, &bind, Mode::Eval)?).clone())
    }

    /// Per-example target log-prob and its input gradient.
    pub fn probe_targeted(&self, x: &Tensor, targets: &[usize]) -> Result<(Vec<f64>, Tensor)> {
        let b = x.shape()[0];
        let s = self.sized(b)?;
        let mut bind = Bindings::new();
        bind.set(s.x, x.clone());
        bind.set(
            s.t,
            Tensor::new(vec![b], targets.iter().map(|&v| v as f64).collect())?,
        );
        let out = s.graph.eval(&[s.logp_t, s.grad_t], &bind, Mode::Eval)?;
        Ok((out[0].data().to_vec(), (*out[1]).clone()))
    }

    /// Log-probs plus the per-class input-gradient stack.
    pub fn probe_jacobian(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let b = x.shape()[0];
        let s = self.sized(b)?;
        let mut bind = Bindings::new();
        bind.set(s.x, x.clone());
        let mut outs = vec![s.logp];
        outs.extend(&s.jac);
        let vals = s.graph.eval(&outs, &bind, Mode::Eval)?;
        let logp = (*vals[0]).clone();
        let jac = vals[1..].iter().map(|t| (**t).clone()).collect();
        Ok((logp, jac))
    }

    /// Gradient of the mean NLL w.r.t. the input.
    pub fn nll_input_grad(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let b = x.shape()[0];
        let s = self.sized(b)?;
        let mut bind = Bindings::new();
        bind.set(s.x, x.clone());
        bind.set(
            s.y,
            Tensor::new(vec![b], labels.iter().map(|&v| v as f64).collect())?,
        );
        Ok((*s.graph.eval_one(s.grad_nll, &bind, Mode::Eval)?).clone())
    }
}

/// Predicted class and its probability per row of [B,k] log-probs.
pub fn argmax_rows(logp: &Tensor) -> Vec<(usize, f64)> {
    let (b, k) = (logp.shape()[0], logp.shape()[1]);
    (0..b)
        .map(|r| {
            let row = logp.row(r);
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            (best, row[best].exp())
        })
        .collect()
}

// ---------------------------------------------------------------------
// Minimal step and projection
// ---------------------------------------------------------------------

/// The l2-minimal step under the linearized log-likelihood constraint,
/// from the current log p_t and its gradient row.
pub fn minimal_step_from(logp_t: f64, grad: &[f64], confidence: f64) -> Result<Vec<f64>> {
    let denom: f64 = grad.iter().map(|v| v * v).sum();
    if denom.sqrt() < DEGENERATE_GRAD_TOL {
        return Err(Error::DegenerateGradient {
            norm: denom.sqrt(),
            tol: DEGENERATE_GRAD_TOL,
        });
    }
    let scale = (confidence.ln() - logp_t) / denom;
    Ok(grad.iter().map(|&v| scale * v).collect())
}

/// One adaptive step for a single input; zero when p_t is already >= C.
pub fn minimal_step(
    oracle: &ModelOracle,
    x: &Tensor,
    target: usize,
    confidence: f64,
) -> Result<Tensor> {
    let xb = Tensor::new(vec![1, x.numel()], x.data().to_vec())?;
    let (logp, grad) = oracle.probe_targeted(&xb, &[target])?;
    if logp[0] >= confidence.ln() {
        return Ok(Tensor::zeros(&[x.numel()]));
    }
    let r = minimal_step_from(logp[0], grad.row(0), confidence)?;
    Tensor::new(vec![x.numel()], r)
}

/// Rescale `r` so its norm is at most `clip_l2` (direction preserved),
/// then project `x + r` onto the domain box.
pub fn project_and_clip(
    r: &Tensor,
    x: &Tensor,
    clip_l2: Option<f64>,
    bounds: (f64, f64),
) -> Tensor {
    let mut out = r.clone();
    if let Some(clip) = clip_l2 {
        let norm = out.l2_norm();
        if norm > clip {
            out = out.scale(clip / norm);
        }
    }
    // exact passthrough for in-bounds components
    let data = out
        .data()
        .iter()
        .zip(x.data())
        .map(|(&ri, &xi)| {
            if xi + ri > bounds.1 {
                bounds.1 - xi
            } else if xi + ri < bounds.0 {
                bounds.0 - xi
            } else {
                ri
            }
        })
        .collect();
    Tensor::new(r.shape().to_vec(), data).expect("projection keeps shape")
}

fn apply_step(
    current: &mut [f64],
    step: Vec<f64>,
    cfg_clip: Option<f64>,
    bounds: (f64, f64),
    project: bool,
) {
    let dim = current.len();
    let step_t = Tensor::new(vec![dim], step).expect("step shape");
    let cur_t = Tensor::new(vec![dim], current.to_vec()).expect("cur shape");
    let adj = if project {
        project_and_clip(&step_t, &cur_t, cfg_clip, bounds)
    } else if cfg_clip.is_some() {
        project_and_clip(&step_t, &cur_t, cfg_clip, (f64::NEG_INFINITY, f64::INFINITY))
    } else {
        step_t
    };
    for (c, s) in current.iter_mut().zip(adj.data()) {
        *c += s;
    }
}

fn pow2_bucket(n: usize, cap: usize) -> usize {
    n.next_power_of_two().max(8).min(cap.next_power_of_two())
}

fn make_result(
    x0: &[f64],
    current: &[f64],
    bounds: (f64, f64),
    iterations: usize,
    success: bool,
    p: f64,
) -> Result<AttackResult> {
    let dim = x0.len();
    // r is primary; x_adv = clamp(x + r) then holds bitwise
    let r: Vec<f64> = current
        .iter()
        .zip(x0)
        .map(|(&c, &o)| c.clamp(bounds.0, bounds.1) - o)
        .collect();
    let x_adv: Vec<f64> = r
        .iter()
        .zip(x0)
        .map(|(&ri, &o)| (o + ri).clamp(bounds.0, bounds.1))
        .collect();
    let r = Tensor::new(vec![dim], r)?;
    let x_adv = Tensor::new(vec![dim], x_adv)?;
    Ok(AttackResult {
        x_adv,
        r,
        iterations,
        success,
        final_confidence: p,
    })
}

// ---------------------------------------------------------------------
// High-confidence attack (host-side loop)
// ---------------------------------------------------------------------

struct AliveTargeted {
    index: usize,
    x0: Vec<f64>,
    current: Vec<f64>,
    target: usize,
    confidence: f64,
    iterations: usize,
}

/// Run the high-confidence attack on a batch. Per-example targets and
/// confidences; results come back in input order. Finished examples drop
/// out of the probe batch as the loop progresses.
pub fn high_confidence_attack(
    oracle: &ModelOracle,
    xs: &Tensor,
    targets: &[usize],
    confidences: &[f64],
    cfg: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    cfg.validate()?;
    let b = xs.shape()[0];
    let mut alive: Vec<AliveTargeted> = (0..b)
        .map(|i| AliveTargeted {
            index: i,
            x0: xs.row(i).to_vec(),
            current: xs.row(i).to_vec(),
            target: targets[i],
            confidence: confidences[i],
            iterations: 0,
        })
        .collect();
    let mut done: Vec<(usize, AttackResult)> = Vec::with_capacity(b);

    for iter in 0..=cfg.max_iter {
        if alive.is_empty() {
            break;
        }
        let bucket = pow2_bucket(alive.len(), b);
        let rows: Vec<&[f64]> = (0..bucket)
            .map(|i| alive[i.min(alive.len() - 1)].current.as_slice())
            .collect();
        let xb = Tensor::stack_rows(&rows);
        let tg: Vec<usize> = (0..bucket)
            .map(|i| alive[i.min(alive.len() - 1)].target)
            .collect();
        let (logp, grad) = oracle.probe_targeted(&xb, &tg)?;

        let mut next_alive = Vec::with_capacity(alive.len());
        for (slot, mut ex) in alive.into_iter().enumerate() {
            let lp = logp[slot];
            let p = lp.exp();
            if p >= ex.confidence {
                done.push((ex.index, make_result(&ex.x0, &ex.current, cfg.bounds, ex.iterations, true, p)?));
                continue;
            }
            if iter == cfg.max_iter {
                done.push((ex.index, make_result(&ex.x0, &ex.current, cfg.bounds, ex.iterations, false, p)?));
                continue;
            }
            let grow = grad.row(slot);
            let gnorm2: f64 = grow.iter().map(|v| v * v).sum();
            if gnorm2.sqrt() < DEGENERATE_GRAD_TOL {
                // abort rather than divide by near-zero
                done.push((ex.index, make_result(&ex.x0, &ex.current, cfg.bounds, ex.iterations, false, p)?));
                continue;
            }
            let scale = match cfg.step {
                StepPolicy::Adaptive => (ex.confidence.ln() - lp) / gnorm2,
                StepPolicy::Fixed(eps) => eps / gnorm2.sqrt(),
            };
            let step: Vec<f64> = grow.iter().map(|&v| scale * v).collect();
            apply_step(
                &mut ex.current,
                step,
                cfg.clip_l2,
                cfg.bounds,
                cfg.project_each_iter,
            );
            ex.iterations += 1;
            next_alive.push(ex);
        }
        alive = next_alive;
    }

    done.sort_by_key(|(i, _)| *i);
    Ok(done.into_iter().map(|(_, r)| r).collect())
}

/// Single-example attack outcome with per-iteration diagnostics.
pub struct TracedAttack {
    pub result: AttackResult,
    pub trace: Vec<TraceRow>,
    /// The iterate after each applied step.
    pub trajectory: Vec<Tensor>,
}

/// Single-example attack with a per-iteration trace. Degenerate
/// gradients surface as an error here (single-input contract).
pub fn high_confidence_attack_traced(
    oracle: &ModelOracle,
    x: &Tensor,
    target: usize,
    confidence: f64,
    cfg: &AttackConfig,
) -> Result<TracedAttack> {
    cfg.validate()?;
    let dim = x.numel();
    let mut current = x.data().to_vec();
    let mut trace = Vec::new();
    let mut trajectory = Vec::new();
    let mut iterations = 0;
    let mut success = false;
    let mut p = 0.0;
    for iter in 0..=cfg.max_iter {
        let xb = Tensor::new(vec![1, dim], current.clone())?;
        let (logp, grad) = oracle.probe_targeted(&xb, &[target])?;
        p = logp[0].exp();
        if p >= confidence {
            success = true;
            break;
        }
        if iter == cfg.max_iter {
            break;
        }
        let grow = grad.row(0);
        let gnorm2: f64 = grow.iter().map(|v| v * v).sum();
        if gnorm2.sqrt() < DEGENERATE_GRAD_TOL {
            return Err(Error::DegenerateGradient {
                norm: gnorm2.sqrt(),
                tol: DEGENERATE_GRAD_TOL,
            });
        }
        let scale = match cfg.step {
            StepPolicy::Adaptive => (confidence.ln() - logp[0]) / gnorm2,
            StepPolicy::Fixed(eps) => eps / gnorm2.sqrt(),
        };
        let before = current.clone();
        let step: Vec<f64> = grow.iter().map(|&v| scale * v).collect();
        apply_step(
            &mut current,
            step,
            cfg.clip_l2,
            cfg.bounds,
            cfg.project_each_iter,
        );
        iterations += 1;
        let step_norm = current
            .iter()
            .zip(&before)
            .map(|(&c, &o)| (c - o) * (c - o))
            .sum::<f64>()
            .sqrt();
        let cum = current
            .iter()
            .zip(x.data())
            .map(|(&c, &o)| (c - o) * (c - o))
            .sum::<f64>()
            .sqrt();
        trace.push(TraceRow {
            iteration: iterations,
            confidence: p,
            step_norm,
            cumulative_norm: cum,
        });
        trajectory.push(Tensor::new(vec![dim], current.clone())?);
    }
    Ok(TracedAttack {
        result: make_result(x.data(), &current, cfg.bounds, iterations, success, p)?,
        trace,
        trajectory,
    })
}

// ---------------------------------------------------------------------
// Differentiable unrolled attack (graph builder)
// ---------------------------------------------------------------------

/// Unroll the high-confidence attack into the graph. `targets` is a [B]
/// node of class indices, `confidence` a [B,1] node of per-example C
/// values. The returned node is the adversarial batch, clamped to the
/// domain, differentiable w.r.t. the model parameters through every step.
pub fn build_differentiable_attack(
    g: &mut Graph,
    model: &dyn DiffModel,
    x: NodeId,
    targets: NodeId,
    confidence: NodeId,
    cfg: &AttackConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let tiny = DEGENERATE_GRAD_TOL * DEGENERATE_GRAD_TOL;
    let log_c = g.log(confidence);
    let mut xh = x;
    for _ in 0..cfg.max_iter {
        let lp = model.log_probs(g, xh)?;
        let lpt = g.take_per_row(lp, targets)?;
        let p = g.exp(lpt);
        let s = g.sum_all(lpt);
        let gx = gradient(g, s, &[xh])?.grad(xh);
        let gsq = g.mul(gx, gx)?;
        let denom = g.row_sum(gsq)?;
        let tiny_c = g.scalar(tiny);
        let denom_ok = {
            let d = g.sub(denom, tiny_c)?;
            g.gt_zero_mask(d)
        };
        let denom_safe = g.maximum(denom, tiny_c)?;
        let step_scale = match cfg.step {
            StepPolicy::Adaptive => {
                let f = g.sub(log_c, lpt)?;
                g.div(f, denom_safe)?
            }
            StepPolicy::Fixed(eps) => {
                let norm = g.sqrt(denom_safe);
                let e = g.scalar(eps);
                g.div(e, norm)?
            }
        };
        // keep stepping while p < C
        let cond = g.sub(confidence, p)?;
        let ind = match cfg.indicator {
            IndicatorMode::Hard => {
                let fwd = g.gt_zero_mask(cond);
                let scaled = g.scale(cond, cfg.tau);
                let sur = g.sigmoid(scaled);
                g.straight_through(fwd, sur)?
            }
            IndicatorMode::Smooth => {
                let scaled = g.scale(cond, cfg.tau);
                g.sigmoid(scaled)
            }
        };
        let gate = g.mul(ind, denom_ok)?;
        let scale = g.mul(gate, step_scale)?;
        let mut step = g.mul(scale, gx)?;
        if let Some(clip) = cfg.clip_l2 {
            let sq = g.mul(step, step)?;
            let rs = g.row_sum(sq)?;
            let sn = g.sqrt(rs);
            let sn_safe = g.maximum(sn, tiny_c)?;
            let clip_c = g.scalar(clip);
            let ratio = g.div(clip_c, sn_safe)?;
            let one = g.scalar(1.0);
            let factor = g.minimum(one, ratio)?;
            step = g.mul(factor, step)?;
        }
        xh = g.add(xh, step)?;
        if cfg.project_each_iter {
            xh = g.clamp(xh, cfg.bounds.0, cfg.bounds.1);
        }
    }
    Ok(g.clamp(xh, cfg.bounds.0, cfg.bounds.1))
}

// ---------------------------------------------------------------------
// FGSM
// ---------------------------------------------------------------------

fn sign_zero(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One-step sign attack: x_adv = clamp(x + eps * sign(grad NLL), lo, hi).
pub fn fgsm(
    oracle: &ModelOracle,
    x: &Tensor,
    labels: &[usize],
    eps: f64,
    bounds: (f64, f64),
) -> Result<Tensor> {
    if eps < 0.0 {
        return Err(Error::Config(format!("fgsm eps {eps} must be >= 0")));
    }
    let grad = oracle.nll_input_grad(x, labels)?;
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&xi, &gi)| (xi + eps * sign_zero(gi)).clamp(bounds.0, bounds.1))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

// ---------------------------------------------------------------------
// DeepFool
// ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DeepFoolConfig {
    pub max_iter: usize,
    pub overshoot: f64,
    pub clip_l2: Option<f64>,
    pub bounds: (f64, f64),
    pub project_each_iter: bool,
}

impl Default for DeepFoolConfig {
    fn default() -> Self {
        DeepFoolConfig {
            max_iter: 50,
            overshoot: 0.02,
            clip_l2: None,
            bounds: (0.0, 1.0),
            project_each_iter: false,
        }
    }
}

impl DeepFoolConfig {
    /// Evaluation settings: 500 iterations, per-step clip 0.1, projection.
    pub fn evaluation() -> Self {
        DeepFoolConfig {
            max_iter: 500,
            overshoot: 0.02,
            clip_l2: Some(0.1),
            bounds: (0.0, 1.0),
            project_each_iter: true,
        }
    }
}

/// Untargeted minimal-perturbation attack stepping toward the closest
/// linearized decision boundary. The evaluated iterate carries the
/// overshoot, as in the original formulation, so exactly-linear models
/// cross the boundary in one step. Success when the predicted class flips.
pub fn deepfool(
    oracle: &ModelOracle,
    xs: &Tensor,
    cfg: &DeepFoolConfig,
) -> Result<Vec<AttackResult>> {
    if cfg.max_iter < 1 {
        return Err(Error::Config("deepfool max_iter must be >= 1".into()));
    }
    let b = xs.shape()[0];
    let dim = xs.shape()[1];
    let k = oracle.class_count();
    let factor = 1.0 + cfg.overshoot;

    // original predictions fix the source class
    let logp0 = oracle.log_probs(xs)?;
    let preds0 = argmax_rows(&logp0);

    struct Alive {
        index: usize,
        x0: Vec<f64>,
        total: Vec<f64>, // accumulated un-overshot perturbation
        y0: usize,
        iterations: usize,
    }

    let evaluated = |ex: &Alive| -> Vec<f64> {
        let mut x: Vec<f64> = ex
            .x0
            .iter()
            .zip(&ex.total)
            .map(|(&o, &t)| o + factor * t)
            .collect();
        if cfg.project_each_iter {
            for v in x.iter_mut() {
                *v = v.clamp(cfg.bounds.0, cfg.bounds.1);
            }
        }
        x
    };

    let mut alive: Vec<(Alive, Vec<f64>)> = (0..b)
        .map(|i| {
            let ex = Alive {
                index: i,
                x0: xs.row(i).to_vec(),
                total: vec![0.0; dim],
                y0: preds0[i].0,
                iterations: 0,
            };
            let at = evaluated(&ex);
            (ex, at)
        })
        .collect();
    let mut done: Vec<(usize, AttackResult)> = Vec::with_capacity(b);

    for iter in 0..=cfg.max_iter {
        if alive.is_empty() {
            break;
        }
        let bucket = pow2_bucket(alive.len(), b);
        let rows: Vec<&[f64]> = (0..bucket)
            .map(|i| alive[i.min(alive.len() - 1)].1.as_slice())
            .collect();
        let xb = Tensor::stack_rows(&rows);
        let (logp, jac) = oracle.probe_jacobian(&xb)?;

        let mut next_alive = Vec::with_capacity(alive.len());
        for (slot, (mut ex, at)) in alive.into_iter().enumerate() {
            let row = logp.row(slot);
            let mut pred = 0;
            for j in 1..k {
                if row[j] > row[pred] {
                    pred = j;
                }
            }
            if pred != ex.y0 {
                let res = make_result(&ex.x0, &at, cfg.bounds, ex.iterations, true, row[pred].exp())?;
                done.push((ex.index, res));
                continue;
            }
            if iter == cfg.max_iter {
                let res =
                    make_result(&ex.x0, &at, cfg.bounds, ex.iterations, false, row[pred].exp())?;
                done.push((ex.index, res));
                continue;
            }
            // closest linearized boundary among candidate classes
            let gy = jac[ex.y0].row(slot);
            let mut best: Option<(f64, usize, f64)> = None; // (margin, class, wnorm2)
            for j in 0..k {
                if j == ex.y0 {
                    continue;
                }
                let gj = jac[j].row(slot);
                let mut wn2 = 0.0;
                for d in 0..dim {
                    let w = gj[d] - gy[d];
                    wn2 += w * w;
                }
                if wn2.sqrt() < DEGENERATE_GRAD_TOL {
                    continue;
                }
                let margin = (row[j] - row[ex.y0]).abs() / wn2.sqrt();
                if best.map_or(true, |(m, _, _)| margin < m) {
                    best = Some((margin, j, wn2));
                }
            }
            let Some((_, l, wn2)) = best else {
                let res =
                    make_result(&ex.x0, &at, cfg.bounds, ex.iterations, false, row[pred].exp())?;
                done.push((ex.index, res));
                continue;
            };
            let gl = jac[l].row(slot);
            let f = (row[l] - row[ex.y0]).abs();
            let scale = f / wn2;
            let mut step: Vec<f64> = (0..dim).map(|d| scale * (gl[d] - gy[d])).collect();
            if let Some(clip) = cfg.clip_l2 {
                let sn = step.iter().map(|v| v * v).sum::<f64>().sqrt();
                if sn > clip {
                    for v in step.iter_mut() {
                        *v *= clip / sn;
                    }
                }
            }
            for (t, s) in ex.total.iter_mut().zip(&step) {
                *t += s;
            }
            ex.iterations += 1;
            let at = evaluated(&ex);
            next_alive.push((ex, at));
        }
        alive = next_alive;
    }

    done.sort_by_key(|(i, _)| *i);
    Ok(done.into_iter().map(|(_, r)| r).collect())
}

// ---------------------------------------------------------------------
// Basic iterative method (independent fixed-step reference)
// ---------------------------------------------------------------------

/// Iterative attack taking epsilon-norm steps along the target
/// log-likelihood gradient until the confidence threshold is reached.
/// Deliberately written as its own loop so it serves as the reference
/// trajectory for the fixed-step policy above.
#[allow(clippy::too_many_arguments)]
pub fn bim(
    oracle: &ModelOracle,
    x: &Tensor,
    target: usize,
    confidence: f64,
    eps: f64,
    max_iter: usize,
    clip_l2: Option<f64>,
    bounds: (f64, f64),
    project_each_iter: bool,
) -> Result<(AttackResult, Vec<Tensor>)> {
    let dim = x.numel();
    let mut cur = x.data().to_vec();
    let mut trajectory = Vec::new();
    let mut iterations = 0;
    let mut success = false;
    let mut p = 0.0;
    for iter in 0..=max_iter {
        let xb = Tensor::new(vec![1, dim], cur.clone())?;
        let (logp, grad) = oracle.probe_targeted(&xb, &[target])?;
        p = logp[0].exp();
        if p >= confidence {
            success = true;
            break;
        }
        if iter == max_iter {
            break;
        }
        let grow = grad.row(0);
        let norm = grow.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < DEGENERATE_GRAD_TOL {
            break;
        }
        let mut step: Vec<f64> = grow.iter().map(|&v| eps * v / norm).collect();
        if let Some(clip) = clip_l2 {
            let sn = step.iter().map(|v| v * v).sum::<f64>().sqrt();
            if sn > clip {
                for v in step.iter_mut() {
                    *v *= clip / sn;
                }
            }
        }
        for d in 0..dim {
            cur[d] += step[d];
            if project_each_iter {
                cur[d] = cur[d].clamp(bounds.0, bounds.1);
            }
        }
        iterations += 1;
        trajectory.push(Tensor::new(vec![dim], cur.clone())?);
    }
    Ok((
        make_result(x.data(), &cur, bounds, iterations, success, p)?,
        trajectory,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Binary logistic model: log p(class1) via log-softmax of [0, wx+b].
    fn logistic_oracle(w: f64, b: f64) -> ModelOracle {
        ModelOracle::from_builder(1, 2, move |g, x| {
            let wc = g.constant(Tensor::new(vec![1, 2], vec![0.0, w]).unwrap());
            let bc = g.constant(Tensor::new(vec![2], vec![0.0, b]).unwrap());
            let z = g.matmul(x, wc)?;
            let z = g.add(z, bc)?;
            g.log_softmax(z)
        })
    }

    /// Model whose log-likelihood itself is affine: log p_t = a.x + c.
    fn affine_logp_oracle(a: Vec<f64>, c: f64) -> ModelOracle {
        let dim = a.len();
        ModelOracle::from_builder(dim, 2, move |g, x| {
            let ac = g.constant(Tensor::new(vec![dim, 1], a.clone()).unwrap());
            let lp1 = g.matmul(x, ac)?;
            let lp1 = g.add_scalar(lp1, c);
            // second head is irrelevant filler; stack [lp0, lp1]
            let zeros = g.constant(Tensor::full(&[dim, 1], 0.0));
            let lp0 = g.matmul(x, zeros)?;
            let lp0 = g.add_scalar(lp0, -50.0);
            // concatenate by scatter: build [B,2] via scatter of each column
            let b = g.shape(x)[0];
            let i0 = g.constant(Tensor::full(&[b], 0.0));
            let i1 = g.constant(Tensor::full(&[b], 1.0));
            let c0 = g.reshape(lp0, &[b])?;
            let c1 = g.reshape(lp1, &[b])?;
            // ScatterPerRow expects [B,1]
            let c0 = g.reshape(c0, &[b, 1])?;
            let c1 = g.reshape(c1, &[b, 1])?;
            let s0 = scatter(g, c0, i0, 2);
            let s1 = scatter(g, c1, i1, 2);
            g.add(s0, s1)
        })
    }

    // test-only access to scatter; goes through take_per_row's adjoint op
    fn scatter(g: &mut Graph, v: NodeId, idx: NodeId, k: usize) -> NodeId {
        // reuse the gradient machinery: scatter = d(sum(take(M, idx) * v))/dM
        // simpler: build directly via public ops
        // M = v broadcast the chosen column; implement as v * onehot(idx)
        let b = g.shape(v)[0];
        let mut oh = Tensor::zeros(&[b, k]);
        // idx is a constant here
        // (tests only call this with constant index tensors)
        let idx_val = g
            .eval_one(idx, &Bindings::new(), Mode::Eval)
            .expect("constant index");
        for r in 0..b {
            let j = idx_val.data()[r] as usize;
            oh.data_mut()[r * k + j] = 1.0;
        }
        let ohc = g.constant(oh);
        g.mul(v, ohc).unwrap()
    }

    #[test]
    fn minimal_step_zero_when_already_confident() {
        let oracle = logistic_oracle(2.0, 0.0);
        let x = Tensor::new(vec![1], vec![5.0]).unwrap();
        // p(class1 | x=5) = sigmoid(10) ~ 1 > 0.9 -> loop guard, r = 0
        let r = minimal_step(&oracle, &x, 1, 0.9).unwrap();
        assert_eq!(r.data(), &[0.0]);
    }

    #[test]
    fn minimal_step_matches_logistic_closed_form() {
        // w=2, b=0, x=0: p=0.5; d log p1 / dx = w * (1 - p) = 1
        // r = (ln 0.9 - ln 0.5) / 1^2 * 1 ~ 0.5878
        let oracle = logistic_oracle(2.0, 0.0);
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let r = minimal_step(&oracle, &x, 1, 0.9).unwrap();
        let expect = (0.9f64.ln() - 0.5f64.ln()) / 1.0;
        assert!((r.data()[0] - expect).abs() < 1e-10, "{}", r.data()[0]);

        // iterating reaches p >= 0.9
        let cfg = AttackConfig {
            confidence: 0.9,
            max_iter: 100,
            step: StepPolicy::Adaptive,
            clip_l2: None,
            bounds: (-10.0, 10.0),
            tau: 10.0,
            differentiable: false,
            indicator: IndicatorMode::Hard,
            project_each_iter: false,
        };
        let res = high_confidence_attack(
            &oracle,
            &Tensor::new(vec![1, 1], vec![0.0]).unwrap(),
            &[1],
            &[0.9],
            &cfg,
        )
        .unwrap();
        assert!(res[0].success);
        assert!(res[0].final_confidence >= 0.9);
    }

    #[test]
    fn affine_logp_one_adaptive_step_exact() {
        let oracle = affine_logp_oracle(vec![0.5, -0.25], -3.0);
        let x = Tensor::new(vec![1, 2], vec![0.2, 0.4]).unwrap();
        let c: f64 = 0.9;
        let (lp0, _) = oracle.probe_targeted(&x, &[1]).unwrap();
        assert!(lp0[0] < c.ln());
        let cfg = AttackConfig {
            confidence: c,
            max_iter: 1,
            step: StepPolicy::Adaptive,
            clip_l2: None,
            bounds: (-100.0, 100.0),
            tau: 10.0,
            differentiable: false,
            indicator: IndicatorMode::Hard,
            project_each_iter: false,
        };
        let res = high_confidence_attack(&oracle, &x, &[1], &[c], &cfg).unwrap();
        let xadv = Tensor::new(vec![1, 2], res[0].x_adv.data().to_vec()).unwrap();
        let (lp1, _) = oracle.probe_targeted(&xadv, &[1]).unwrap();
        // affine log-likelihood: the linearization is exact
        assert!(
            (lp1[0] - c.ln()).abs() < 1e-8,
            "log p = {}, log C = {}",
            lp1[0],
            c.ln()
        );
    }

    #[test]
    fn direction_invariant_to_logit_scaling() {
        let o1 = logistic_oracle(2.0, 0.3);
        let o2 = logistic_oracle(4.0, 0.6); // logits doubled
        let x = Tensor::new(vec![1, 1], vec![-0.2]).unwrap();
        let (_, g1) = o1.probe_targeted(&x, &[1]).unwrap();
        let (_, g2) = o2.probe_targeted(&x, &[1]).unwrap();
        // gradient direction (sign here, 1-D) unchanged by positive rescale
        assert_eq!(g1.data()[0].signum(), g2.data()[0].signum());
    }

    #[test]
    fn degenerate_gradient_rejected() {
        let oracle = affine_logp_oracle(vec![0.0, 0.0], -3.0);
        let err = minimal_step(
            &oracle,
            &Tensor::new(vec![2], vec![0.1, 0.1]).unwrap(),
            1,
            0.9,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DegenerateGradient { .. }));
    }

    #[test]
    fn project_and_clip_contracts() {
        let x = Tensor::new(vec![4], vec![0.5, 0.5, 1.0, 0.0]).unwrap();
        // small step unchanged
        let r = Tensor::new(vec![4], vec![0.03, 0.0, 0.0, 0.04]).unwrap();
        let out = project_and_clip(&r, &x, Some(0.1), (0.0, 1.0));
        assert_eq!(out.data(), r.data());
        // large step rescaled to norm 0.1, direction preserved
        let r = Tensor::new(vec![4], vec![0.4, 0.0, 0.0, 0.0]).unwrap();
        let out = project_and_clip(&r, &x, Some(0.1), (0.0, 1.0));
        assert!((out.l2_norm() - 0.1).abs() < 1e-12);
        assert!(out.data()[0] > 0.0);
        // positive component at the upper bound is zeroed
        let r = Tensor::new(vec![4], vec![0.0, 0.0, 0.05, 0.0]).unwrap();
        let out = project_and_clip(&r, &x, Some(0.1), (0.0, 1.0));
        assert_eq!(out.data()[2], 0.0);
    }

    #[test]
    fn fgsm_contracts() {
        let oracle = logistic_oracle(2.0, 0.0);
        let x = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        let adv0 = fgsm(&oracle, &x, &[1], 0.0, (0.0, 1.0)).unwrap();
        assert_eq!(adv0.data(), x.data(), "eps=0 leaves input unchanged");
        let adv = fgsm(&oracle, &x, &[1], 0.1, (0.0, 1.0)).unwrap();
        let linf = adv
            .data()
            .iter()
            .zip(x.data())
            .map(|(&a, &o)| (a - o).abs())
            .fold(0.0, f64::max);
        assert!(linf <= 0.1 + 1e-15);
    }

    #[test]
    fn deepfool_affine_binary_closed_form() {
        // logits [0, w.x + b]; decision boundary at w.x + b = 0
        let w = vec![3.0, -4.0];
        let b0 = 2.5;
        let wc = w.clone();
        let oracle = ModelOracle::from_builder(2, 2, move |g, x| {
            let wt = g.constant(Tensor::new(vec![2, 1], wc.clone()).unwrap());
            let z1 = g.matmul(x, wt)?;
            let z1 = g.add_scalar(z1, b0);
            let b = g.shape(x)[0];
            let zeros = g.constant(Tensor::zeros(&[b, 1]));
            let z0 = g.mul(z1, zeros)?; // zero column
            let i0 = g.constant(Tensor::full(&[b], 0.0));
            let i1 = g.constant(Tensor::full(&[b], 1.0));
            let s0 = scatter(g, z0, i0, 2);
            let s1 = scatter(g, z1, i1, 2);
            let z = g.add(s0, s1)?;
            g.log_softmax(z)
        });
        let x = Tensor::new(vec![1, 2], vec![1.0, 0.5]).unwrap();
        let f = 3.0 * 1.0 - 4.0 * 0.5 + 2.5; // 3.5 > 0 -> class 1
        let wn2: f64 = w.iter().map(|v| v * v).sum();
        let cfg = DeepFoolConfig {
            max_iter: 10,
            overshoot: 0.02,
            clip_l2: None,
            bounds: (-100.0, 100.0),
            project_each_iter: false,
        };
        let res = deepfool(&oracle, &x, &cfg).unwrap();
        assert!(res[0].success);
        assert_eq!(res[0].iterations, 1, "affine model flips in one step");
        // closed form: r = -f(x) w / ||w||^2, times (1 + overshoot)
        for d in 0..2 {
            let expect = -f * w[d] / wn2 * 1.02;
            assert!(
                (res[0].r.data()[d] - expect).abs() < 1e-10,
                "{} vs {}",
                res[0].r.data()[d],
                expect
            );
        }
    }

    #[test]
    fn deepfool_zero_margin_gives_tiny_perturbation() {
        let w = vec![1.0, 1.0];
        let oracle = ModelOracle::from_builder(2, 2, move |g, x| {
            let wt = g.constant(Tensor::new(vec![2, 1], w.clone()).unwrap());
            let z1 = g.matmul(x, wt)?;
            let b = g.shape(x)[0];
            let zeros = g.constant(Tensor::zeros(&[b, 1]));
            let z0 = g.mul(z1, zeros)?;
            let i0 = g.constant(Tensor::full(&[b], 0.0));
            let i1 = g.constant(Tensor::full(&[b], 1.0));
            let s0 = scatter(g, z0, i0, 2);
            let s1 = scatter(g, z1, i1, 2);
            let z = g.add(s0, s1)?;
            g.log_softmax(z)
        });
        // on the boundary: w.x = 0
        let x = Tensor::new(vec![1, 2], vec![0.5, -0.5]).unwrap();
        let cfg = DeepFoolConfig {
            max_iter: 10,
            overshoot: 0.02,
            clip_l2: None,
            bounds: (-100.0, 100.0),
            project_each_iter: false,
        };
        let res = deepfool(&oracle, &x, &cfg).unwrap();
        assert!(res[0].r.l2_norm() < 1e-6, "norm {}", res[0].r.l2_norm());
    }

    #[test]
    fn deepfool_three_class_picks_min_margin_class() {
        // three affine heads with known weights
        let ws = [vec![1.0, 0.0], vec![-0.6, 0.8], vec![0.0, -1.0]];
        let bs = [1.5f64, 0.0, -0.2];
        let wsc = ws.clone();
        let oracle = ModelOracle::from_builder(2, 3, move |g, x| {
            let mut z = None;
            for (j, (w, b)) in wsc.iter().zip(bs.iter()).enumerate() {
                let wt = g.constant(Tensor::new(vec![2, 1], w.clone()).unwrap());
                let zj = g.matmul(x, wt)?;
                let zj = g.add_scalar(zj, *b);
                let bsize = g.shape(x)[0];
                let ij = g.constant(Tensor::full(&[bsize], j as f64));
                let sj = scatter(g, zj, ij, 3);
                z = Some(match z {
                    None => sj,
                    Some(acc) => g.add(acc, sj)?,
                });
            }
            g.log_softmax(z.unwrap())
        });
        let xv = [0.4, 0.1];
        let x = Tensor::new(vec![1, 2], xv.to_vec()).unwrap();
        // brute-force expected target over candidate classes
        let z: Vec<f64> = ws
            .iter()
            .zip(&bs)
            .map(|(w, b)| w[0] * xv[0] + w[1] * xv[1] + b)
            .collect();
        let y = 0; // z = [1.9, -0.16, -0.3] -> class 0
        let mut best = (f64::INFINITY, 0);
        for j in 1..3 {
            let wd = [ws[j][0] - ws[y][0], ws[j][1] - ws[y][1]];
            let m = (z[j] - z[y]).abs() / (wd[0] * wd[0] + wd[1] * wd[1]).sqrt();
            if m < best.0 {
                best = (m, j);
            }
        }
        let cfg = DeepFoolConfig {
            max_iter: 50,
            overshoot: 0.02,
            clip_l2: None,
            bounds: (-100.0, 100.0),
            project_each_iter: false,
        };
        let res = deepfool(&oracle, &x, &cfg).unwrap();
        assert!(res[0].success);
        // the achieved class is the minimal-margin candidate
        let xadv = Tensor::new(vec![1, 2], res[0].x_adv.data().to_vec()).unwrap();
        let lp = oracle.log_probs(&xadv).unwrap();
        let pred = argmax_rows(&lp)[0].0;
        assert_eq!(pred, best.1);
    }

    #[test]
    fn already_on_target_returns_zero_iterations() {
        // p(class1 | x=1) = sigmoid(20) ~ 1 >= 0.9: loop never entered
        let oracle = logistic_oracle(20.0, 0.0);
        let x = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let cfg = AttackConfig::training().with_confidence(0.9);
        let res = high_confidence_attack(&oracle, &x, &[1], &[0.9], &cfg).unwrap();
        assert!(res[0].success);
        assert_eq!(res[0].iterations, 0);
        assert_eq!(res[0].x_adv.data(), x.data(), "x_adv = x");
        assert_eq!(res[0].r.l2_norm(), 0.0);
    }

    #[test]
    fn config_validation() {
        let mut cfg = AttackConfig::training();
        cfg.confidence = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = AttackConfig::training();
        cfg.max_iter = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = AttackConfig::training();
        cfg.clip_l2 = Some(-1.0);
        assert!(cfg.validate().is_err());
        let mut cfg = AttackConfig::training();
        cfg.bounds = (1.0, 0.0);
        assert!(cfg.validate().is_err());
    }
}
