//! Joint training of the classifier and the adversary critic, plus the
//! plain and adversarial-training baselines.
//!
//! Per batch the trainer takes one critic step (discrimination loss plus
//! gradient penalty) and one classifier step (supervised loss, a
//! critic-fooling term driven through the differentiable attack, and the
//! adversarial cycle-consistency term). Attack targets come from the
//! closest-decision-boundary rule; the attack's confidence target is a
//! per-class running mean of the model's confidence on natural data.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{build_differentiable_attack, AttackConfig, DEGENERATE_GRAD_TOL};
use crate::autodiff::{gradient, Bindings, Graph, Mode, NodeId, Tensor};
use crate::critic::{critic_loss, gradient_penalty};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{
    nll_loss, ClassifierNet, ClassifierSpec, CriticNet, CriticSpec, DiffModel, ParamSet,
};

/// Optimizer settings. Learning rates halve every `halve_every` epochs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_classifier: f64,
    pub lr_critic: f64,
    pub halve_every: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            lr_classifier: 5e-4,
            lr_critic: 1e-3,
            halve_every: 40,
        }
    }
}

/// Full training configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub spec: ClassifierSpec,
    /// Robustness trade-off weight on the critic-fooling term.
    pub lambda: f64,
    /// Cycle-consistency weight.
    pub lambda_rec: f64,
    /// Gradient-penalty weight.
    pub lambda_grad: f64,
    /// FGSM epsilon for the adversarial-training baseline.
    pub at_epsilon: f64,
    /// Weight of the adversarial term in the baseline objective.
    pub at_lambda: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub attack: AttackConfig,
    pub seed: u64,
    /// Running-mean decay for the confidence tracker.
    pub tracker_alpha: f64,
    /// Floor on the per-example attack confidence early in training.
    pub confidence_floor: f64,
    /// Sample targets from the masked uniform distribution instead of the
    /// closest decision boundary.
    pub masked_uniform_targets: bool,
    /// Fraction of each batch entering the cycle term.
    pub cycle_fraction: f64,
    pub leaky_slope: f64,
    pub critic_input_noise: f64,
    pub critic_hidden_noise: f64,
}

impl TrainConfig {
    /// Paper-scale defaults for the fully-connected network.
    pub fn mlp_paper(seed: u64) -> Self {
        TrainConfig {
            spec: ClassifierSpec::mlp(10),
            lambda: 0.5,
            lambda_rec: 1e-2,
            lambda_grad: 10.0,
            at_epsilon: 0.1,
            at_lambda: 1.0,
            adam: AdamConfig::default(),
            batch_size: 100,
            epochs: 100,
            pretrain_epochs: 1,
            attack: AttackConfig::training(),
            seed,
            tracker_alpha: 0.01,
            confidence_floor: 0.55,
            masked_uniform_targets: false,
            cycle_fraction: 0.5,
            leaky_slope: 0.2,
            critic_input_noise: 0.3,
            critic_hidden_noise: 0.5,
        }
    }

    /// Paper-scale defaults for the convolutional network.
    pub fn lenet5_paper(seed: u64) -> Self {
        let mut cfg = Self::mlp_paper(seed);
        cfg.spec = ClassifierSpec::lenet5(10);
        cfg.lambda = 0.1;
        cfg
    }

    /// Desk-scale variant: 10 epochs over a 10k-image training subset.
    pub fn mlp_desk(seed: u64) -> Self {
        let mut cfg = Self::mlp_paper(seed);
        cfg.epochs = 10;
        cfg
    }

    pub fn lenet5_desk(seed: u64) -> Self {
        let mut cfg = Self::lenet5_paper(seed);
        cfg.epochs = 10;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.lambda_rec < 0.0 || self.lambda_grad < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if self.adam.lr_classifier <= 0.0 || self.adam.lr_critic <= 0.0 {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be >= 2".into()));
        }
        if !(0.0 < self.tracker_alpha && self.tracker_alpha <= 1.0) {
            return Err(Error::Config("tracker alpha must be in (0,1]".into()));
        }
        self.attack.validate()
    }

    pub fn critic_spec(&self) -> CriticSpec {
        CriticSpec {
            input_dim: self.spec.input_dim(),
            hidden: 1200,
            leaky_slope: self.leaky_slope,
            input_noise_std: self.critic_input_noise,
            hidden_noise_std: self.critic_hidden_noise,
            k: self.spec.k,
        }
    }
}

/// Per-class running mean of natural-data confidence.
#[derive(Debug, Clone)]
pub struct ConfidenceTracker {
    c: Vec<f64>,
    alpha: f64,
}

impl ConfidenceTracker {
    pub fn new(k: usize, alpha: f64) -> Self {
        ConfidenceTracker {
            c: vec![0.5; k],
            alpha,
        }
    }

    /// c_k <- (1-a) c_k + a * mean(p_y over class-k rows); classes absent
    /// from the batch stay unchanged.
    pub fn update(&mut self, labels: &[usize], p_true: &[f64]) {
        let k = self.c.len();
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&y, &p) in labels.iter().zip(p_true) {
            sums[y] += p;
            counts[y] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                let mean = sums[j] / counts[j] as f64;
                self.c[j] = (1.0 - self.alpha) * self.c[j] + self.alpha * mean;
            }
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.c
    }

    pub fn confidence_for(&self, class: usize, floor: f64) -> f64 {
        self.c[class].max(floor).min(1.0 - 1e-9)
    }
}

/// Closest-decision-boundary target per example, from log-probs and the
/// per-class input-gradient stack. Ties break toward the lower class
/// index; if every candidate margin is degenerate, the runner-up class by
/// probability is used.
pub fn select_targets(logp: &Tensor, jac: &[Tensor], labels: &[usize]) -> Vec<usize> {
    let (b, k) = (logp.shape()[0], logp.shape()[1]);
    let dim = jac[0].shape()[1];
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let y = labels[i];
        let row = logp.row(i);
        let gy = jac[y].row(i);
        let mut best: Option<(f64, usize)> = None;
        for j in 0..k {
            if j == y {
                continue;
            }
            let gj = jac[j].row(i);
            let mut wn2 = 0.0;
            for d in 0..dim {
                let w = gj[d] - gy[d];
                wn2 += w * w;
            }
            if wn2.sqrt() < DEGENERATE_GRAD_TOL {
                continue;
            }
            let margin = (row[y] - row[j]).abs() / wn2.sqrt();
            if best.map_or(true, |(m, _)| margin < m) {
                best = Some((margin, j));
            }
        }
        let target = best.map(|(_, j)| j).unwrap_or_else(|| {
            // all margins degenerate: runner-up class by probability
            let mut runner = if y == 0 { 1 } else { 0 };
            for j in 0..k {
                if j != y && row[j] > row[runner] {
                    runner = j;
                }
            }
            runner
        });
        debug_assert_ne!(target, y);
        out.push(target);
    }
    out
}

/// Single-input convenience over [`select_targets`].
pub fn select_target(oracle: &crate::attack::ModelOracle, x: &Tensor, y: usize) -> Result<usize> {
    let xb = Tensor::new(vec![1, x.numel()], x.data().to_vec())?;
    let (logp, jac) = oracle.probe_jacobian(&xb)?;
    Ok(select_targets(&logp, &jac, &[y])[0])
}

// ---------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(shapes: &[Vec<usize>], cfg: &AdamConfig) -> Self {
        Adam {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
        }
    }

    fn step(&mut self, lr: f64, values: &mut [Tensor], grads: &[&Tensor]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((val, m), (v, g)) in values
            .iter_mut()
            .zip(&mut self.m)
            .zip(self.v.iter_mut().zip(grads))
        {
            self.update_one(lr, bc1, bc2, val, m, v, g);
        }
    }

    /// One step applied directly to graph variables (no value copies).
    fn step_vars(&mut self, lr: f64, graph: &mut Graph, vars: &[NodeId], grads: &[&Tensor]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut m = std::mem::take(&mut self.m);
        let mut v = std::mem::take(&mut self.v);
        for (((&var, m), v), g) in vars.iter().zip(&mut m).zip(&mut v).zip(grads) {
            let val = graph.variable_value_mut(var);
            self.update_one(lr, bc1, bc2, val, m, v, g);
        }
        self.m = m;
        self.v = v;
    }

    fn update_one(
        &self,
        lr: f64,
        bc1: f64,
        bc2: f64,
        val: &mut Tensor,
        m: &mut Tensor,
        v: &mut Tensor,
        g: &Tensor,
    ) {
        let vd = val.data_mut();
        let md = m.data_mut();
        let vvd = v.data_mut();
        let gd = g.data();
        for i in 0..vd.len() {
            md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
            vvd[i] = self.beta2 * vvd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
            vd[i] -= lr * (md[i] / bc1) / ((vvd[i] / bc2).sqrt() + self.eps);
        }
    }
}

/// Update graph variables in place with one optimizer step.
fn apply_adam(
    graph: &mut Graph,
    vars: &[NodeId],
    grads: &[&Tensor],
    adam: &mut Adam,
    lr: f64,
) -> Result<()> {
    adam.step_vars(lr, graph, vars, grads);
    Ok(())
}

// ---------------------------------------------------------------------
// Losses and the training graph
// ---------------------------------------------------------------------

/// Node handles for the classifier objective.
pub struct ClassifierLoss {
    pub total: NodeId,
    pub nll: NodeId,
    pub fool: NodeId,
    pub cycle: NodeId,
    pub x_adv: NodeId,
    pub p_true: NodeId,
}

/// Classifier objective: NLL plus lambda times the critic-fooling term
/// (non-saturating form, -log D over the attack output) plus lambda_rec
/// times the cycle residual. The attack is in-graph, so the gradient
/// w.r.t. the classifier parameters carries the second-order path.
#[allow(clippy::too_many_arguments)]
pub fn classifier_loss(
    g: &mut Graph,
    model: &dyn DiffModel,
    critic: &CriticNet,
    x: NodeId,
    y: NodeId,
    y_t: NodeId,
    conf: NodeId,
    cycle_x: NodeId,
    cycle_y_src: NodeId,
    cycle_y_t: NodeId,
    cycle_conf_t: NodeId,
    cycle_conf_s: NodeId,
    lambda: f64,
    lambda_rec: f64,
    attack_cfg: &AttackConfig,
) -> Result<ClassifierLoss> {
    let logp = model.log_probs(g, x)?;
    let nll = nll_loss(g, logp, y)?;
    let p_true = {
        let lp = g.take_per_row(logp, y)?;
        g.exp(lp)
    };

    let x_adv = build_differentiable_attack(g, model, x, y_t, conf, attack_cfg)?;

    // -log D_{y_t}(x_adv) via softplus on the pre-sigmoid head
    let z = critic.pre_sigmoid(g, x_adv)?;
    let z_t = g.take_per_row(z, y_t)?;
    let nz = g.neg(z_t);
    let sp = g.softplus(nz);
    let fool = g.mean_all(sp);

    // cycle: attack to the target class, then back to the source class
    let x_cy_adv =
        build_differentiable_attack(g, model, cycle_x, cycle_y_t, cycle_conf_t, attack_cfg)?;
    let x_cy_back =
        build_differentiable_attack(g, model, x_cy_adv, cycle_y_src, cycle_conf_s, attack_cfg)?;
    let diff = g.sub(x_cy_back, cycle_x)?;
    let sq = g.mul(diff, diff)?;
    let rs = g.row_sum(sq)?;
    let norms = g.sqrt(rs);
    let cycle = g.mean_all(norms);

    let fool_w = g.scale(fool, lambda);
    let cycle_w = g.scale(cycle, lambda_rec);
    let t1 = g.add(nll, fool_w)?;
    let total = g.add(t1, cycle_w)?;
    Ok(ClassifierLoss {
        total,
        nll,
        fool,
        cycle,
        x_adv,
        p_true,
    })
}

/// One epoch record of the line-delimited training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub pretrain: bool,
    pub nll: f64,
    pub critic_loss: f64,
    pub fool_loss: f64,
    pub cycle_loss: f64,
    pub test_error: f64,
    pub mean_confidence: Vec<f64>,
    /// Mean cycle residual on the fixed probe batch (defense runs only).
    pub cycle_probe: Option<f64>,
}

/// Training products: checkpoints plus the per-epoch log.
pub struct TrainOutput {
    pub classifier: ParamSet,
    pub critic: Option<ParamSet>,
    pub log: Vec<EpochRecord>,
}

pub(crate) fn stream_seed(seed: u64, id: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(id.wrapping_mul(0xd1b54a32d192ed03));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

const STREAM_INIT_CLASSIFIER: u64 = 1;
const STREAM_INIT_CRITIC: u64 = 2;
const STREAM_CYCLE: u64 = 3;
const STREAM_UNIFORM_TARGET: u64 = 4;
const STREAM_NOISE: u64 = 5;
const STREAM_SHUFFLE: u64 = 100;

fn epoch_batches(n: usize, batch: usize, seed: u64, epoch_index: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, STREAM_SHUFFLE + epoch_index));
    idx.shuffle(&mut rng);
    idx.chunks_exact(batch).map(|c| c.to_vec()).collect()
}

fn gather_batch(ds: &Dataset, idx: &[usize]) -> (Tensor, Vec<usize>) {
    let rows: Vec<&[f64]> = idx.iter().map(|&i| ds.images.row(i)).collect();
    let labels = idx.iter().map(|&i| ds.labels[i]).collect();
    (Tensor::stack_rows(&rows), labels)
}

fn labels_tensor(labels: &[usize]) -> Tensor {
    Tensor::new(
        vec![labels.len()],
        labels.iter().map(|&v| v as f64).collect(),
    )
    .expect("label vector")
}

fn diverged(e: Error, context: &str) -> Error {
    match e {
        Error::NonFinite { op, node } => Error::Diverged(format!(
            "non-finite value in {context} (op `{op}`, node {node})"
        )),
        other => other,
    }
}

fn export_params(graph: &Graph, vars: &[NodeId], names: &[String], arch: &str, k: usize, seed: u64) -> ParamSet {
    let params = vars
        .iter()
        .zip(names)
        .map(|(&var, name)| (name.clone(), (*graph.variable_value(var)).clone()))
        .collect();
    ParamSet::new(arch, k, seed, params)
}

/// Test error (%) evaluated in chunks against a frozen checkpoint.
fn checkpoint_test_error(params: &ParamSet, ds: &Dataset) -> Result<f64> {
    let oracle = crate::attack::ModelOracle::for_classifier(params);
    let mut wrong = 0usize;
    let chunk = 500.min(ds.len());
    let mut i = 0;
    while i < ds.len() {
        let hi = (i + chunk).min(ds.len());
        let rows: Vec<&[f64]> = (i..hi).map(|j| ds.images.row(j)).collect();
        let xb = Tensor::stack_rows(&rows);
        let logp = oracle.log_probs(&xb)?;
        let preds = crate::attack::argmax_rows(&logp);
        for (j, (pred, _)) in preds.iter().enumerate() {
            if *pred != ds.labels[i + j] {
                wrong += 1;
            }
        }
        i = hi;
    }
    Ok(100.0 * wrong as f64 / ds.len() as f64)
}

// ---------------------------------------------------------------------
// The defense trainer
// ---------------------------------------------------------------------

struct DefenseGraph {
    graph: Graph,
    x: NodeId,
    y: NodeId,
    y_t: NodeId,
    conf: NodeId,
    cy_x: NodeId,
    cy_y_src: NodeId,
    cy_y_t: NodeId,
    cy_conf_t: NodeId,
    cy_conf_s: NodeId,
    loss: ClassifierLoss,
    critic_total: NodeId,
    logp_nat: NodeId,
    jac: Vec<NodeId>,
    clf_vars: Vec<NodeId>,
    clf_names: Vec<String>,
    critic_vars: Vec<NodeId>,
    critic_names: Vec<String>,
    grads_f: Vec<NodeId>,
    grads_d: Vec<NodeId>,
    grads_nll: Vec<NodeId>,
}

fn build_defense_graph(
    cfg: &TrainConfig,
    clf_params: &ParamSet,
    critic_params: &ParamSet,
) -> Result<DefenseGraph> {
    let b = cfg.batch_size;
    let h = cycle_rows(cfg);
    let dim = cfg.spec.input_dim();
    let mut g = Graph::new(stream_seed(cfg.seed, STREAM_NOISE));

    let net = ClassifierNet::instantiate(&mut g, clf_params)?;
    let critic = CriticNet::instantiate(&mut g, &cfg.critic_spec(), critic_params)?;

    let x = g.placeholder("x", &[b, dim], true);
    let y = g.placeholder("y", &[b], false);
    let y_t = g.placeholder("y_t", &[b], false);
    let conf = g.placeholder("conf", &[b, 1], false);
    let cy_x = g.placeholder("cycle_x", &[h, dim], true);
    let cy_y_src = g.placeholder("cycle_y_src", &[h], false);
    let cy_y_t = g.placeholder("cycle_y_t", &[h], false);
    let cy_conf_t = g.placeholder("cycle_conf_t", &[h, 1], false);
    let cy_conf_s = g.placeholder("cycle_conf_s", &[h, 1], false);

    let loss = classifier_loss(
        &mut g,
        &net,
        &critic,
        x,
        y,
        y_t,
        conf,
        cy_x,
        cy_y_src,
        cy_y_t,
        cy_conf_t,
        cy_conf_s,
        cfg.lambda,
        cfg.lambda_rec,
        &cfg.attack,
    )?;

    // critic side: the attack output enters detached
    let x_adv_det = g.stop_gradient(loss.x_adv);
    let bce = critic_loss(&mut g, &critic, x, y, x_adv_det, y_t)?;
    let gp_nat = gradient_penalty(&mut g, &critic, x, y)?;
    let gp_adv = gradient_penalty(&mut g, &critic, x_adv_det, y_t)?;
    let gp = g.add(gp_nat, gp_adv)?;
    let gp_w = g.scale(gp, cfg.lambda_grad);
    let critic_total = g.add(bce, gp_w)?;

    // per-class input gradients for target selection
    let logp_nat = net.log_probs(&mut g, x)?;
    let mut jac = Vec::with_capacity(cfg.spec.k);
    for j in 0..cfg.spec.k {
        let idx = g.constant(Tensor::full(&[b], j as f64));
        let lpj = g.take_per_row(logp_nat, idx)?;
        let sj = g.sum_all(lpj);
        jac.push(gradient(&mut g, sj, &[x])?.grad(x));
    }

    let clf_vars = net.param_nodes();
    let clf_names: Vec<String> = net.vars().iter().map(|(n, _)| n.clone()).collect();
    let critic_vars = critic.param_nodes();
    let critic_names: Vec<String> = critic_params
        .params()
        .iter()
        .map(|(n, _)| n.clone())
        .collect();
    let gm_f = gradient(&mut g, loss.total, &clf_vars)?;
    let grads_f = clf_vars.iter().map(|&v| gm_f.grad(v)).collect();
    let gm_d = gradient(&mut g, critic_total, &critic_vars)?;
    let grads_d = critic_vars.iter().map(|&v| gm_d.grad(v)).collect();
    let gm_nll = gradient(&mut g, loss.nll, &clf_vars)?;
    let grads_nll = clf_vars.iter().map(|&v| gm_nll.grad(v)).collect();

    Ok(DefenseGraph {
        graph: g,
        x,
        y,
        y_t,
        conf,
        cy_x,
        cy_y_src,
        cy_y_t,
        cy_conf_t,
        cy_conf_s,
        loss,
        critic_total,
        logp_nat,
        jac,
        clf_vars,
        clf_names,
        critic_vars,
        critic_names,
        grads_f,
        grads_d,
        grads_nll,
    })
}

fn cycle_rows(cfg: &TrainConfig) -> usize {
    ((cfg.batch_size as f64 * cfg.cycle_fraction).round() as usize)
        .clamp(1, cfg.batch_size)
}

/// Train the defense: pretrain the classifier on plain NLL to seed the
/// confidence tracker, then alternate critic and classifier updates.
pub fn train(
    cfg: &TrainConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    mut progress: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let k = cfg.spec.k;
    let b = cfg.batch_size;
    let h = cycle_rows(cfg);
    let clf_seed = stream_seed(cfg.seed, STREAM_INIT_CLASSIFIER);
    let critic_seed = stream_seed(cfg.seed, STREAM_INIT_CRITIC);
    let clf_params = crate::nn::init_classifier_params(&cfg.spec, clf_seed)?;
    let critic_params = crate::nn::init_critic_params(&cfg.critic_spec(), critic_seed)?;
    let mut dg = build_defense_graph(cfg, &clf_params, &critic_params)?;

    let shapes_f: Vec<Vec<usize>> = dg.clf_vars.iter().map(|&v| dg.graph.shape(v).to_vec()).collect();
    let shapes_d: Vec<Vec<usize>> = dg
        .critic_vars
        .iter()
        .map(|&v| dg.graph.shape(v).to_vec())
        .collect();
    let mut adam_f = Adam::new(&shapes_f, &cfg.adam);
    let mut adam_d = Adam::new(&shapes_d, &cfg.adam);
    let mut tracker = ConfidenceTracker::new(k, cfg.tracker_alpha);
    let mut cycle_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, STREAM_CYCLE));
    let mut uniform_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, STREAM_UNIFORM_TARGET));

    // fixed probe batch for the cycle-residual diagnostic
    let probe_idx: Vec<usize> = (0..b.min(train_ds.len())).collect();
    let (probe_x, probe_y) = gather_batch(train_ds, &probe_idx);

    let mut log = Vec::new();
    let total_epochs = cfg.pretrain_epochs + cfg.epochs;
    for epoch in 0..total_epochs {
        let pretrain = epoch < cfg.pretrain_epochs;
        let lr_scale = 0.5f64.powi((epoch / cfg.adam.halve_every.max(1)) as i32);
        let lr_f = cfg.adam.lr_classifier * lr_scale;
        let lr_d = cfg.adam.lr_critic * lr_scale;
        let batches = epoch_batches(train_ds.len(), b, cfg.seed, epoch as u64);
        let mut sums = [0.0f64; 4]; // nll, critic, fool, cycle
        let mut nb = 0usize;
        for idx in &batches {
            let (xb, yb) = gather_batch(train_ds, idx);
            let ybt = labels_tensor(&yb);

            if pretrain {
                let mut bind = Bindings::new();
                bind.set(dg.x, xb);
                bind.set(dg.y, ybt);
                let mut req = vec![dg.loss.nll, dg.loss.p_true];
                req.extend(&dg.grads_nll);
                let outs = dg
                    .graph
                    .eval(&req, &bind, Mode::Train)
                    .map_err(|e| diverged(e, &format!("pretrain epoch {epoch}")))?;
                let grads: Vec<&Tensor> = outs[2..].iter().map(|t| &**t).collect();
                apply_adam(&mut dg.graph, &dg.clf_vars, &grads, &mut adam_f, lr_f)?;
                tracker.update(&yb, outs[1].data());
                sums[0] += outs[0].scalar_value();
                nb += 1;
                continue;
            }

            // attack targets from the current model
            let mut bind = Bindings::new();
            bind.set(dg.x, xb.clone());
            let mut req = vec![dg.logp_nat];
            req.extend(&dg.jac);
            let jout = dg
                .graph
                .eval(&req, &bind, Mode::Eval)
                .map_err(|e| diverged(e, &format!("target selection epoch {epoch}")))?;
            let logp_v = &jout[0];
            let jac_v: Vec<Tensor> = jout[1..].iter().map(|t| (**t).clone()).collect();
            let y_t = if cfg.masked_uniform_targets {
                yb.iter()
                    .map(|&y| {
                        let mut t = uniform_rng.gen_range(0..k - 1);
                        if t >= y {
                            t += 1;
                        }
                        t
                    })
                    .collect::<Vec<usize>>()
            } else {
                select_targets(logp_v, &jac_v, &yb)
            };
            let conf: Vec<f64> = y_t
                .iter()
                .map(|&t| tracker.confidence_for(t, cfg.confidence_floor))
                .collect();

            // cycle half: random rows of this batch
            let mut order: Vec<usize> = (0..b).collect();
            order.shuffle(&mut cycle_rng);
            let cyc = &order[..h];
            let cy_rows: Vec<&[f64]> = cyc.iter().map(|&i| xb.row(i)).collect();
            let cy_x = Tensor::stack_rows(&cy_rows);
            let cy_src: Vec<usize> = cyc.iter().map(|&i| yb[i]).collect();
            let cy_t: Vec<usize> = cyc.iter().map(|&i| y_t[i]).collect();
            let cy_conf_t: Vec<f64> = cyc.iter().map(|&i| conf[i]).collect();
            let cy_conf_s: Vec<f64> = cy_src
                .iter()
                .map(|&s| tracker.confidence_for(s, cfg.confidence_floor))
                .collect();

            let mut bind = Bindings::new();
            bind.set(dg.x, xb);
            bind.set(dg.y, ybt);
            bind.set(dg.y_t, labels_tensor(&y_t));
            bind.set(dg.conf, Tensor::new(vec![b, 1], conf)?);
            bind.set(dg.cy_x, cy_x);
            bind.set(dg.cy_y_src, labels_tensor(&cy_src));
            bind.set(dg.cy_y_t, labels_tensor(&cy_t));
            bind.set(dg.cy_conf_t, Tensor::new(vec![h, 1], cy_conf_t)?);
            bind.set(dg.cy_conf_s, Tensor::new(vec![h, 1], cy_conf_s)?);

            // critic step first (it sees the current classifier), then
            // the classifier step against the updated critic; the second
            // phase reuses every value the critic update cannot touch,
            // the in-graph attack included
            let mut creq = vec![dg.critic_total];
            creq.extend(&dg.grads_d);
            let mut freq = vec![
                dg.loss.total,
                dg.loss.nll,
                dg.loss.fool,
                dg.loss.cycle,
                dg.loss.p_true,
            ];
            freq.extend(&dg.grads_f);
            let critic_vars = dg.critic_vars.clone();
            let (couts, fouts) = dg
                .graph
                .eval_two_phase(&creq, &freq, &critic_vars, &bind, Mode::Train, |g, outs| {
                    let grads: Vec<&Tensor> = outs[1..].iter().map(|t| &**t).collect();
                    apply_adam(g, &critic_vars, &grads, &mut adam_d, lr_d)
                })
                .map_err(|e| diverged(e, &format!("training step epoch {epoch}")))?;
            {
                let grads: Vec<&Tensor> = fouts[5..].iter().map(|t| &**t).collect();
                apply_adam(&mut dg.graph, &dg.clf_vars, &grads, &mut adam_f, lr_f)?;
            }
            tracker.update(&yb, fouts[4].data());
            sums[0] += fouts[1].scalar_value();
            sums[1] += couts[0].scalar_value();
            sums[2] += fouts[2].scalar_value();
            sums[3] += fouts[3].scalar_value();
            nb += 1;
        }

        let classifier = export_params(
            &dg.graph,
            &dg.clf_vars,
            &dg.clf_names,
            cfg.spec.arch.tag(),
            k,
            clf_seed,
        );
        let test_error = checkpoint_test_error(&classifier, test_ds)?;
        let cycle_probe = if pretrain {
            None
        } else {
            Some(probe_cycle_residual(&dg, cfg, &probe_x, &probe_y, &tracker)?)
        };
        let rec = EpochRecord {
            epoch,
            pretrain,
            nll: sums[0] / nb.max(1) as f64,
            critic_loss: sums[1] / nb.max(1) as f64,
            fool_loss: sums[2] / nb.max(1) as f64,
            cycle_loss: sums[3] / nb.max(1) as f64,
            test_error,
            mean_confidence: tracker.values().to_vec(),
            cycle_probe,
        };
        if let Some(cb) = progress.as_deref_mut() {
            cb(&rec);
        }
        log.push(rec);
    }

    let classifier = export_params(
        &dg.graph,
        &dg.clf_vars,
        &dg.clf_names,
        cfg.spec.arch.tag(),
        k,
        clf_seed,
    );
    let critic = export_params(
        &dg.graph,
        &dg.critic_vars,
        &dg.critic_names,
        crate::nn::CRITIC_ARCH_TAG,
        k,
        critic_seed,
    );
    Ok(TrainOutput {
        classifier,
        critic: Some(critic),
        log,
    })
}

/// Cycle residual on the fixed probe batch, with targets re-selected by
/// the current model.
fn probe_cycle_residual(
    dg: &DefenseGraph,
    cfg: &TrainConfig,
    probe_x: &Tensor,
    probe_y: &[usize],
    tracker: &ConfidenceTracker,
) -> Result<f64> {
    let b = cfg.batch_size;
    let h = cycle_rows(cfg);
    let n = probe_x.shape()[0];
    // pad the jacobian batch up to the training batch size
    let rows: Vec<&[f64]> = (0..b).map(|i| probe_x.row(i.min(n - 1))).collect();
    let xb = Tensor::stack_rows(&rows);
    let labels: Vec<usize> = (0..b).map(|i| probe_y[i.min(n - 1)]).collect();
    let mut bind = Bindings::new();
    bind.set(dg.x, xb);
    let mut req = vec![dg.logp_nat];
    req.extend(&dg.jac);
    let outs = dg.graph.eval(&req, &bind, Mode::Eval)?;
    let logp_v = &outs[0];
    let jac_v: Vec<Tensor> = outs[1..].iter().map(|t| (**t).clone()).collect();
    let y_t = select_targets(logp_v, &jac_v, &labels);

    let rows: Vec<&[f64]> = (0..h).map(|i| probe_x.row(i.min(n - 1))).collect();
    let cx = Tensor::stack_rows(&rows);
    let src: Vec<usize> = (0..h).map(|i| labels[i.min(n - 1)]).collect();
    let tgt: Vec<usize> = (0..h).map(|i| y_t[i.min(n - 1)]).collect();
    let conf_t: Vec<f64> = tgt
        .iter()
        .map(|&t| tracker.confidence_for(t, cfg.confidence_floor))
        .collect();
    let conf_s: Vec<f64> = src
        .iter()
        .map(|&s| tracker.confidence_for(s, cfg.confidence_floor))
        .collect();
    let mut bind = Bindings::new();
    bind.set(dg.cy_x, cx);
    bind.set(dg.cy_y_src, labels_tensor(&src));
    bind.set(dg.cy_y_t, labels_tensor(&tgt));
    bind.set(dg.cy_conf_t, Tensor::new(vec![h, 1], conf_t)?);
    bind.set(dg.cy_conf_s, Tensor::new(vec![h, 1], conf_s)?);
    Ok(dg
        .graph
        .eval_one(dg.loss.cycle, &bind, Mode::Eval)?
        .scalar_value())
}

// ---------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------

/// Plain supervised training (no defense).
pub fn train_reference(
    cfg: &TrainConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    mut progress: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let k = cfg.spec.k;
    let b = cfg.batch_size;
    let dim = cfg.spec.input_dim();
    let clf_seed = stream_seed(cfg.seed, STREAM_INIT_CLASSIFIER);
    let clf_params = crate::nn::init_classifier_params(&cfg.spec, clf_seed)?;

    let mut g = Graph::new(stream_seed(cfg.seed, STREAM_NOISE));
    let net = ClassifierNet::instantiate(&mut g, &clf_params)?;
    let x = g.placeholder("x", &[b, dim], true);
    let y = g.placeholder("y", &[b], false);
    let logp = net.log_probs(&mut g, x)?;
    let nll = nll_loss(&mut g, logp, y)?;
    let p_true = {
        let lp = g.take_per_row(logp, y)?;
        g.exp(lp)
    };
    let vars = net.param_nodes();
    let names: Vec<String> = net.vars().iter().map(|(n, _)| n.clone()).collect();
    let gm = gradient(&mut g, nll, &vars)?;
    let grads: Vec<NodeId> = vars.iter().map(|&v| gm.grad(v)).collect();

    let shapes: Vec<Vec<usize>> = vars.iter().map(|&v| g.shape(v).to_vec()).collect();
    let mut adam = Adam::new(&shapes, &cfg.adam);
    let mut tracker = ConfidenceTracker::new(k, cfg.tracker_alpha);

    let mut log = Vec::new();
    let total_epochs = cfg.pretrain_epochs + cfg.epochs;
    for epoch in 0..total_epochs {
        let lr = cfg.adam.lr_classifier * 0.5f64.powi((epoch / cfg.adam.halve_every.max(1)) as i32);
        let batches = epoch_batches(train_ds.len(), b, cfg.seed, epoch as u64);
        let mut nll_sum = 0.0;
        let mut nb = 0usize;
        for idx in &batches {
            let (xb, yb) = gather_batch(train_ds, idx);
            let mut bind = Bindings::new();
            bind.set(x, xb);
            bind.set(y, labels_tensor(&yb));
            let mut req = vec![nll, p_true];
            req.extend(&grads);
            let outs = g
                .eval(&req, &bind, Mode::Train)
                .map_err(|e| diverged(e, &format!("reference epoch {epoch}")))?;
            let gvals: Vec<&Tensor> = outs[2..].iter().map(|t| &**t).collect();
            apply_adam(&mut g, &vars, &gvals, &mut adam, lr)?;
            tracker.update(&yb, outs[1].data());
            nll_sum += outs[0].scalar_value();
            nb += 1;
        }
        let classifier = export_params(&g, &vars, &names, cfg.spec.arch.tag(), k, clf_seed);
        let test_error = checkpoint_test_error(&classifier, test_ds)?;
        let rec = EpochRecord {
            epoch,
            pretrain: epoch < cfg.pretrain_epochs,
            nll: nll_sum / nb.max(1) as f64,
            critic_loss: 0.0,
            fool_loss: 0.0,
            cycle_loss: 0.0,
            test_error,
            mean_confidence: tracker.values().to_vec(),
            cycle_probe: None,
        };
        if let Some(cb) = progress.as_deref_mut() {
            cb(&rec);
        }
        log.push(rec);
    }
    let classifier = export_params(&g, &vars, &names, cfg.spec.arch.tag(), k, clf_seed);
    Ok(TrainOutput {
        classifier,
        critic: None,
        log,
    })
}

/// Adversarial-training baseline: augment each batch with one-step sign
/// perturbations generated online; the dependency of the perturbation on
/// the parameters is discarded.
pub fn train_adversarial_baseline(
    cfg: &TrainConfig,
    train_ds: &Dataset,
    test_ds: &Dataset,
    mut progress: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if cfg.at_epsilon < 0.0 {
        return Err(Error::Config("at_epsilon must be >= 0".into()));
    }
    let k = cfg.spec.k;
    let b = cfg.batch_size;
    let dim = cfg.spec.input_dim();
    let clf_seed = stream_seed(cfg.seed, STREAM_INIT_CLASSIFIER);
    let clf_params = crate::nn::init_classifier_params(&cfg.spec, clf_seed)?;

    let mut g = Graph::new(stream_seed(cfg.seed, STREAM_NOISE));
    let net = ClassifierNet::instantiate(&mut g, &clf_params)?;
    let x = g.placeholder("x", &[b, dim], true);
    let y = g.placeholder("y", &[b], false);
    let logp = net.log_probs(&mut g, x)?;
    let nll_clean = nll_loss(&mut g, logp, y)?;
    let p_true = {
        let lp = g.take_per_row(logp, y)?;
        g.exp(lp)
    };
    // sign has zero gradient, so the adversarial term's dependency on the
    // parameters through the perturbation is discarded by construction
    let gx = gradient(&mut g, nll_clean, &[x])?.grad(x);
    let sg = g.sign(gx);
    let r = g.scale(sg, cfg.at_epsilon);
    let x_adv = {
        let sum = g.add(x, r)?;
        g.clamp(sum, 0.0, 1.0)
    };
    let logp_adv = net.log_probs(&mut g, x_adv)?;
    let nll_adv = nll_loss(&mut g, logp_adv, y)?;
    let weighted = g.scale(nll_adv, cfg.at_lambda);
    let total = g.add(nll_clean, weighted)?;

    let vars = net.param_nodes();
    let names: Vec<String> = net.vars().iter().map(|(n, _)| n.clone()).collect();
    let gm = gradient(&mut g, total, &vars)?;
    let grads: Vec<NodeId> = vars.iter().map(|&v| gm.grad(v)).collect();

    let shapes: Vec<Vec<usize>> = vars.iter().map(|&v| g.shape(v).to_vec()).collect();
    let mut adam = Adam::new(&shapes, &cfg.adam);
    let mut tracker = ConfidenceTracker::new(k, cfg.tracker_alpha);

    let mut log = Vec::new();
    let total_epochs = cfg.pretrain_epochs + cfg.epochs;
    for epoch in 0..total_epochs {
        let lr = cfg.adam.lr_classifier * 0.5f64.powi((epoch / cfg.adam.halve_every.max(1)) as i32);
        let batches = epoch_batches(train_ds.len(), b, cfg.seed, epoch as u64);
        let mut nll_sum = 0.0;
        let mut nb = 0usize;
        for idx in &batches {
            let (xb, yb) = gather_batch(train_ds, idx);
            let mut bind = Bindings::new();
            bind.set(x, xb);
            bind.set(y, labels_tensor(&yb));
            let mut req = vec![nll_clean, p_true];
            req.extend(&grads);
            let outs = g
                .eval(&req, &bind, Mode::Train)
                .map_err(|e| diverged(e, &format!("adversarial-training epoch {epoch}")))?;
            let gvals: Vec<&Tensor> = outs[2..].iter().map(|t| &**t).collect();
            apply_adam(&mut g, &vars, &gvals, &mut adam, lr)?;
            tracker.update(&yb, outs[1].data());
            nll_sum += outs[0].scalar_value();
            nb += 1;
        }
        let classifier = export_params(&g, &vars, &names, cfg.spec.arch.tag(), k, clf_seed);
        let test_error = checkpoint_test_error(&classifier, test_ds)?;
        let rec = EpochRecord {
            epoch,
            pretrain: epoch < cfg.pretrain_epochs,
            nll: nll_sum / nb.max(1) as f64,
            critic_loss: 0.0,
            fool_loss: 0.0,
            cycle_loss: 0.0,
            test_error,
            mean_confidence: tracker.values().to_vec(),
            cycle_probe: None,
        };
        if let Some(cb) = progress.as_deref_mut() {
            cb(&rec);
        }
        log.push(rec);
    }
    let classifier = export_params(&g, &vars, &names, cfg.spec.arch.tag(), k, clf_seed);
    Ok(TrainOutput {
        classifier,
        critic: None,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tracker_update_rules() {
        let mut t = ConfidenceTracker::new(4, 1.0);
        // alpha = 1: c equals the batch mean
        t.update(&[0, 0, 1], &[0.8, 0.6, 0.9]);
        assert!((t.values()[0] - 0.7).abs() < 1e-15);
        assert!((t.values()[1] - 0.9).abs() < 1e-15);
        assert_eq!(t.values()[2], 0.5, "absent class untouched");
        assert_eq!(t.values()[3], 0.5);

        // alpha = 0.1, c = 0.5, batch mean 0.9 -> 0.54
        let mut t = ConfidenceTracker::new(2, 0.1);
        t.update(&[1], &[0.9]);
        assert!((t.values()[1] - 0.54).abs() < 1e-15);
    }

    #[test]
    fn tracker_stays_in_unit_interval() {
        let mut t = ConfidenceTracker::new(2, 0.5);
        for _ in 0..100 {
            t.update(&[0, 1], &[0.9999, 0.0001]);
        }
        for &c in t.values() {
            assert!(c > 0.0 && c < 1.0);
        }
    }

    #[test]
    fn select_target_two_classes() {
        // k = 2: the only candidate is the other class
        let logp = Tensor::new(vec![1, 2], vec![-0.1, -2.0]).unwrap();
        let jac = vec![
            Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap(),
            Tensor::new(vec![1, 3], vec![0.3, 0.1, 0.0]).unwrap(),
        ];
        assert_eq!(select_targets(&logp, &jac, &[0]), vec![1]);
        assert_eq!(select_targets(&logp, &jac, &[1]), vec![0]);
    }

    #[test]
    fn select_target_matches_bruteforce_affine() {
        // three affine heads: z_j = w_j . x + b_j; log-prob margins equal
        // logit margins, so the expected class follows from the weights
        let ws = [[1.0, 0.0], [-0.6, 0.8], [0.0, -1.0]];
        let bs = [1.5, 0.0, -0.2];
        let xv = [0.4, 0.1];
        let z: Vec<f64> = ws
            .iter()
            .zip(&bs)
            .map(|(w, b)| w[0] * xv[0] + w[1] * xv[1] + b)
            .collect();
        // log-softmax probe values
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        let logp = Tensor::new(vec![1, 3], z.iter().map(|&v| v - lse).collect()).unwrap();
        // gradients of log p differ from logit gradients by a common term,
        // which cancels in pairwise differences; use logit gradients here
        let jac: Vec<Tensor> = ws
            .iter()
            .map(|w| Tensor::new(vec![1, 2], w.to_vec()).unwrap())
            .collect();
        let y = 0;
        let mut expect = (f64::INFINITY, 0);
        for j in 1..3 {
            let wd = [ws[j][0] - ws[y][0], ws[j][1] - ws[y][1]];
            let margin = (z[j] - z[y]).abs() / (wd[0] * wd[0] + wd[1] * wd[1]).sqrt();
            if margin < expect.0 {
                expect = (margin, j);
            }
        }
        assert_eq!(select_targets(&logp, &jac, &[y]), vec![expect.1]);
    }

    #[test]
    fn select_target_tie_breaks_to_lower_index() {
        // two candidates with identical logits and gradients
        let logp = Tensor::new(vec![1, 3], vec![-0.1, -1.5, -1.5]).unwrap();
        let jac = vec![
            Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(),
            Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap(),
            Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap(),
        ];
        assert_eq!(select_targets(&logp, &jac, &[0]), vec![1]);
    }

    #[test]
    fn select_target_degenerate_falls_back_to_runner_up() {
        // all gradients identical: every margin degenerate
        let logp = Tensor::new(vec![1, 3], vec![-0.2, -3.0, -1.0]).unwrap();
        let same = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let jac = vec![same.clone(), same.clone(), same];
        assert_eq!(select_targets(&logp, &jac, &[0]), vec![2]);
    }

    #[test]
    fn select_target_never_returns_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let logp_raw = Tensor::uniform(&[1, 5], -3.0, 0.0, &mut rng);
            let jac: Vec<Tensor> = (0..5)
                .map(|_| Tensor::uniform(&[1, 4], -1.0, 1.0, &mut rng))
                .collect();
            for y in 0..5 {
                assert_ne!(select_targets(&logp_raw, &jac, &[y])[0], y);
            }
        }
    }

    #[test]
    fn margin_rule_scale_invariant() {
        // positive rescaling of all logits' gradients leaves the argmin
        let logp = Tensor::new(vec![1, 3], vec![-0.2, -1.0, -2.5]).unwrap();
        let jac: Vec<Tensor> = vec![
            Tensor::new(vec![1, 2], vec![1.0, 0.2]).unwrap(),
            Tensor::new(vec![1, 2], vec![-0.3, 0.8]).unwrap(),
            Tensor::new(vec![1, 2], vec![0.1, -0.9]).unwrap(),
        ];
        let t1 = select_targets(&logp, &jac, &[0]);
        let scaled_logp =
            Tensor::new(vec![1, 3], logp.data().iter().map(|v| v * 3.0).collect()).unwrap();
        let scaled_jac: Vec<Tensor> = jac.iter().map(|t| t.scale(3.0)).collect();
        let t2 = select_targets(&scaled_logp, &scaled_jac, &[0]);
        assert_eq!(t1, t2);
    }

    #[test]
    fn adam_decreases_simple_quadratic() {
        let mut adam = Adam::new(&[vec![2]], &AdamConfig::default());
        let mut w = vec![Tensor::new(vec![2], vec![3.0, -2.0]).unwrap()];
        for _ in 0..2000 {
            let g = w[0].clone(); // grad of 0.5||w||^2
            adam.step(0.01, &mut w, &[&g]);
        }
        assert!(w[0].l2_norm() < 0.05, "{}", w[0].l2_norm());
    }
}
