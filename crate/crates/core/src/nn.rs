//! Network architectures, initialization, supervised losses, and the
//! checkpoint format.
//!
//! Two classifier families are supported: a fully-connected net with three
//! hidden layers of 1200 rectified units, and a Lenet-5 style convnet. The
//! adversary critic is a k-headed discriminator with two leaky-rectified
//! hidden layers of 1200 units and Gaussian noise at the input of each
//! layer (training mode only).

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: u32 = 0x41435243; // "ACRC" little-endian
pub const CHECKPOINT_VERSION: u32 = 1;

/// Classifier architecture tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierArch {
    Mlp1200x3,
    Lenet5,
}

impl ClassifierArch {
    pub fn tag(&self) -> &'static str {
        match self {
            ClassifierArch::Mlp1200x3 => "mlp-1200x3",
            ClassifierArch::Lenet5 => "lenet5",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "mlp-1200x3" => Ok(ClassifierArch::Mlp1200x3),
            "lenet5" => Ok(ClassifierArch::Lenet5),
            other => Err(Error::UnsupportedArch(other.to_string())),
        }
    }
}

/// Classifier description: architecture plus class count. Inputs are
/// 28x28 grayscale images, flattened to 784 for the fully-connected net.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierSpec {
    pub arch: ClassifierArch,
    pub k: usize,
}

impl ClassifierSpec {
    pub fn mlp(k: usize) -> Self {
        ClassifierSpec {
            arch: ClassifierArch::Mlp1200x3,
            k,
        }
    }

    pub fn lenet5(k: usize) -> Self {
        ClassifierSpec {
            arch: ClassifierArch::Lenet5,
            k,
        }
    }

    pub fn input_dim(&self) -> usize {
        784
    }

    fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("class count {} < 2", self.k)));
        }
        Ok(())
    }
}

/// Adversary-critic description: two leaky-rectified hidden layers with
/// per-layer input noise, k scalar heads. The label only selects a head.
#[derive(Debug, Clone)]
pub struct CriticSpec {
    pub input_dim: usize,
    pub hidden: usize,
    pub leaky_slope: f64,
    pub input_noise_std: f64,
    pub hidden_noise_std: f64,
    pub k: usize,
}

impl CriticSpec {
    pub fn standard(input_dim: usize, k: usize) -> Self {
        CriticSpec {
            input_dim,
            hidden: 1200,
            leaky_slope: 0.2,
            input_noise_std: 0.3,
            hidden_noise_std: 0.5,
            k,
        }
    }
}

pub const CRITIC_ARCH_TAG: &str = "critic-1200x2";

/// Ordered named parameters with architecture metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub arch: String,
    pub k: usize,
    pub seed: u64,
    params: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new(arch: &str, k: usize, seed: u64, params: Vec<(String, Tensor)>) -> Self {
        debug_assert!(
            {
                let mut names: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
                names.sort_unstable();
                names.windows(2).all(|w| w[0] != w[1])
            },
            "parameter names must be unique"
        );
        ParamSet {
            arch: arch.to_string(),
            k,
            seed,
            params,
        }
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Serialize: little-endian header (magic, version, arch tag, k, seed),
    /// then per parameter: name, shape, raw f64 values.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_u32::<LittleEndian>(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        write_str(&mut w, &self.arch)?;
        w.write_u32::<LittleEndian>(self.k as u32)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (name, t) in &self.params {
            write_str(&mut w, name)?;
            w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
            for &d in t.shape() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in t.data() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let magic = r
            .read_u32::<LittleEndian>()
            .map_err(|_| Error::Corrupt("missing header".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt(format!("bad magic 0x{magic:08x}")));
        }
        let version = r.read_u32::<LittleEndian>().map_err(trunc)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Corrupt(format!("unsupported version {version}")));
        }
        let arch = read_str(&mut r)?;
        let k = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        let seed = r.read_u64::<LittleEndian>().map_err(trunc)?;
        let count = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
        if count > 1_000_000 {
            return Err(Error::Corrupt(format!(
                "implausible parameter count {count}"
            )));
        }
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = read_str(&mut r)?;
            let ndim = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
            if ndim > 8 {
                return Err(Error::Corrupt(format!("implausible rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u32::<LittleEndian>().map_err(trunc)? as usize);
            }
            let n: usize = shape.iter().product();
            if n > 100_000_000 {
                return Err(Error::Corrupt(format!("implausible tensor size {n}")));
            }
            let mut data = vec![0.0; n];
            r.read_f64_into::<LittleEndian>(&mut data).map_err(trunc)?;
            params.push((name, Tensor::new(shape, data)?));
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(Error::Corrupt("trailing bytes after parameters".into()));
        }
        Ok(ParamSet {
            arch,
            k,
            seed,
            params,
        })
    }

    /// Load and verify the architecture tag.
    pub fn load_expecting(path: &Path, arch: &str) -> Result<Self> {
        let ps = Self::load(path)?;
        if ps.arch != arch {
            return Err(Error::ArchMismatch {
                found: ps.arch,
                expected: arch.to_string(),
            });
        }
        Ok(ps)
    }
}

fn trunc(_: std::io::Error) -> Error {
    Error::Corrupt("truncated file".into())
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LittleEndian>().map_err(trunc)? as usize;
    if len > 4096 {
        return Err(Error::Corrupt(format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(trunc)?;
    String::from_utf8(buf).map_err(|_| Error::Corrupt("non-utf8 string".into()))
}

/// He fan-in initialization for a rectified layer.
fn he_init(rng: &mut ChaCha8Rng, fan_in: usize, shape: &[usize]) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::randn(shape, rng).scale(std)
}

/// Fresh classifier parameters, deterministic per seed.
pub fn init_classifier_params(spec: &ClassifierSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    match spec.arch {
        ClassifierArch::Mlp1200x3 => {
            let dims = [spec.input_dim(), 1200, 1200, 1200, spec.k];
            for i in 0..4 {
                params.push((
                    format!("w{}", i + 1),
                    he_init(&mut rng, dims[i], &[dims[i], dims[i + 1]]),
                ));
                params.push((format!("b{}", i + 1), Tensor::zeros(&[dims[i + 1]])));
            }
        }
        ClassifierArch::Lenet5 => {
            params.push(("conv1_w".into(), he_init(&mut rng, 25, &[6, 1, 5, 5])));
            params.push(("conv1_b".into(), Tensor::zeros(&[6, 1, 1])));
            params.push(("conv2_w".into(), he_init(&mut rng, 150, &[16, 6, 5, 5])));
            params.push(("conv2_b".into(), Tensor::zeros(&[16, 1, 1])));
            params.push(("fc1_w".into(), he_init(&mut rng, 256, &[256, 120])));
            params.push(("fc1_b".into(), Tensor::zeros(&[120])));
            params.push(("fc2_w".into(), he_init(&mut rng, 120, &[120, 84])));
            params.push(("fc2_b".into(), Tensor::zeros(&[84])));
            params.push(("fc3_w".into(), he_init(&mut rng, 84, &[84, spec.k])));
            params.push(("fc3_b".into(), Tensor::zeros(&[spec.k])));
        }
    }
    Ok(ParamSet::new(spec.arch.tag(), spec.k, seed, params))
}

/// Fresh critic parameters, deterministic per seed.
pub fn init_critic_params(spec: &CriticSpec, seed: u64) -> Result<ParamSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [spec.input_dim, spec.hidden, spec.hidden, spec.k];
    let mut params = Vec::new();
    for i in 0..3 {
        params.push((
            format!("w{}", i + 1),
            he_init(&mut rng, dims[i], &[dims[i], dims[i + 1]]),
        ));
        params.push((format!("b{}", i + 1), Tensor::zeros(&[dims[i + 1]])));
    }
    Ok(ParamSet::new(CRITIC_ARCH_TAG, spec.k, seed, params))
}

/// A model whose logits can be appended to a graph for any input node.
pub trait DiffModel {
    fn class_count(&self) -> usize;

    /// Map a [B, 784] input node to [B, k] logits.
    fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId>;

    /// [B, k] log-probabilities.
    fn log_probs(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let z = self.logits(g, x)?;
        g.log_softmax(z)
    }

    fn param_nodes(&self) -> Vec<NodeId>;
}

/// Classifier instantiated as graph variables.
pub struct ClassifierNet {
    pub arch: ClassifierArch,
    pub k: usize,
    vars: Vec<(String, NodeId)>,
}

impl ClassifierNet {
    /// Register the parameter set's tensors as graph variables.
    pub fn instantiate(g: &mut Graph, ps: &ParamSet) -> Result<Self> {
        let arch = ClassifierArch::from_tag(&ps.arch)?;
        let vars = ps
            .params()
            .iter()
            .map(|(name, t)| (name.clone(), g.variable(name, t.clone())))
            .collect();
        Ok(ClassifierNet { arch, k: ps.k, vars })
    }

    pub fn var(&self, name: &str) -> NodeId {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .expect("parameter exists")
    }

    pub fn vars(&self) -> &[(String, NodeId)] {
        &self.vars
    }

    /// Read current variable values back out of the graph.
    pub fn export_params(&self, g: &Graph, seed: u64) -> ParamSet {
        let params = self
            .vars
            .iter()
            .map(|(n, id)| (n.clone(), (*g.variable_value(*id)).clone()))
            .collect();
        ParamSet::new(self.arch.tag(), self.k, seed, params)
    }

    fn mlp_logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for i in 1..=4 {
            let z = g.matmul(h, self.var(&format!("w{i}")))?;
            let z = g.add(z, self.var(&format!("b{i}")))?;
            h = if i < 4 { g.relu(z) } else { z };
        }
        Ok(h)
    }

    fn lenet_logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let b = g.shape(x)[0];
        let img = g.reshape(x, &[b, 1, 28, 28])?;
        let c1 = g.conv2d(img, self.var("conv1_w"))?;
        let c1 = g.add(c1, self.var("conv1_b"))?;
        let c1 = g.relu(c1);
        let p1 = g.max_pool2(c1)?;
        let c2 = g.conv2d(p1, self.var("conv2_w"))?;
        let c2 = g.add(c2, self.var("conv2_b"))?;
        let c2 = g.relu(c2);
        let p2 = g.max_pool2(c2)?;
        let flat = g.reshape(p2, &[b, 256])?;
        let h1 = g.matmul(flat, self.var("fc1_w"))?;
        let h1 = g.add(h1, self.var("fc1_b"))?;
        let h1 = g.relu(h1);
        let h2 = g.matmul(h1, self.var("fc2_w"))?;
        let h2 = g.add(h2, self.var("fc2_b"))?;
        let h2 = g.relu(h2);
        let z = g.matmul(h2, self.var("fc3_w"))?;
        g.add(z, self.var("fc3_b"))
    }
}

impl DiffModel for ClassifierNet {
    fn class_count(&self) -> usize {
        self.k
    }

    fn logits(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        match self.arch {
            ClassifierArch::Mlp1200x3 => self.mlp_logits(g, x),
            ClassifierArch::Lenet5 => self.lenet_logits(g, x),
        }
    }

    fn param_nodes(&self) -> Vec<NodeId> {
        self.vars.iter().map(|(_, id)| *id).collect()
    }
}

/// Build a classifier with fresh parameters; returns the graph-side net
/// and the parameter set it was initialized from.
pub fn build_classifier(
    g: &mut Graph,
    spec: &ClassifierSpec,
    seed: u64,
) -> Result<(ClassifierNet, ParamSet)> {
    let ps = init_classifier_params(spec, seed)?;
    let net = ClassifierNet::instantiate(g, &ps)?;
    Ok((net, ps))
}

/// Adversary critic instantiated as graph variables.
pub struct CriticNet {
    pub spec: CriticSpec,
    vars: Vec<(String, NodeId)>,
}

impl CriticNet {
    pub fn instantiate(g: &mut Graph, spec: &CriticSpec, ps: &ParamSet) -> Result<Self> {
        if ps.arch != CRITIC_ARCH_TAG {
            return Err(Error::ArchMismatch {
                found: ps.arch.clone(),
                expected: CRITIC_ARCH_TAG.to_string(),
            });
        }
        let vars = ps
            .params()
            .iter()
            .map(|(name, t)| {
                (
                    name.clone(),
                    g.variable(&format!("critic_{name}"), t.clone()),
                )
            })
            .collect();
        Ok(CriticNet {
            spec: spec.clone(),
            vars,
        })
    }

    pub fn var(&self, name: &str) -> NodeId {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .expect("parameter exists")
    }

    pub fn param_nodes(&self) -> Vec<NodeId> {
        self.vars.iter().map(|(_, id)| *id).collect()
    }

    pub fn export_params(&self, g: &Graph, seed: u64) -> ParamSet {
        let params = self
            .vars
            .iter()
            .map(|(n, id)| (n.clone(), (*g.variable_value(*id)).clone()))
            .collect();
        ParamSet::new(CRITIC_ARCH_TAG, self.spec.k, seed, params)
    }

    /// Pre-sigmoid scores, [B, k]. Gaussian noise feeds the input of each
    /// affine layer in training mode.
    pub fn pre_sigmoid(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let mut h = g.gaussian_noise(x, self.spec.input_noise_std);
        for i in 1..=2 {
            let z = g.matmul(h, self.var(&format!("w{i}")))?;
            let z = g.add(z, self.var(&format!("b{i}")))?;
            let a = g.leaky_relu(z, self.spec.leaky_slope);
            h = g.gaussian_noise(a, self.spec.hidden_noise_std);
        }
        let z = g.matmul(h, self.var("w3"))?;
        g.add(z, self.var("b3"))
    }

    /// Scores in (0,1), [B, k].
    pub fn scores(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let z = self.pre_sigmoid(g, x)?;
        Ok(g.sigmoid(z))
    }
}

/// Build a critic with fresh parameters.
pub fn build_critic(g: &mut Graph, spec: &CriticSpec, seed: u64) -> Result<(CriticNet, ParamSet)> {
    let ps = init_critic_params(spec, seed)?;
    let net = CriticNet::instantiate(g, spec, &ps)?;
    Ok((net, ps))
}

/// Mean negative log-likelihood from [B,k] log-probabilities and [B] labels.
pub fn nll_loss(g: &mut Graph, log_probs: NodeId, labels: NodeId) -> Result<NodeId> {
    let lp = g.take_per_row(log_probs, labels)?;
    let m = g.mean_all(lp);
    Ok(g.neg(m))
}
