//! The convolutional classifier: three conv stages (ReLU, with 2x2 max
//! pooling after the first two) followed by two fully connected stages.
//! The third conv stage's rectified output is retained by every forward
//! pass as the saliency target layer.
//!
//! Convolutions are evaluated as im2col + GEMM on the autodiff graph, so
//! the whole network is differentiable end to end, including second-order
//! differentiation through gradients of the class score with respect to
//! the retained activations.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("input batch has shape {got:?}, expected [B, 1, {side}, {side}] with B >= 1")]
    ShapeMismatch { got: Vec<usize>, side: usize },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Architecture hyperparameters. Defaults reproduce the benchmark network;
/// the reduced settings used by gradient oracles shrink every dimension.
#[derive(Clone, PartialEq, Eq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub conv_channels: (usize, usize, usize),
    pub kernel_size: usize,
    pub fc_hidden: usize,
    pub num_classes: usize,
    /// Input side length; 28 for the benchmark datasets.
    pub input_side: usize,
    /// 2x2 max pooling after conv stage 1 and 2 respectively.
    pub pool_stages: (bool, bool),
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            conv_channels: (32, 64, 128),
            kernel_size: 3,
            fc_hidden: 128,
            num_classes: 10,
            input_side: crate::decoy::IMAGE_SIDE,
            pool_stages: (true, true),
        }
    }
}

impl NetworkConfig {
    /// One channel per layer on small inputs; used by the finite-difference
    /// gradient oracles where full width would swamp the check.
    pub fn downsized() -> Self {
        Self {
            conv_channels: (1, 1, 1),
            kernel_size: 3,
            fc_hidden: 4,
            num_classes: 10,
            input_side: 8,
            pool_stages: (true, true),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let (c1, c2, c3) = self.conv_channels;
        if c1 == 0 || c2 == 0 || c3 == 0 || self.fc_hidden == 0 || self.num_classes == 0 {
            return Err(ModelError::InvalidConfig("zero-sized layer".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(ModelError::InvalidConfig("kernel_size must be odd".into()));
        }
        if self.input_side % self.pool_divisor() != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "input_side {} not divisible by pooling factor {}",
                self.input_side,
                self.pool_divisor()
            )));
        }
        Ok(())
    }

    fn pool_divisor(&self) -> usize {
        let mut d = 1;
        if self.pool_stages.0 {
            d *= 2;
        }
        if self.pool_stages.1 {
            d *= 2;
        }
        d
    }

    /// Spatial side of the retained conv-3 activations (7 under defaults).
    pub fn activation_side(&self) -> usize {
        self.input_side / self.pool_divisor()
    }

    fn flat_features(&self) -> usize {
        self.conv_channels.2 * self.activation_side() * self.activation_side()
    }

    fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let k2 = self.kernel_size * self.kernel_size;
        let (c1, c2, c3) = self.conv_channels;
        vec![
            ("conv1.weight", vec![c1, k2]),
            ("conv1.bias", vec![c1]),
            ("conv2.weight", vec![c2, c1 * k2]),
            ("conv2.bias", vec![c2]),
            ("conv3.weight", vec![c3, c2 * k2]),
            ("conv3.bias", vec![c3]),
            ("fc1.weight", vec![self.fc_hidden, self.flat_features()]),
            ("fc1.bias", vec![self.fc_hidden]),
            ("fc2.weight", vec![self.num_classes, self.fc_hidden]),
            ("fc2.bias", vec![self.num_classes]),
        ]
    }

    fn to_lines(&self) -> String {
        let (c1, c2, c3) = self.conv_channels;
        format!(
            "conv_channels={c1},{c2},{c3}\nkernel_size={}\nfc_hidden={}\nnum_classes={}\ninput_side={}\npool_stages={},{}\n",
            self.kernel_size, self.fc_hidden, self.num_classes, self.input_side,
            self.pool_stages.0, self.pool_stages.1
        )
    }

    fn from_lines(text: &str) -> Result<Self, String> {
        let mut cfg = Self::default();
        for line in text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| format!("bad line {line:?}"))?;
            match k {
                "conv_channels" => {
                    let parts: Vec<usize> = v
                        .split(',')
                        .map(|p| p.parse().map_err(|e| format!("{e}")))
                        .collect::<Result<_, _>>()?;
                    if parts.len() != 3 {
                        return Err("conv_channels wants three values".into());
                    }
                    cfg.conv_channels = (parts[0], parts[1], parts[2]);
                }
                "kernel_size" => cfg.kernel_size = v.parse().map_err(|e| format!("{e}"))?,
                "fc_hidden" => cfg.fc_hidden = v.parse().map_err(|e| format!("{e}"))?,
                "num_classes" => cfg.num_classes = v.parse().map_err(|e| format!("{e}"))?,
                "input_side" => cfg.input_side = v.parse().map_err(|e| format!("{e}"))?,
                "pool_stages" => {
                    let (a, b) = v.split_once(',').ok_or("pool_stages wants two values")?;
                    cfg.pool_stages =
                        (a.parse().map_err(|e| format!("{e}"))?, b.parse().map_err(|e| format!("{e}"))?);
                }
                other => return Err(format!("unknown config key {other}")),
            }
        }
        Ok(cfg)
    }
}

/// Named weight arrays, in a fixed order, plus the architecture they belong to.
#[derive(Clone, Debug)]
pub struct ModelParameters<T: Scalar> {
    pub config: NetworkConfig,
    entries: Vec<(String, ArrayD<T>)>,
}

impl<T: Scalar> ModelParameters<T> {
    /// Fan-in-scaled uniform initialization: every weight and bias of a
    /// layer with `fan_in` inputs is drawn from U(-1/sqrt(fan_in),
    /// 1/sqrt(fan_in)), in declaration order from a ChaCha8 stream seeded
    /// by `seed`. Identical seeds give identical parameters.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries: Vec<(String, ArrayD<T>)> = Vec::new();
        for (name, shape) in config.param_shapes() {
            let fan_in = if shape.len() == 2 {
                shape[1]
            } else {
                // a bias row shares its layer's fan-in, recorded just before it
                let prev: &ArrayD<T> = &entries.last().expect("weight precedes bias").1;
                prev.shape()[1]
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let arr = ArrayD::from_shape_fn(IxDyn(&shape), |_| {
                T::from_f64_lossy(rng.gen_range(-bound..bound))
            });
            entries.push((name.to_string(), arr));
        }
        Ok(Self { config: config.clone(), entries })
    }

    pub fn zeros_like(other: &Self) -> Self {
        let entries = other
            .entries
            .iter()
            .map(|(n, a)| (n.clone(), ArrayD::zeros(a.raw_dim())))
            .collect();
        Self { config: other.config.clone(), entries }
    }

    pub fn entries(&self) -> &[(String, ArrayD<T>)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, ArrayD<T>)] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    /// Replaces one named array, keeping its shape.
    pub fn set(&mut self, name: &str, value: ArrayD<T>) {
        let slot = self.get_mut(name).expect("known parameter name");
        assert_eq!(slot.shape(), value.shape(), "parameter shape is fixed");
        *slot = value;
    }

    /// No NaN or infinity anywhere; must hold after every training step.
    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, a)| a.iter().all(|x| x.is_finite()))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        write_container(path, &self.config, &self.entries)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let (config, entries) = read_container(path)?;
        let expected: Vec<String> =
            config.param_shapes().iter().map(|(n, _)| n.to_string()).collect();
        let got: Vec<String> = entries.iter().map(|(n, _)| n.clone()).collect();
        if got != expected {
            return Err(ModelError::Checkpoint {
                path: path.display().to_string(),
                message: format!("parameter names {got:?} do not match config"),
            });
        }
        Ok(Self { config, entries })
    }
}

/// Graph handles for the inserted parameters, in entry order.
#[derive(Clone, Debug)]
pub struct ParamVars(pub Vec<Var>);

impl ParamVars {
    fn at(&self, i: usize) -> Var {
        self.0[i]
    }
}

/// Inserts every parameter array into the graph as a differentiable leaf.
pub fn insert_params<T: Scalar>(g: &mut Graph<T>, params: &ModelParameters<T>) -> ParamVars {
    ParamVars(params.entries.iter().map(|(_, a)| g.parameter(a.clone())).collect())
}

/// Graph handles produced by one forward pass.
pub struct ForwardVars {
    pub logits: Var,
    pub probabilities: Var,
    /// Rectified conv-3 output, `[B, C3, s, s]`: the saliency target layer.
    pub activations: Var,
}

/// Builds the forward computation on the graph. `x` must be `[B,1,S,S]`.
pub fn attach_forward<T: Scalar>(
    g: &mut Graph<T>,
    config: &NetworkConfig,
    params: &ParamVars,
    x: Var,
) -> ForwardVars {
    let k = config.kernel_size;
    let pad = k / 2;
    let (c1, c2, c3) = config.conv_channels;
    let batch = g.value(x).shape()[0];

    let mut h = x;
    let mut side = config.input_side;
    let stages = [(0usize, c1, config.pool_stages.0), (2, c2, config.pool_stages.1), (4, c3, false)];
    let mut activations = x;
    for (pi, out_ch, pool) in stages {
        let cols = g.im2col(h, k, pad);
        let mm = g.matmul(cols, params.at(pi), false, true);
        let mm = g.add_bias2(mm, params.at(pi + 1));
        let nhwc = g.reshape(mm, &[batch, side, side, out_ch]);
        let nchw = g.permute(nhwc, &[0, 3, 1, 2]);
        let r = g.relu(nchw);
        activations = r;
        h = if pool {
            side /= 2;
            g.maxpool2(r)
        } else {
            r
        };
    }

    let flat = g.reshape(h, &[batch, config.flat_features()]);
    let z1 = g.matmul(flat, params.at(6), false, true);
    let z1 = g.add_bias2(z1, params.at(7));
    let h1 = g.relu(z1);
    let z2 = g.matmul(h1, params.at(8), false, true);
    let logits = g.add_bias2(z2, params.at(9));

    // Softmax with a detached row-max shift: exact value and gradient, no overflow.
    let shift = {
        let (mx, _) = row_max_detached(g.value(logits));
        g.constant(mx)
    };
    let zs = g.sub_col(logits, shift);
    let ez = g.exp(zs);
    let denom = g.sum_axis1(ez);
    let probabilities = g.div_col(ez, denom);

    ForwardVars { logits, probabilities, activations }
}

fn row_max_detached<T: Scalar>(a: &ArrayD<T>) -> (ArrayD<T>, ()) {
    let v = a.view().into_dimensionality::<ndarray::Ix2>().expect("logits rank 2");
    let m = v.nrows();
    let mut out = Array2::zeros((m, 1));
    for i in 0..m {
        out[(i, 0)] = v.row(i).iter().copied().fold(T::neg_infinity(), T::max);
    }
    (out.into_dyn(), ())
}

/// One forward evaluation: logits, softmax probabilities, and the retained
/// conv-3 activations.
pub struct PredictionBatch<T: Scalar> {
    pub logits: Array2<T>,
    pub probabilities: Array2<T>,
    pub last_conv_activations: Array4<T>,
}

/// Runs the network on a batch of `[B,1,S,S]` images scaled to `[0,1]`.
pub fn forward<T: Scalar>(
    params: &ModelParameters<T>,
    batch: &Array4<T>,
) -> Result<PredictionBatch<T>, ModelError> {
    let config = &params.config;
    let dims = batch.dim();
    let (b, c, h, w) = dims;
    if b < 1 || c != 1 || h != config.input_side || w != config.input_side {
        return Err(ModelError::ShapeMismatch {
            got: vec![dims.0, dims.1, dims.2, dims.3],
            side: config.input_side,
        });
    }
    let mut g: Graph<T> = Graph::new();
    let x = g.constant(batch.clone().into_dyn());
    let pv = insert_params(&mut g, params);
    let f = attach_forward(&mut g, config, &pv, x);
    Ok(PredictionBatch {
        logits: g.value(f.logits).clone().into_dimensionality().unwrap(),
        probabilities: g.value(f.probabilities).clone().into_dimensionality().unwrap(),
        last_conv_activations: g.value(f.activations).clone().into_dimensionality().unwrap(),
    })
}

const CONTAINER_MAGIC: &[u8; 8] = b"XILCKPT1";

/// Writes a named-array container: the checkpoint format. Layout (all
/// integers little-endian): the magic `XILCKPT1`, one dtype byte (scalar
/// width in bytes), a length-prefixed network-config block, the entry
/// count, then per entry a length-prefixed name, a u8 rank, u32 dims, and
/// the raw scalars.
pub fn write_container<T: Scalar>(
    path: &Path,
    config: &NetworkConfig,
    entries: &[(String, ArrayD<T>)],
) -> Result<(), ModelError> {
    let io = |e: std::io::Error| ModelError::Io { path: path.display().to_string(), source: e };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    w.write_all(CONTAINER_MAGIC).map_err(io)?;
    w.write_u8(std::mem::size_of::<T>() as u8).map_err(io)?;
    let cfg = config.to_lines();
    w.write_u32::<LittleEndian>(cfg.len() as u32).map_err(io)?;
    w.write_all(cfg.as_bytes()).map_err(io)?;
    w.write_u32::<LittleEndian>(entries.len() as u32).map_err(io)?;
    for (name, arr) in entries {
        w.write_u32::<LittleEndian>(name.len() as u32).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_u8(arr.ndim() as u8).map_err(io)?;
        for &d in arr.shape() {
            w.write_u32::<LittleEndian>(d as u32).map_err(io)?;
        }
        for x in arr.iter() {
            write_scalar(&mut w, *x).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads a container written by [`write_container`]. The stored dtype must
/// match `T` exactly; checkpoints do not convert precision.
pub fn read_container<T: Scalar>(
    path: &Path,
) -> Result<(NetworkConfig, Vec<(String, ArrayD<T>)>), ModelError> {
    let io = |e: std::io::Error| ModelError::Io { path: path.display().to_string(), source: e };
    let bad = |message: String| ModelError::Checkpoint {
        path: path.display().to_string(),
        message,
    };
    let mut r = BufReader::new(std::fs::File::open(path).map_err(io)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CONTAINER_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let dtype = r.read_u8().map_err(io)?;
    if dtype as usize != std::mem::size_of::<T>() {
        return Err(bad(format!(
            "dtype width {dtype} does not match requested scalar width {}",
            std::mem::size_of::<T>()
        )));
    }
    let cfg_len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut cfg_buf = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_buf).map_err(io)?;
    let cfg_text = String::from_utf8(cfg_buf).map_err(|e| bad(format!("config not utf8: {e}")))?;
    let config = NetworkConfig::from_lines(&cfg_text).map_err(bad)?;
    let count = r.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf).map_err(io)?;
        let name = String::from_utf8(name_buf).map_err(|e| bad(format!("name not utf8: {e}")))?;
        let ndim = r.read_u8().map_err(io)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.read_u32::<LittleEndian>().map_err(io)? as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(read_scalar(&mut r).map_err(io)?);
        }
        entries.push((name, ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap()));
    }
    Ok((config, entries))
}

fn write_scalar<T: Scalar, W: Write>(w: &mut W, x: T) -> std::io::Result<()> {
    if std::mem::size_of::<T>() == 4 {
        w.write_f32::<LittleEndian>(x.to_f64_lossy() as f32)
    } else {
        w.write_f64::<LittleEndian>(x.to_f64_lossy())
    }
}

fn read_scalar<T: Scalar, R: Read>(r: &mut R) -> std::io::Result<T> {
    if std::mem::size_of::<T>() == 4 {
        Ok(T::from_f64_lossy(f64::from(r.read_f32::<LittleEndian>()?)))
    } else {
        Ok(T::from_f64_lossy(r.read_f64::<LittleEndian>()?))
    }
}
