//! The embedding network: three convolutional blocks and a one-hidden-layer
//! head mapping a `2 × 240` stream matrix to a 1024-dimensional embedding.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowio::Dataset;
use crate::nn::{Act, BatchNorm, Conv1d, Layer, Linear, Network, Scalar, Tape};

/// Order of the operations after each convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockOrder {
    #[default]
    ConvReluBn,
    ConvBnRelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub input_len: usize,
    pub block_channels: Vec<usize>,
    pub kernel_size: usize,
    pub convs_per_block: usize,
    /// Max-pool kernel and stride between blocks.
    pub pool_size: usize,
    pub head_hidden: usize,
    pub embedding_dim: usize,
    pub dropout: f64,
    pub block_order: BlockOrder,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 2,
            input_len: 240,
            block_channels: vec![128, 256, 512],
            kernel_size: 7,
            convs_per_block: 2,
            pool_size: 2,
            head_hidden: 1024,
            embedding_dim: 1024,
            dropout: 0.0,
            block_order: BlockOrder::ConvReluBn,
        }
    }
}

impl BackboneConfig {
    /// Narrow variant used for desk-scale experiments and tests.
    pub fn small(block_channels: [usize; 3], head_hidden: usize, embedding_dim: usize) -> Self {
        BackboneConfig {
            block_channels: block_channels.to_vec(),
            head_hidden,
            embedding_dim,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::config("kernel_size", "must be odd"));
        }
        if self.block_channels.is_empty() {
            return Err(Error::config("block_channels", "at least one block required"));
        }
        if self.block_channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("block_channels", "must be strictly increasing"));
        }
        if self.embedding_dim == 0 || self.head_hidden == 0 {
            return Err(Error::config("embedding_dim", "must be at least 1"));
        }
        if self.in_channels == 0 || self.convs_per_block == 0 || self.pool_size == 0 {
            return Err(Error::config("in_channels", "channel, conv and pool counts must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must be in [0, 1)"));
        }
        let n_pools = self.block_channels.len() as u32 - 1;
        if self.input_len / self.pool_size.pow(n_pools) == 0 {
            return Err(Error::config("input_len", "too short for the pooling stages"));
        }
        Ok(())
    }

    /// Trainable parameter count implied by the config.
    pub fn param_count(&self) -> usize {
        let k = self.kernel_size;
        let mut total = 0;
        let mut c_in = self.in_channels;
        for &c in &self.block_channels {
            for _ in 0..self.convs_per_block {
                total += c_in * c * k + c; // conv weight + bias
                total += 2 * c; // batch-norm gamma + beta
                c_in = c;
            }
        }
        total += c_in * self.head_hidden + self.head_hidden;
        total += self.head_hidden * self.embedding_dim + self.embedding_dim;
        total
    }

    pub(crate) fn layers<T: Scalar>(&self, rng: &mut impl Rng) -> Vec<Layer<T>> {
        let mut layers = Vec::new();
        let mut c_in = self.in_channels;
        let n_blocks = self.block_channels.len();
        for (b, &c) in self.block_channels.iter().enumerate() {
            for _ in 0..self.convs_per_block {
                layers.push(Layer::Conv(Conv1d::new(c_in, c, self.kernel_size, rng)));
                match self.block_order {
                    BlockOrder::ConvReluBn => {
                        layers.push(Layer::Relu);
                        layers.push(Layer::BatchNorm(BatchNorm::new(c)));
                    }
                    BlockOrder::ConvBnRelu => {
                        layers.push(Layer::BatchNorm(BatchNorm::new(c)));
                        layers.push(Layer::Relu);
                    }
                }
                c_in = c;
            }
            if b + 1 < n_blocks {
                layers.push(Layer::MaxPool(self.pool_size));
            } else {
                layers.push(Layer::GlobalAvgPool);
            }
        }
        layers.push(Layer::Linear(Linear::new(c_in, self.head_hidden, rng)));
        layers.push(Layer::Relu);
        layers.push(Layer::Dropout(self.dropout));
        layers.push(Layer::Linear(Linear::new(self.head_hidden, self.embedding_dim, rng)));
        layers
    }
}

/// Converts `[B, C, L]` input into the network's `[C, B*L]` layout.
pub fn to_seq<T: Scalar>(x: &Array3<T>) -> Act<T> {
    let (batch, channels, len) = x.dim();
    let data = x
        .view()
        .permuted_axes([1, 0, 2])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((channels, batch * len))
        .expect("contiguous after as_standard_layout");
    Act::Seq { data, batch, len }
}

/// The embedding network `f_θ`.
#[derive(Debug, Clone)]
pub struct EmbeddingModel<T> {
    pub config: BackboneConfig,
    pub net: Network<T>,
}

/// Rows embedded per forward pass in [`EmbeddingModel::embed_dataset`].
const EMBED_CHUNK: usize = 256;

impl<T: Scalar> EmbeddingModel<T> {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::new(config.layers(&mut rng));
        Ok(EmbeddingModel { config, net })
    }

    pub fn n_params(&self) -> usize {
        self.net.n_params()
    }

    fn check_input(&self, x: &Array3<T>) -> Result<()> {
        let (_, c, l) = x.dim();
        if c != self.config.in_channels || l != self.config.input_len {
            return Err(Error::Shape(format!(
                "expected B×{}×{}, got {:?}",
                self.config.in_channels,
                self.config.input_len,
                x.dim()
            )));
        }
        Ok(())
    }

    /// Eval-mode forward pass: running batch-norm statistics, no dropout.
    pub fn forward(&self, x: &Array3<T>) -> Result<Array2<T>> {
        self.check_input(x)?;
        if x.dim().0 == 0 {
            return Ok(Array2::zeros((0, self.config.embedding_dim)));
        }
        Ok(self.net.forward_eval(to_seq(x)).into_flat())
    }

    /// Training-mode forward pass; keep the tape for [`Self::backward`].
    pub fn forward_train(&mut self, x: &Array3<T>, rng: &mut impl Rng) -> Result<(Array2<T>, Tape<T>)> {
        self.check_input(x)?;
        let (out, tape) = self.net.forward_train(to_seq(x), rng);
        Ok((out.into_flat(), tape))
    }

    /// Accumulates parameter gradients of `<d_embeddings, f(x)>`.
    pub fn backward(&mut self, tape: &Tape<T>, d_embeddings: Array2<T>) {
        self.net.backward(tape, Act::Flat(d_embeddings));
    }

    /// Eval-mode embeddings of every sample, in dataset order.
    pub fn embed_dataset(&self, ds: &Dataset) -> Result<Array2<T>> {
        let mut out = Array2::zeros((ds.len(), self.config.embedding_dim));
        let indices = ds.all_indices();
        for (chunk_no, chunk) in indices.chunks(EMBED_CHUNK).enumerate() {
            let emb = self.forward(&ds.batch::<T>(chunk))?;
            let start = chunk_no * EMBED_CHUNK;
            out.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&emb);
        }
        Ok(out)
    }

    /// Distances between the embedding of `sample` and of its circular
    /// shifts by `1..=max_shift` buckets.
    pub fn shift_sensitivity(&self, sample: &Array2<T>, max_shift: usize) -> Result<Vec<f64>> {
        let (c, l) = sample.dim();
        let mut batch = Array3::zeros((max_shift + 1, c, l));
        for s in 0..=max_shift {
            let mut dst = batch.index_axis_mut(Axis(0), s);
            for ch in 0..c {
                for i in 0..l {
                    dst[[ch, (i + s) % l]] = sample[[ch, i]];
                }
            }
        }
        let emb = self.forward(&batch)?;
        let base = emb.row(0);
        Ok((1..=max_shift)
            .map(|s| {
                base.iter()
                    .zip(emb.row(s).iter())
                    .map(|(&a, &b)| {
                        let d = (a - b).as_f64();
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect())
    }
}

/// One serialized tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedArray<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

pub const CHECKPOINT_FORMAT: &str = "checkpoint/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Embedding,
    Classifier,
}

/// Serialized network: config, trainable parameters and batch-norm buffers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub format: String,
    pub kind: ModelKind,
    pub config: BackboneConfig,
    /// Output classes of a classifier checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_ids: Option<Vec<String>>,
    pub params: Vec<NamedArray<T>>,
    pub buffers: Vec<NamedArray<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn capture(kind: ModelKind, config: &BackboneConfig, net: &Network<T>, class_ids: Option<Vec<String>>) -> Self {
        let params = net
            .named_params()
            .into_iter()
            .map(|(name, p)| NamedArray {
                name,
                shape: p.value.shape().to_vec(),
                data: p.value.iter().copied().collect(),
            })
            .collect();
        let buffers = net
            .named_buffers()
            .into_iter()
            .map(|(name, b)| NamedArray {
                name,
                shape: vec![b.len()],
                data: b.to_vec(),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            kind,
            config: config.clone(),
            class_ids,
            params,
            buffers,
        }
    }

    /// Copies weights into `net`, which must have been built from the same config.
    pub fn restore_into(&self, net: &mut Network<T>) -> Result<()> {
        let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
        let params = net.params_mut();
        if params.len() != self.params.len() {
            return Err(Error::Incompatible(format!(
                "checkpoint has {} parameter tensors, network {}",
                self.params.len(),
                params.len()
            )));
        }
        for ((p, name), saved) in params.into_iter().zip(names).zip(&self.params) {
            if saved.name != name || saved.shape != p.value.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    saved.name,
                    saved.shape,
                    name,
                    p.value.shape()
                )));
            }
            p.value = ArrayD::from_shape_vec(IxDyn(&saved.shape), saved.data.clone())
                .map_err(|e| Error::Incompatible(e.to_string()))?;
        }
        let buffers = net.buffers_mut();
        if buffers.len() != self.buffers.len() {
            return Err(Error::Incompatible("buffer count mismatch".to_string()));
        }
        for (b, saved) in buffers.into_iter().zip(&self.buffers) {
            if saved.data.len() != b.len() {
                return Err(Error::Incompatible(format!("buffer {} length mismatch", saved.name)));
            }
            *b = Array1::from(saved.data.clone());
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint<T> = serde_json::from_str(&text).map_err(|e| Error::File {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Incompatible(format!("unsupported checkpoint format {}", ckpt.format)));
        }
        Ok(ckpt)
    }
}

impl<T: Scalar> EmbeddingModel<T> {
    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::capture(ModelKind::Embedding, &self.config, &self.net, None)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Loads a checkpoint, rejecting it unless its config equals `expected`
    /// (when given).
    pub fn load(path: &Path, expected: Option<&BackboneConfig>) -> Result<Self> {
        let ckpt = Checkpoint::<T>::load(path)?;
        Self::from_checkpoint(&ckpt, expected)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>, expected: Option<&BackboneConfig>) -> Result<Self> {
        if ckpt.kind != ModelKind::Embedding {
            return Err(Error::Incompatible("not an embedding checkpoint".to_string()));
        }
        if let Some(cfg) = expected {
            if *cfg != ckpt.config {
                return Err(Error::Incompatible("backbone config differs from checkpoint".to_string()));
            }
        }
        let mut model = EmbeddingModel::new(ckpt.config.clone(), 0)?;
        ckpt.restore_into(&mut model.net)?;
        Ok(model)
    }
}
