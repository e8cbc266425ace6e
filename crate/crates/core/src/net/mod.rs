//! A small encoder-decoder localizer with skip connections and a count head.
//!
//! Architecture for `L` encoder blocks with channel widths `c_0..c_{L-1}`
//! (`c_b = min(base * 2^b, cap)`):
//!
//! | stage           | layers                                                   | output              |
//! |-----------------|----------------------------------------------------------|---------------------|
//! | `enc{b}`        | conv3×3 → ReLU → conv3×3 → ReLU, then 2×2 max-pool       | `c_b × S/2^(b+1)`   |
//! | `dec{b}` (b = L-1..0) | 2× nearest upsample, concat `enc{b}` pre-pool, conv3×3 → ReLU → conv3×3 → ReLU | `c_b × S/2^b` |
//! | `head`          | 1×1 conv → logistic                                      | `1 × S` (prob map)  |
//! | `count.fc1/fc2` | GAP(bottleneck) ‖ GAP(dec0) → dense → ReLU → dense       | scalar              |
//!
//! `dec{L-1}` takes the pooled bottleneck (`c_{L-1}` channels) as its
//! upsampling input, so its first conv sees `2 c_{L-1}` channels; every other
//! `dec{b}` sees `c_{b+1} + c_b`.
//!
//! Tensors are partitioned into encoder, decoder (including `head`) and
//! count head; only the encoder partition is copied by [`transfer_encoder`].

mod layers;
mod model;
mod weights;

pub use layers::{conv3x3, sigmoid};
pub use model::{forward, loss_and_grad, loss_and_grad_with, smooth_l1, ForwardOutput};
pub use weights::{read_weights, write_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub input_size: usize,
    pub encoder_blocks: usize,
    pub base_channels: usize,
    pub channel_cap: usize,
    pub count_head_hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            encoder_blocks: 3,
            base_channels: 8,
            channel_cap: 32,
            count_head_hidden: 16,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.encoder_blocks) {
            return domain(format!("encoder_blocks must be 1..=4, got {}", self.encoder_blocks));
        }
        if self.base_channels == 0 || self.channel_cap < self.base_channels {
            return domain(format!(
                "need 1 <= base_channels <= channel_cap, got {} / {}",
                self.base_channels, self.channel_cap
            ));
        }
        if self.count_head_hidden == 0 {
            return domain("count_head_hidden must be positive");
        }
        let stride = 1 << self.encoder_blocks;
        if self.input_size == 0 || self.input_size % stride != 0 {
            return domain(format!(
                "input_size {} not divisible by 2^{}",
                self.input_size, self.encoder_blocks
            ));
        }
        Ok(())
    }

    pub fn encoder_channels(&self) -> Vec<usize> {
        (0..self.encoder_blocks)
            .map(|b| (self.base_channels << b).min(self.channel_cap))
            .collect()
    }

    /// `(name, partition, shape)` of every tensor, in storage order.
    pub fn tensor_specs(&self) -> Vec<(String, Partition, Vec<usize>)> {
        let ch = self.encoder_channels();
        let l = ch.len();
        let mut specs = Vec::new();
        let mut conv = |name: String, part: Partition, cin: usize, cout: usize| {
            specs.push((format!("{name}.weight"), part, vec![cout, cin, 3, 3]));
            specs.push((format!("{name}.bias"), part, vec![cout]));
        };
        let mut cin = 3;
        for (b, &c) in ch.iter().enumerate() {
            conv(format!("enc{b}.conv1"), Partition::Encoder, cin, c);
            conv(format!("enc{b}.conv2"), Partition::Encoder, c, c);
            cin = c;
        }
        let mut below = ch[l - 1];
        for b in (0..l).rev() {
            conv(format!("dec{b}.conv1"), Partition::Decoder, below + ch[b], ch[b]);
            conv(format!("dec{b}.conv2"), Partition::Decoder, ch[b], ch[b]);
            below = ch[b];
        }
        specs.push(("head.weight".into(), Partition::Decoder, vec![1, ch[0]]));
        specs.push(("head.bias".into(), Partition::Decoder, vec![1]));
        let feat = ch[l - 1] + ch[0];
        let hid = self.count_head_hidden;
        specs.push(("count.fc1.weight".into(), Partition::CountHead, vec![hid, feat]));
        specs.push(("count.fc1.bias".into(), Partition::CountHead, vec![hid]));
        specs.push(("count.fc2.weight".into(), Partition::CountHead, vec![1, hid]));
        specs.push(("count.fc2.bias".into(), Partition::CountHead, vec![1]));
        specs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Partition {
    Encoder,
    Decoder,
    CountHead,
}

impl Partition {
    pub fn to_byte(self) -> u8 {
        match self {
            Partition::Encoder => 0,
            Partition::Decoder => 1,
            Partition::CountHead => 2,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Partition::Encoder),
            1 => Some(Partition::Decoder),
            2 => Some(Partition::CountHead),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub partition: Partition,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named tensors of one network. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: NetConfig,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Assembles parameters, checking names, partitions and shapes against
    /// `config`.
    pub fn from_tensors(config: NetConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = config.tensor_specs();
        if specs.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for ((name, part, shape), t) in specs.iter().zip(&tensors) {
            if &t.name != name || t.partition != *part || &t.shape != shape || t.data.len() != t.numel() {
                return Err(Error::Shape(format!(
                    "tensor {} {:?} {:?} does not match expected {name} {part:?} {shape:?}",
                    t.name, t.partition, t.shape
                )));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .tensor_specs()
            .into_iter()
            .map(|(name, partition, shape)| {
                let n = shape.iter().product();
                Tensor {
                    name,
                    partition,
                    shape,
                    data: vec![0.0; n],
                }
            })
            .collect();
        Ok(Self { config, tensors })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in &mut z.tensors {
            t.data.fill(0.0);
        }
        z
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    /// Same weights evaluated at a different (compatible) input size.
    pub fn with_input_size(mut self, size: usize) -> Result<Self> {
        let cfg = NetConfig {
            input_size: size,
            ..self.config
        };
        cfg.validate()?;
        self.config = cfg;
        Ok(self)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub(crate) fn data(&self, name: &str) -> &[f64] {
        &self.get(name).unwrap_or_else(|| panic!("missing tensor {name}")).data
    }

    pub(crate) fn data_mut(&mut self, name: &str) -> &mut [f64] {
        &mut self
            .tensors
            .iter_mut()
            .find(|t| t.name == name)
            .unwrap_or_else(|| panic!("missing tensor {name}"))
            .data
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn same_shapes(&self, other: &ModelParams) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.partition == b.partition)
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in &mut self.tensors {
            for x in &mut t.data {
                *x *= k;
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }
}

/// Fan-in scaled uniform weights, zero biases. Layers followed by a rectifier
/// use bound `sqrt(6 / fan_in)`; the two output layers use `sqrt(3 / fan_in)`.
pub fn init_params(config: NetConfig, seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in params.tensors_mut() {
        if t.name.ends_with(".bias") {
            continue;
        }
        let fan_in: usize = t.shape[1..].iter().product();
        let linear_out = t.name == "head.weight" || t.name == "count.fc2.weight";
        let gain = if linear_out { 3.0 } else { 6.0 };
        let bound = (gain / fan_in as f64).sqrt();
        for x in &mut t.data {
            *x = rng.gen_range(-bound..bound);
        }
    }
    Ok(params)
}

/// Copies every encoder tensor of `source` into `target`, leaving decoder and
/// count-head tensors untouched.
pub fn transfer_encoder(source: &ModelParams, target: &ModelParams) -> Result<ModelParams> {
    let enc = |p: &ModelParams| -> Vec<(String, Vec<usize>)> {
        p.tensors
            .iter()
            .filter(|t| t.partition == Partition::Encoder)
            .map(|t| (t.name.clone(), t.shape.clone()))
            .collect()
    };
    if enc(source) != enc(target) {
        return Err(Error::Shape("encoder partitions differ between source and target".into()));
    }
    let mut out = target.clone();
    for t in out.tensors.iter_mut().filter(|t| t.partition == Partition::Encoder) {
        t.data.clone_from(&source.get(&t.name).expect("checked above").data);
    }
    Ok(out)
}
