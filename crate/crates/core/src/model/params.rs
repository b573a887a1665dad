use rand::Rng;

use super::{ModelConfig, ModelError};
use crate::numerics::{Scalar, Tensor};

/// Per-head projection indices for one attention block.
#[derive(Clone, Debug)]
pub(crate) struct AttnIds {
    pub q: Vec<usize>,
    pub k: Vec<usize>,
    pub v: Vec<usize>,
    pub o: Vec<usize>,
}

#[derive(Clone, Debug)]
pub(crate) struct FfnIds {
    pub wi: usize,
    pub wo: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct EncLayerIds {
    pub attn_norm: usize,
    pub attn: AttnIds,
    pub ff_norm: usize,
    pub ff: FfnIds,
}

#[derive(Clone, Debug)]
pub(crate) struct DecLayerIds {
    pub self_norm: usize,
    pub self_attn: AttnIds,
    pub cross_norm: usize,
    pub cross_attn: AttnIds,
    pub ff_norm: usize,
    pub ff: FfnIds,
}

/// Index of every named parameter tensor, derived from the config alone.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub embed: usize,
    pub enc_bias: Vec<usize>,
    pub dec_bias: Vec<usize>,
    pub enc: Vec<EncLayerIds>,
    pub enc_final_norm: usize,
    pub dec: Vec<DecLayerIds>,
    pub dec_final_norm: usize,
    pub lm_head: usize,
}

/// Initialization recipe for one tensor.
#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Ones,
}

struct Builder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn attn(&mut self, prefix: &str, c: &ModelConfig) -> AttnIds {
        let (d, dh) = (c.d_model, c.d_head());
        let std = (d as f64).powf(-0.5);
        let mut ids = AttnIds {
            q: vec![],
            k: vec![],
            v: vec![],
            o: vec![],
        };
        for h in 0..c.n_heads {
            ids.q
                .push(self.add(format!("{prefix}.q.h{h}"), vec![d, dh], Init::Normal(std)));
            ids.k
                .push(self.add(format!("{prefix}.k.h{h}"), vec![d, dh], Init::Normal(std)));
            ids.v
                .push(self.add(format!("{prefix}.v.h{h}"), vec![d, dh], Init::Normal(std)));
            ids.o
                .push(self.add(format!("{prefix}.o.h{h}"), vec![dh, d], Init::Normal(std)));
        }
        ids
    }

    fn ffn(&mut self, prefix: &str, c: &ModelConfig) -> FfnIds {
        let wi = self.add(
            format!("{prefix}.wi"),
            vec![c.d_model, c.d_ff],
            Init::Normal((c.d_model as f64).powf(-0.5)),
        );
        let wo = self.add(
            format!("{prefix}.wo"),
            vec![c.d_ff, c.d_model],
            Init::Normal((c.d_ff as f64).powf(-0.5)),
        );
        FfnIds { wi, wo }
    }
}

fn build(c: &ModelConfig) -> (Layout, Builder) {
    let mut b = Builder {
        names: vec![],
        shapes: vec![],
        inits: vec![],
    };
    let d = c.d_model;
    let bias_std = (d as f64).powf(-0.5);
    let embed = b.add(
        "shared.embed".into(),
        vec![c.vocab_size, d],
        Init::Normal(1.0),
    );
    let enc_bias = (0..c.n_heads)
        .map(|h| {
            b.add(
                format!("enc.rel_bias.h{h}"),
                vec![c.rel_pos_buckets],
                Init::Normal(bias_std),
            )
        })
        .collect();
    let dec_bias = (0..c.n_heads)
        .map(|h| {
            b.add(
                format!("dec.rel_bias.h{h}"),
                vec![c.rel_pos_buckets],
                Init::Normal(bias_std),
            )
        })
        .collect();
    let mut enc = Vec::with_capacity(c.n_enc_layers);
    for i in 0..c.n_enc_layers {
        let attn_norm = b.add(format!("enc.{i}.attn_norm"), vec![d], Init::Ones);
        let attn = b.attn(&format!("enc.{i}.attn"), c);
        let ff_norm = b.add(format!("enc.{i}.ff_norm"), vec![d], Init::Ones);
        let ff = b.ffn(&format!("enc.{i}.ff"), c);
        enc.push(EncLayerIds {
            attn_norm,
            attn,
            ff_norm,
            ff,
        });
    }
    let enc_final_norm = b.add("enc.final_norm".into(), vec![d], Init::Ones);
    let mut dec = Vec::with_capacity(c.n_dec_layers);
    for i in 0..c.n_dec_layers {
        let self_norm = b.add(format!("dec.{i}.self_norm"), vec![d], Init::Ones);
        let self_attn = b.attn(&format!("dec.{i}.self"), c);
        let cross_norm = b.add(format!("dec.{i}.cross_norm"), vec![d], Init::Ones);
        let cross_attn = b.attn(&format!("dec.{i}.cross"), c);
        let ff_norm = b.add(format!("dec.{i}.ff_norm"), vec![d], Init::Ones);
        let ff = b.ffn(&format!("dec.{i}.ff"), c);
        dec.push(DecLayerIds {
            self_norm,
            self_attn,
            cross_norm,
            cross_attn,
            ff_norm,
            ff,
        });
    }
    let dec_final_norm = b.add("dec.final_norm".into(), vec![d], Init::Ones);
    let lm_head = b.add(
        "lm_head".into(),
        vec![d, c.vocab_size],
        Init::Normal((d as f64).powf(-0.5)),
    );
    (
        Layout {
            embed,
            enc_bias,
            dec_bias,
            enc,
            enc_final_norm,
            dec,
            dec_final_norm,
            lm_head,
        },
        b,
    )
}

impl Layout {
    pub(crate) fn new(c: &ModelConfig) -> Self {
        build(c).0
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Fresh parameters drawn from `rng` in declaration order.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let (_, b) = build(config);
        let tensors = b
            .shapes
            .iter()
            .zip(&b.inits)
            .map(|(shape, init)| match *init {
                Init::Normal(std) => Tensor::randn(shape, std, rng),
                Init::Ones => Tensor::ones(shape),
            })
            .collect();
        Self {
            names: b.names,
            tensors,
        }
    }

    /// Assembles parameters from named tensors, checking names and shapes against
    /// the layout implied by `config`.
    pub fn from_named(
        config: &ModelConfig,
        named: Vec<(String, Tensor<T>)>,
    ) -> Result<Self, ModelError> {
        let (_, b) = build(config);
        if named.len() != b.names.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} tensors, found {}",
                b.names.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, t), (want, shape)) in named.into_iter().zip(b.names.iter().zip(&b.shapes)) {
            if &name != want {
                return Err(ModelError::Checkpoint(format!(
                    "expected tensor {want}, found {name}"
                )));
            }
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
            tensors.push(t);
        }
        Ok(Self {
            names: b.names,
            tensors,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, index: usize) -> &Tensor<T> {
        &self.tensors[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.tensors[index]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}
