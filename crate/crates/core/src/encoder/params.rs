//! Flat parameter storage and the index layout the forward pass reads from.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand_distr::{Distribution, Normal};

use super::real::Real;
use super::{EncoderConfig, FrontEnd};
use crate::rng::Pcg64;
use crate::tokenizer::CHAR_VOCAB_SIZE;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn mat(&self) -> ArrayView2<'_, F> {
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.data).expect("rank-2 tensor")
    }

    pub fn mat_mut(&mut self) -> ArrayViewMut2<'_, F> {
        ArrayViewMut2::from_shape((self.shape[0], self.shape[1]), &mut self.data).expect("rank-2 tensor")
    }

    pub fn vec(&self) -> ArrayView1<'_, F> {
        ArrayView1::from(&self.data[..])
    }

    pub fn vec_mut(&mut self) -> ArrayViewMut1<'_, F> {
        ArrayViewMut1::from(&mut self.data[..])
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| G::from_f64(x.to_f64().unwrap()).unwrap()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearIdx {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormIdx {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerIdx {
    pub q: LinearIdx,
    pub k: LinearIdx,
    pub v: LinearIdx,
    pub o: LinearIdx,
    pub ln1: NormIdx,
    pub ff1: LinearIdx,
    pub ff2: LinearIdx,
    pub ln2: NormIdx,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvIdx {
    pub width: usize,
    pub count: usize,
    pub lin: LinearIdx,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HighwayIdx {
    pub transform: LinearIdx,
    pub gate: LinearIdx,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrontIdx {
    Lookup {
        tokens: usize,
    },
    CharCnn {
        chars: usize,
        convs: Vec<ConvIdx>,
        highway: Vec<HighwayIdx>,
        proj: LinearIdx,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TowerIdx {
    pub front: FrontIdx,
    pub pos: usize,
    pub emb_ln: NormIdx,
    pub layers: Vec<LayerIdx>,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal,
    /// Truncated normal with the given standard deviation.
    Scaled(f64),
    Zeros,
    Ones,
}

/// Accumulates named tensors, either freshly initialised or as shape-only
/// placeholders when a checkpoint supplies the values.
pub(crate) struct ParamBuilder<'r, F> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<F>>,
    rng: Option<&'r mut Pcg64>,
}

impl<'r, F: Real> ParamBuilder<'r, F> {
    pub fn new(rng: Option<&'r mut Pcg64>) -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            rng,
        }
    }

    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let mut t = Tensor::zeros(shape);
        match init {
            Init::Zeros => {}
            Init::Ones => t.data.fill(F::one()),
            Init::Normal | Init::Scaled(_) => {
                let std = match init {
                    Init::Scaled(std) => std,
                    _ => INIT_STD,
                };
                if let Some(rng) = self.rng.as_deref_mut() {
                    let normal = Normal::new(0.0, std).unwrap();
                    for x in t.data.iter_mut() {
                        // truncated at two standard deviations
                        let v = loop {
                            let v: f64 = normal.sample(rng);
                            if v.abs() <= 2.0 * std {
                                break v;
                            }
                        };
                        *x = F::from_f64(v).unwrap();
                    }
                }
            }
        }
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn linear(&mut self, prefix: &str, out: usize, inp: usize) -> LinearIdx {
        self.linear_init(prefix, out, inp, Init::Normal)
    }

    /// Linear layer with weights scaled by `1/sqrt(inp)`, so activations keep
    /// unit scale through the character stack.
    fn fan_in_linear(&mut self, prefix: &str, out: usize, inp: usize) -> LinearIdx {
        self.linear_init(prefix, out, inp, Init::Scaled(1.0 / (inp as f64).sqrt()))
    }

    fn linear_init(&mut self, prefix: &str, out: usize, inp: usize, init: Init) -> LinearIdx {
        LinearIdx {
            w: self.add(format!("{prefix}.weight"), &[out, inp], init),
            b: self.add(format!("{prefix}.bias"), &[out], Init::Zeros),
        }
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> NormIdx {
        NormIdx {
            g: self.add(format!("{prefix}.norm_scale"), &[dim], Init::Ones),
            b: self.add(format!("{prefix}.norm_bias"), &[dim], Init::Zeros),
        }
    }

    pub fn tower(&mut self, prefix: &str, front_end: FrontEnd, config: &EncoderConfig, vocab_size: usize) -> TowerIdx {
        let d = config.d_model;
        let front = match front_end {
            FrontEnd::Lookup => FrontIdx::Lookup {
                tokens: self.add(format!("{prefix}.token_embeddings"), &[vocab_size, d], Init::Normal),
            },
            FrontEnd::CharCnn => {
                let chars = self.add(
                    format!("{prefix}.char_embeddings"),
                    &[CHAR_VOCAB_SIZE, config.char_dim],
                    Init::Scaled(1.0),
                );
                let convs = config
                    .filters
                    .iter()
                    .enumerate()
                    .map(|(i, &(width, count))| ConvIdx {
                        width,
                        count,
                        lin: self.fan_in_linear(&format!("{prefix}.conv{i}"), count, width * config.char_dim),
                    })
                    .collect();
                let nf = config.filter_total();
                let highway = (0..config.highway_layers)
                    .map(|i| HighwayIdx {
                        transform: self.fan_in_linear(&format!("{prefix}.highway{i}.transform"), nf, nf),
                        gate: self.fan_in_linear(&format!("{prefix}.highway{i}.gate"), nf, nf),
                    })
                    .collect();
                let proj = self.fan_in_linear(&format!("{prefix}.char_projection"), d, nf);
                FrontIdx::CharCnn {
                    chars,
                    convs,
                    highway,
                    proj,
                }
            }
        };
        let pos = self.add(format!("{prefix}.position_embeddings"), &[config.max_seq_len, d], Init::Normal);
        let emb_ln = self.norm(&format!("{prefix}.embeddings"), d);
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                LayerIdx {
                    q: self.linear(&format!("{p}.attn.query"), d, d),
                    k: self.linear(&format!("{p}.attn.key"), d, d),
                    v: self.linear(&format!("{p}.attn.value"), d, d),
                    o: self.linear(&format!("{p}.attn.output"), d, d),
                    ln1: self.norm(&format!("{p}.attn"), d),
                    ff1: self.linear(&format!("{p}.ffn.inner"), config.d_ff, d),
                    ff2: self.linear(&format!("{p}.ffn.outer"), d, config.d_ff),
                    ln2: self.norm(&format!("{p}.ffn"), d),
                }
            })
            .collect();
        TowerIdx {
            front,
            pos,
            emb_ln,
            layers,
        }
    }
}

/// Parameters that are exempt from weight decay.
pub fn is_no_decay(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".norm_scale") || name.ends_with(".norm_bias")
}
