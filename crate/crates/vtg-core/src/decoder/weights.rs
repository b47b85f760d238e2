//! Learnable tensors of the timestamp decoder and their initialization.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Hyperparameters of the timestamp decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Embedding width of the decoder.
    pub d_model: usize,
    /// Width of the incoming hidden states.
    pub d_input: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub pyramid_levels: usize,
    /// Feed-forward expansion factor.
    pub ffn_mult: usize,
    /// Base constant of the sinusoidal positional encoding.
    pub pe_base: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            d_model: 256,
            d_input: 256,
            n_layers: 3,
            n_heads: 8,
            pyramid_levels: 4,
            ffn_mult: 4,
            pe_base: 10000.0,
        }
    }
}

impl DecoderConfig {
    /// Small configuration for gradient checks and toy training.
    pub fn tiny() -> Self {
        DecoderConfig {
            d_model: 16,
            d_input: 12,
            n_layers: 1,
            n_heads: 4,
            pyramid_levels: 4,
            ffn_mult: 2,
            pe_base: 10000.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_input == 0 || self.n_layers == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.pyramid_levels == 0 {
            return Err(Error::Config("pyramid_levels must be >= 1".into()));
        }
        if !(self.pe_base > 0.0) {
            return Err(Error::Config("pe_base must be positive".into()));
        }
        Ok(())
    }

    /// Frame counts must divide evenly down the pyramid.
    pub fn check_t(&self, t: usize) -> Result<()> {
        let div = 1usize << (self.pyramid_levels - 1);
        if t == 0 || t % div != 0 {
            return Err(Error::Shape(format!(
                "T = {t} must be a positive multiple of 2^(levels-1) = {div}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    /// `d_in x d_out`
    pub weight: Array2<f64>,
    /// `1 x d_out`
    pub bias: Array2<f64>,
}

impl LinearMap {
    fn init(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        LinearMap {
            weight: Array2::from_shape_fn((d_in, d_out), |_| rng.random_range(-bound..bound)),
            bias: Array2::zeros((1, d_out)),
        }
    }

    fn zeros(d_in: usize, d_out: usize) -> Self {
        LinearMap {
            weight: Array2::zeros((d_in, d_out)),
            bias: Array2::zeros((1, d_out)),
        }
    }

    fn check(&self, name: &str, d_in: usize, d_out: usize) -> Result<()> {
        check_shape(name, &self.weight, (d_in, d_out))?;
        check_shape(&format!("{name}.bias"), &self.bias, (1, d_out))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    /// `1 x d`
    pub gain: Array2<f64>,
    /// `1 x d`
    pub bias: Array2<f64>,
}

impl LayerNormParams {
    fn init(d: usize) -> Self {
        LayerNormParams {
            gain: Array2::ones((1, d)),
            bias: Array2::zeros((1, d)),
        }
    }

    fn check(&self, name: &str, d: usize) -> Result<()> {
        check_shape(&format!("{name}.gain"), &self.gain, (1, d))?;
        check_shape(&format!("{name}.bias"), &self.bias, (1, d))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerWeights {
    pub attn_q: LinearMap,
    pub attn_k: LinearMap,
    pub attn_v: LinearMap,
    pub attn_out: LinearMap,
    pub ffn1: LinearMap,
    pub ffn2: LinearMap,
    pub norm1: LayerNormParams,
    pub norm2: LayerNormParams,
}

/// One pyramid downsampling block: stride-2 kernel-2 conv plus layer norm.
/// The conv weight is stored flattened as `(2*d) x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidBlock {
    pub conv: LinearMap,
    pub norm: LayerNormParams,
}

/// Two-layer kernel-3 conv stack; weights stored flattened as `(3*d_in) x d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvHead {
    pub conv1: LinearMap,
    pub conv2: LinearMap,
}

/// All learnable tensors of the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    pub proj_v: LinearMap,
    pub proj_r: LinearMap,
    /// Modality indicator added to every visual token, `1 x d_model`.
    pub mod_v: Array2<f64>,
    /// Modality indicator added to the query token, `1 x d_model`.
    pub mod_r: Array2<f64>,
    pub layers: Vec<EncoderLayerWeights>,
    /// One block per downsampling step (`pyramid_levels - 1` of them).
    pub pyramid: Vec<PyramidBlock>,
    pub cls_head: ConvHead,
    pub reg_head: ConvHead,
    /// Positive per-level multipliers on the regressed offsets, `1 x levels`.
    pub level_scales: Array2<f64>,
}

impl DecoderWeights {
    pub fn init(cfg: &DecoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let layers = (0..cfg.n_layers)
            .map(|_| EncoderLayerWeights {
                attn_q: LinearMap::init(&mut rng, d, d),
                attn_k: LinearMap::init(&mut rng, d, d),
                attn_v: LinearMap::init(&mut rng, d, d),
                attn_out: LinearMap::init(&mut rng, d, d),
                ffn1: LinearMap::init(&mut rng, d, d * cfg.ffn_mult),
                ffn2: LinearMap::init(&mut rng, d * cfg.ffn_mult, d),
                norm1: LayerNormParams::init(d),
                norm2: LayerNormParams::init(d),
            })
            .collect();
        let pyramid = (0..cfg.pyramid_levels - 1)
            .map(|_| PyramidBlock {
                conv: LinearMap::init(&mut rng, 2 * d, d),
                norm: LayerNormParams::init(d),
            })
            .collect();
        Ok(DecoderWeights {
            proj_v: LinearMap::init(&mut rng, cfg.d_input, d),
            proj_r: LinearMap::init(&mut rng, cfg.d_input, d),
            mod_v: Array2::from_shape_fn((1, d), |_| rng.random_range(-0.02..0.02)),
            mod_r: Array2::from_shape_fn((1, d), |_| rng.random_range(-0.02..0.02)),
            layers,
            pyramid,
            cls_head: ConvHead {
                conv1: LinearMap::init(&mut rng, 3 * d, d),
                conv2: LinearMap::init(&mut rng, 3 * d, 1),
            },
            reg_head: ConvHead {
                conv1: LinearMap::init(&mut rng, 3 * d, d),
                conv2: LinearMap::init(&mut rng, 3 * d, 2),
            },
            level_scales: Array2::ones((1, cfg.pyramid_levels)),
        })
    }

    /// All-zero weights of the right shapes (degenerate but valid).
    pub fn zeros(cfg: &DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(DecoderWeights {
            proj_v: LinearMap::zeros(cfg.d_input, d),
            proj_r: LinearMap::zeros(cfg.d_input, d),
            mod_v: Array2::zeros((1, d)),
            mod_r: Array2::zeros((1, d)),
            layers: (0..cfg.n_layers)
                .map(|_| EncoderLayerWeights {
                    attn_q: LinearMap::zeros(d, d),
                    attn_k: LinearMap::zeros(d, d),
                    attn_v: LinearMap::zeros(d, d),
                    attn_out: LinearMap::zeros(d, d),
                    ffn1: LinearMap::zeros(d, d * cfg.ffn_mult),
                    ffn2: LinearMap::zeros(d * cfg.ffn_mult, d),
                    norm1: LayerNormParams::init(d),
                    norm2: LayerNormParams::init(d),
                })
                .collect(),
            pyramid: (0..cfg.pyramid_levels - 1)
                .map(|_| PyramidBlock {
                    conv: LinearMap::zeros(2 * d, d),
                    norm: LayerNormParams::init(d),
                })
                .collect(),
            cls_head: ConvHead {
                conv1: LinearMap::zeros(3 * d, d),
                conv2: LinearMap::zeros(3 * d, 1),
            },
            reg_head: ConvHead {
                conv1: LinearMap::zeros(3 * d, d),
                conv2: LinearMap::zeros(3 * d, 2),
            },
            level_scales: Array2::ones((1, cfg.pyramid_levels)),
        })
    }

    pub fn validate(&self, cfg: &DecoderConfig) -> Result<()> {
        cfg.validate()?;
        let d = cfg.d_model;
        self.proj_v.check("proj_v", cfg.d_input, d)?;
        self.proj_r.check("proj_r", cfg.d_input, d)?;
        check_shape("mod_v", &self.mod_v, (1, d))?;
        check_shape("mod_r", &self.mod_r, (1, d))?;
        if self.layers.len() != cfg.n_layers {
            return Err(Error::Shape(format!(
                "expected {} encoder layers, found {}",
                cfg.n_layers,
                self.layers.len()
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            layer.attn_q.check(&p("attn_q"), d, d)?;
            layer.attn_k.check(&p("attn_k"), d, d)?;
            layer.attn_v.check(&p("attn_v"), d, d)?;
            layer.attn_out.check(&p("attn_out"), d, d)?;
            layer.ffn1.check(&p("ffn1"), d, d * cfg.ffn_mult)?;
            layer.ffn2.check(&p("ffn2"), d * cfg.ffn_mult, d)?;
            layer.norm1.check(&p("norm1"), d)?;
            layer.norm2.check(&p("norm2"), d)?;
        }
        if self.pyramid.len() != cfg.pyramid_levels - 1 {
            return Err(Error::Shape(format!(
                "expected {} pyramid blocks, found {}",
                cfg.pyramid_levels - 1,
                self.pyramid.len()
            )));
        }
        for (i, block) in self.pyramid.iter().enumerate() {
            block.conv.check(&format!("pyramid.{i}.conv"), 2 * d, d)?;
            block.norm.check(&format!("pyramid.{i}.norm"), d)?;
        }
        self.cls_head.conv1.check("cls_head.conv1", 3 * d, d)?;
        self.cls_head.conv2.check("cls_head.conv2", 3 * d, 1)?;
        self.reg_head.conv1.check("reg_head.conv1", 3 * d, d)?;
        self.reg_head.conv2.check("reg_head.conv2", 3 * d, 2)?;
        check_shape("level_scales", &self.level_scales, (1, cfg.pyramid_levels))?;
        if self.level_scales.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Range("level_scales must all be positive".into()));
        }
        for (name, tensor) in self.tensors() {
            if tensor.iter().any(|v| !v.is_finite()) {
                return Err(Error::Tensor {
                    name,
                    message: "non-finite values".into(),
                });
            }
        }
        Ok(())
    }

    /// Named views over every tensor, in a fixed order shared with
    /// [`Self::tensors_mut`] and [`WeightVars::names`].
    pub fn tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = vec![
            ("proj_v.weight".into(), &self.proj_v.weight),
            ("proj_v.bias".into(), &self.proj_v.bias),
            ("proj_r.weight".into(), &self.proj_r.weight),
            ("proj_r.bias".into(), &self.proj_r.bias),
            ("mod_v".into(), &self.mod_v),
            ("mod_r".into(), &self.mod_r),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let maps = [
                ("attn_q", &l.attn_q),
                ("attn_k", &l.attn_k),
                ("attn_v", &l.attn_v),
                ("attn_out", &l.attn_out),
                ("ffn1", &l.ffn1),
                ("ffn2", &l.ffn2),
            ];
            for (n, m) in maps {
                out.push((format!("layers.{i}.{n}.weight"), &m.weight));
                out.push((format!("layers.{i}.{n}.bias"), &m.bias));
            }
            out.push((format!("layers.{i}.norm1.gain"), &l.norm1.gain));
            out.push((format!("layers.{i}.norm1.bias"), &l.norm1.bias));
            out.push((format!("layers.{i}.norm2.gain"), &l.norm2.gain));
            out.push((format!("layers.{i}.norm2.bias"), &l.norm2.bias));
        }
        for (i, b) in self.pyramid.iter().enumerate() {
            out.push((format!("pyramid.{i}.conv.weight"), &b.conv.weight));
            out.push((format!("pyramid.{i}.conv.bias"), &b.conv.bias));
            out.push((format!("pyramid.{i}.norm.gain"), &b.norm.gain));
            out.push((format!("pyramid.{i}.norm.bias"), &b.norm.bias));
        }
        for (head, name) in [(&self.cls_head, "cls_head"), (&self.reg_head, "reg_head")] {
            out.push((format!("{name}.conv1.weight"), &head.conv1.weight));
            out.push((format!("{name}.conv1.bias"), &head.conv1.bias));
            out.push((format!("{name}.conv2.weight"), &head.conv2.weight));
            out.push((format!("{name}.conv2.bias"), &head.conv2.bias));
        }
        out.push(("level_scales".into(), &self.level_scales));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out: Vec<(String, &mut Array2<f64>)> = vec![
            ("proj_v.weight".into(), &mut self.proj_v.weight),
            ("proj_v.bias".into(), &mut self.proj_v.bias),
            ("proj_r.weight".into(), &mut self.proj_r.weight),
            ("proj_r.bias".into(), &mut self.proj_r.bias),
            ("mod_v".into(), &mut self.mod_v),
            ("mod_r".into(), &mut self.mod_r),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let maps = [
                ("attn_q", &mut l.attn_q),
                ("attn_k", &mut l.attn_k),
                ("attn_v", &mut l.attn_v),
                ("attn_out", &mut l.attn_out),
                ("ffn1", &mut l.ffn1),
                ("ffn2", &mut l.ffn2),
            ];
            for (n, m) in maps {
                out.push((format!("layers.{i}.{n}.weight"), &mut m.weight));
                out.push((format!("layers.{i}.{n}.bias"), &mut m.bias));
            }
            out.push((format!("layers.{i}.norm1.gain"), &mut l.norm1.gain));
            out.push((format!("layers.{i}.norm1.bias"), &mut l.norm1.bias));
            out.push((format!("layers.{i}.norm2.gain"), &mut l.norm2.gain));
            out.push((format!("layers.{i}.norm2.bias"), &mut l.norm2.bias));
        }
        for (i, b) in self.pyramid.iter_mut().enumerate() {
            out.push((format!("pyramid.{i}.conv.weight"), &mut b.conv.weight));
            out.push((format!("pyramid.{i}.conv.bias"), &mut b.conv.bias));
            out.push((format!("pyramid.{i}.norm.gain"), &mut b.norm.gain));
            out.push((format!("pyramid.{i}.norm.bias"), &mut b.norm.bias));
        }
        for (head, name) in [
            (&mut self.cls_head, "cls_head"),
            (&mut self.reg_head, "reg_head"),
        ] {
            out.push((format!("{name}.conv1.weight"), &mut head.conv1.weight));
            out.push((format!("{name}.conv1.bias"), &mut head.conv1.bias));
            out.push((format!("{name}.conv2.weight"), &mut head.conv2.weight));
            out.push((format!("{name}.conv2.bias"), &mut head.conv2.bias));
        }
        out.push(("level_scales".into(), &mut self.level_scales));
        out
    }

    /// Load every tensor onto a tape as a leaf, preserving the tensor order.
    pub(crate) fn stage(&self, tape: &mut Tape) -> WeightVars {
        let mut vars = Vec::new();
        for (name, tensor) in self.tensors() {
            vars.push((name, tape.leaf(tensor.clone())));
        }
        WeightVars { vars }
    }
}

/// Tape handles for staged weights, addressable by tensor name.
pub(crate) struct WeightVars {
    vars: Vec<(String, Var)>,
}

impl WeightVars {
    pub fn get(&self, name: &str) -> Var {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown weight tensor `{name}`"))
            .1
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.vars
    }
}

fn check_shape(name: &str, tensor: &Array2<f64>, expect: (usize, usize)) -> Result<()> {
    if tensor.dim() != expect {
        return Err(Error::Tensor {
            name: name.to_string(),
            message: format!("expected shape {:?}, found {:?}", expect, tensor.dim()),
        });
    }
    Ok(())
}
