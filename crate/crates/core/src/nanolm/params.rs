use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use serde::{Deserialize, Serialize};

use crate::checkpoint::TensorFile;
use crate::error::{Error, Result};
use crate::rng;

const WEIGHT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Filled in from the vocabulary at run time; not read from config files.
    #[serde(skip)]
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 0,
            max_seq_len: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(Error::invalid(
                "n_layers, d_ff and max_seq_len must be >= 1",
            ));
        }
        if self.vocab_size == 0 {
            return Err(Error::invalid(
                "vocab_size must be set before initialization",
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// RMS-norm gain offsets; the effective gain is `1 + offset`.
    pub attn_norm: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ffn_norm: Array1<f64>,
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub config: ModelConfig,
    /// Token table; also the output head.
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub final_norm: Array1<f64>,
}

impl BackboneParams {
    pub fn zeros_like(&self) -> Self {
        let z2 = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        let z1 = |a: &Array1<f64>| Array1::zeros(a.raw_dim());
        BackboneParams {
            config: self.config.clone(),
            tok_emb: z2(&self.tok_emb),
            pos_emb: z2(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: z1(&l.attn_norm),
                    wq: z2(&l.wq),
                    wk: z2(&l.wk),
                    wv: z2(&l.wv),
                    wo: z2(&l.wo),
                    ffn_norm: z1(&l.ffn_norm),
                    w1: z2(&l.w1),
                    w2: z2(&l.w2),
                })
                .collect(),
            final_norm: z1(&self.final_norm),
        }
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = vec![
            (
                "backbone.tok_emb".to_owned(),
                self.tok_emb.view().into_dyn(),
            ),
            (
                "backbone.pos_emb".to_owned(),
                self.pos_emb.view().into_dyn(),
            ),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("backbone.layer{i}.{n}");
            out.push((p("attn_norm"), l.attn_norm.view().into_dyn()));
            out.push((p("wq"), l.wq.view().into_dyn()));
            out.push((p("wk"), l.wk.view().into_dyn()));
            out.push((p("wv"), l.wv.view().into_dyn()));
            out.push((p("wo"), l.wo.view().into_dyn()));
            out.push((p("ffn_norm"), l.ffn_norm.view().into_dyn()));
            out.push((p("w1"), l.w1.view().into_dyn()));
            out.push((p("w2"), l.w2.view().into_dyn()));
        }
        out.push((
            "backbone.final_norm".to_owned(),
            self.final_norm.view().into_dyn(),
        ));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = vec![
            (
                "backbone.tok_emb".to_owned(),
                self.tok_emb.view_mut().into_dyn(),
            ),
            (
                "backbone.pos_emb".to_owned(),
                self.pos_emb.view_mut().into_dyn(),
            ),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |n: &str| format!("backbone.layer{i}.{n}");
            out.push((p("attn_norm"), l.attn_norm.view_mut().into_dyn()));
            out.push((p("wq"), l.wq.view_mut().into_dyn()));
            out.push((p("wk"), l.wk.view_mut().into_dyn()));
            out.push((p("wv"), l.wv.view_mut().into_dyn()));
            out.push((p("wo"), l.wo.view_mut().into_dyn()));
            out.push((p("ffn_norm"), l.ffn_norm.view_mut().into_dyn()));
            out.push((p("w1"), l.w1.view_mut().into_dyn()));
            out.push((p("w2"), l.w2.view_mut().into_dyn()));
        }
        out.push((
            "backbone.final_norm".to_owned(),
            self.final_norm.view_mut().into_dyn(),
        ));
        out
    }

    pub fn write_sections(&self, f: &mut TensorFile) {
        let c = &self.config;
        f.set_meta("model.d_model", c.d_model);
        f.set_meta("model.n_layers", c.n_layers);
        f.set_meta("model.n_heads", c.n_heads);
        f.set_meta("model.d_ff", c.d_ff);
        f.set_meta("model.vocab_size", c.vocab_size);
        f.set_meta("model.max_seq_len", c.max_seq_len);
        f.set_meta("model.seed", c.seed);
        for (name, t) in self.tensors() {
            f.push(
                name,
                t.shape().to_vec(),
                t.iter().map(|&v| v as f32).collect(),
            );
        }
    }

    pub fn read_sections(f: &TensorFile) -> Result<Self> {
        let config = ModelConfig {
            d_model: f.meta_parse("model.d_model")?,
            n_layers: f.meta_parse("model.n_layers")?,
            n_heads: f.meta_parse("model.n_heads")?,
            d_ff: f.meta_parse("model.d_ff")?,
            vocab_size: f.meta_parse("model.vocab_size")?,
            max_seq_len: f.meta_parse("model.max_seq_len")?,
            seed: f.meta_parse("model.seed")?,
        };
        config.validate()?;
        let mut params = init_backbone(&config)?;
        load_tensors(params.tensors_mut(), f)?;
        Ok(params)
    }
}

pub(crate) fn load_tensors(
    targets: Vec<(String, ArrayViewMutD<'_, f64>)>,
    f: &TensorFile,
) -> Result<()> {
    for (name, mut t) in targets {
        let s = f
            .section(&name)
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks section {name}")))?;
        if s.shape != t.shape() {
            return Err(Error::Shape {
                what: "checkpoint section",
                expected: format!("{name} {:?}", t.shape()),
                got: format!("{:?}", s.shape),
            });
        }
        for (dst, &src) in t.iter_mut().zip(&s.data) {
            *dst = f64::from(src);
        }
    }
    Ok(())
}

/// Gaussian(0, 0.02) weights and zero norm offsets, from the config seed.
pub fn init_backbone(cfg: &ModelConfig) -> Result<BackboneParams> {
    cfg.validate()?;
    let mut r = rng::stream(cfg.seed, 0xb0_0001);
    let d = cfg.d_model;
    let mut g = |rows, cols| rng::gaussian_matrix(&mut r, rows, cols, WEIGHT_STD);
    let tok_emb = g(cfg.vocab_size, d);
    let pos_emb = g(cfg.max_seq_len, d);
    let layers = (0..cfg.n_layers)
        .map(|_| LayerParams {
            attn_norm: Array1::zeros(d),
            wq: g(d, d),
            wk: g(d, d),
            wv: g(d, d),
            wo: g(d, d),
            ffn_norm: Array1::zeros(d),
            w1: g(d, cfg.d_ff),
            w2: g(cfg.d_ff, d),
        })
        .collect();
    Ok(BackboneParams {
        config: cfg.clone(),
        tok_emb,
        pos_emb,
        layers,
        final_norm: Array1::zeros(d),
    })
}

/// `delta W = scale * A B`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl LoraAdapter {
    pub fn delta(&self, scale: f64) -> Array2<f64> {
        self.a.dot(&self.b) * scale
    }
}

/// Adapters on the query and value projections of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerLora {
    pub q: LoraAdapter,
    pub v: LoraAdapter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraParams {
    pub rank: usize,
    pub alpha: f64,
    pub layers: Vec<LayerLora>,
}

impl LoraParams {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn zeros_like(&self) -> Self {
        let z = |a: &LoraAdapter| LoraAdapter {
            a: Array2::zeros(a.a.raw_dim()),
            b: Array2::zeros(a.b.raw_dim()),
        };
        LoraParams {
            rank: self.rank,
            alpha: self.alpha,
            layers: self
                .layers
                .iter()
                .map(|l| LayerLora {
                    q: z(&l.q),
                    v: z(&l.v),
                })
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (which, ad) in [("q", &l.q), ("v", &l.v)] {
                out.push((format!("lora.layer{i}.{which}.a"), ad.a.view().into_dyn()));
                out.push((format!("lora.layer{i}.{which}.b"), ad.b.view().into_dyn()));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (which, ad) in [("q", &mut l.q), ("v", &mut l.v)] {
                out.push((
                    format!("lora.layer{i}.{which}.a"),
                    ad.a.view_mut().into_dyn(),
                ));
                out.push((
                    format!("lora.layer{i}.{which}.b"),
                    ad.b.view_mut().into_dyn(),
                ));
            }
        }
        out
    }

    /// Backbone with the adapters folded into `wq` and `wv`.
    pub fn merged_into(&self, base: &BackboneParams) -> BackboneParams {
        let mut merged = base.clone();
        let s = self.scale();
        for (layer, ad) in merged.layers.iter_mut().zip(&self.layers) {
            layer.wq = &layer.wq + &ad.q.delta(s);
            layer.wv = &layer.wv + &ad.v.delta(s);
        }
        merged
    }

    pub fn write_sections(&self, f: &mut TensorFile) {
        f.set_meta("lora.rank", self.rank);
        f.set_meta("lora.alpha", self.alpha);
        for (name, t) in self.tensors() {
            f.push(
                name,
                t.shape().to_vec(),
                t.iter().map(|&v| v as f32).collect(),
            );
        }
    }

    pub fn read_sections(f: &TensorFile, cfg: &ModelConfig) -> Result<Self> {
        let rank = f.meta_parse("lora.rank")?;
        let alpha = f.meta_parse("lora.alpha")?;
        let mut lora = init_lora(cfg, rank, alpha, 0)?;
        load_tensors(lora.tensors_mut(), f)?;
        Ok(lora)
    }
}

/// Gaussian `A` with std `1/sqrt(d_model)` and zero `B`, so attaching the
/// adapters leaves the model's function unchanged.
pub fn init_lora(cfg: &ModelConfig, rank: usize, alpha: f64, seed: u64) -> Result<LoraParams> {
    if rank == 0 {
        return Err(Error::invalid("LoRA rank must be >= 1"));
    }
    let d = cfg.d_model;
    let mut r = rng::stream(seed, 0x10_0001);
    let std = 1.0 / (d as f64).sqrt();
    let mut adapter = || LoraAdapter {
        a: rng::gaussian_matrix(&mut r, d, rank, std),
        b: Array2::zeros((rank, d)),
    };
    let layers = (0..cfg.n_layers)
        .map(|_| LayerLora {
            q: adapter(),
            v: adapter(),
        })
        .collect();
    Ok(LoraParams {
        rank,
        alpha,
        layers,
    })
}
