use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::DenoiserConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter arrays of one denoiser instance (student, EMA, or teacher).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: DenoiserConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    layout: Layout,
}

/// Indices of every array inside `ModelParams`, in storage order.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    pub guidance_proj: usize,
    pub boundary_proj: usize,
    pub time_w: usize,
    pub time_b: usize,
    pub input_w: usize,
    pub input_b: usize,
    pub blocks: Vec<BlockLayout>,
    pub output_w: usize,
    pub output_b: usize,
    pub aux_w: usize,
    pub aux_b: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BlockLayout {
    pub pw1_w: usize,
    pub pw1_b: usize,
    pub film_w: usize,
    pub film_b: usize,
    pub cond_w: usize,
    pub cond_b: usize,
    pub gate: usize,
    pub spatial: usize,
    pub temporal: usize,
    pub pw2_w: usize,
    pub pw2_b: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Const(f64),
    /// Gaussian with standard deviation `gain / sqrt(fan_in)`.
    Normal { fan_in: usize, gain: f64 },
    /// Identity-like depthwise kernel: centre tap 1 plus small noise.
    CentredKernel { taps: usize, noise: f64 },
}

struct Builder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        self.specs.push((name, shape.to_vec(), init));
        self.specs.len() - 1
    }
}

fn build(cfg: &DenoiserConfig) -> (Layout, Vec<(String, Vec<usize>, Init)>) {
    let d = cfg.time_embed_dim;
    let c = cfg.hidden_channels;
    let cl = cfg.latent_channels;
    let dc = cfg.cond_dim();
    let mut b = Builder { specs: Vec::new() };

    let guidance_proj = b.add("time.guidance_proj".into(), &[d, d], Init::Normal { fan_in: d, gain: 0.5 });
    let boundary_proj = b.add("time.boundary_proj".into(), &[d, d], Init::Normal { fan_in: d, gain: 0.5 });
    let time_w = b.add("time.mlp.weight".into(), &[d, d], Init::Normal { fan_in: d, gain: 1.0 });
    let time_b = b.add("time.mlp.bias".into(), &[d], Init::Zeros);
    let input_w = b.add("input.weight".into(), &[c, cfg.input_channels()], Init::Normal {
        fan_in: cfg.input_channels(),
        gain: 1.0,
    });
    let input_b = b.add("input.bias".into(), &[c], Init::Zeros);
    let blocks = (0..cfg.num_blocks)
        .map(|i| BlockLayout {
            pw1_w: b.add(format!("block{i}.pw1.weight"), &[c, c], Init::Normal { fan_in: c, gain: 1.0 }),
            pw1_b: b.add(format!("block{i}.pw1.bias"), &[c], Init::Zeros),
            film_w: b.add(format!("block{i}.film.weight"), &[2 * c, d], Init::Normal { fan_in: d, gain: 0.3 }),
            film_b: b.add(format!("block{i}.film.bias"), &[2 * c], Init::Zeros),
            cond_w: b.add(format!("block{i}.cond.weight"), &[c, dc], Init::Normal {
                fan_in: dc.max(1),
                gain: 1.0,
            }),
            cond_b: b.add(format!("block{i}.cond.bias"), &[c], Init::Zeros),
            gate: b.add(format!("block{i}.cond.gate"), &[c], Init::Const(0.5)),
            spatial: b.add(format!("block{i}.spatial.weight"), &[c, 3, 3], Init::CentredKernel {
                taps: 9,
                noise: 0.2,
            }),
            temporal: b.add(format!("block{i}.temporal.weight"), &[c, cfg.temporal_kernel], Init::CentredKernel {
                taps: cfg.temporal_kernel,
                noise: 0.2,
            }),
            pw2_w: b.add(format!("block{i}.pw2.weight"), &[c, c], Init::Normal { fan_in: c, gain: 0.5 }),
            pw2_b: b.add(format!("block{i}.pw2.bias"), &[c], Init::Zeros),
        })
        .collect();
    let output_w = b.add("output.weight".into(), &[cl, c], Init::Normal { fan_in: c, gain: 0.3 });
    let output_b = b.add("output.bias".into(), &[cl], Init::Zeros);
    let aux_w = b.add("aux_head.weight".into(), &[cl, c], Init::Zeros);
    let aux_b = b.add("aux_head.bias".into(), &[cl], Init::Zeros);
    let layout = Layout {
        guidance_proj,
        boundary_proj,
        time_w,
        time_b,
        input_w,
        input_b,
        blocks,
        output_w,
        output_b,
        aux_w,
        aux_b,
    };
    (layout, b.specs)
}

/// Closed-form parameter count for a config.
pub fn parameter_count(cfg: &DenoiserConfig) -> usize {
    let d = cfg.time_embed_dim;
    let c = cfg.hidden_channels;
    let cl = cfg.latent_channels;
    let dc = cfg.cond_dim();
    let time = 3 * d * d + d;
    let input = c * cfg.input_channels() + c;
    let block = (c * c + c) // pw1
        + (2 * c * d + 2 * c) // film
        + (c * dc + c + c) // cond weight, bias, gate
        + 9 * c
        + cfg.temporal_kernel * c
        + (c * c + c); // pw2
    let heads = 2 * (cl * c + cl);
    time + input + cfg.num_blocks * block + heads
}

/// Deterministic initialization from `seed`.
pub fn init_model(cfg: &DenoiserConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let (layout, specs) = build(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::with_capacity(specs.len());
    let mut tensors = Vec::with_capacity(specs.len());
    for (name, shape, init) in specs {
        let mut t = Tensor::zeros(&shape);
        match init {
            Init::Zeros => {}
            Init::Const(v) => t.data_mut().fill(v),
            Init::Normal { fan_in, gain } => {
                let std = gain / (fan_in as f64).sqrt();
                for v in t.data_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = std * z;
                }
            }
            Init::CentredKernel { taps, noise } => {
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = noise * z / (taps as f64).sqrt() + if i % taps == taps / 2 { 1.0 } else { 0.0 };
                }
            }
        }
        names.push(name);
        tensors.push(t);
    }
    Ok(ModelParams {
        config: cfg.clone(),
        names,
        tensors,
        layout,
    })
}

impl ModelParams {
    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub(crate) fn at(&self, i: usize) -> &[f64] {
        self.tensors[i].data()
    }

    pub(crate) fn at_mut(&mut self, i: usize) -> &mut [f64] {
        self.tensors[i].data_mut()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Same names and shapes, all zeros (gradient buffers, optimizer moments).
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn check_compatible(&self, other: &ModelParams) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Argument("parameter sets have different array names".into()));
        }
        for (name, (a, b)) in self.names.iter().zip(self.tensors.iter().zip(&other.tensors)) {
            if a.shape() != b.shape() {
                return Err(Error::Argument(format!(
                    "array `{name}` shape mismatch {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Rebuilds parameters from named arrays, validating against the config's layout.
    pub fn from_named(config: DenoiserConfig, arrays: Vec<(String, Tensor)>) -> Result<ModelParams> {
        config.validate()?;
        let (layout, specs) = build(&config);
        if specs.len() != arrays.len() {
            return Err(Error::Argument(format!(
                "expected {} arrays, got {}",
                specs.len(),
                arrays.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for ((name, shape, _), (got_name, t)) in specs.into_iter().zip(arrays) {
            if name != got_name || shape != t.shape() {
                return Err(Error::Argument(format!(
                    "array `{got_name}` {:?} does not match expected `{name}` {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(ModelParams {
            config,
            names,
            tensors,
            layout,
        })
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().fill(0.0);
        }
    }
}
