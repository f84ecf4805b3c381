use indexmap::IndexMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Xavier { fan_in: usize, fan_out: usize },
    Zero,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Which attention projections a layer owns.
pub(crate) const ENC_ATTN: [&str; 2] = ["tem", "spa"];
pub(crate) const DEC_ATTN: [&str; 4] = ["tem_self", "spa_self", "tem_cross", "spa_cross"];

fn attention_specs(cfg: &ModelConfig, prefix: &str, out: &mut Vec<ParamSpec>) {
    let d = cfg.d_model;
    let qk = cfg.n_heads * cfg.d_k;
    let v = cfg.n_heads * cfg.d_v;
    for (name, rows, cols) in [("wq", d, qk), ("wk", d, qk), ("wv", d, v), ("wo", v, d)] {
        out.push(ParamSpec {
            name: format!("{prefix}.{name}"),
            shape: vec![rows, cols],
            init: Init::Xavier { fan_in: rows, fan_out: cols },
        });
    }
}

fn branch_enabled(cfg: &ModelConfig, attn: &str) -> bool {
    if attn.starts_with("tem") {
        cfg.use_temporal_branch
    } else {
        cfg.use_spatial_branch
    }
}

fn layer_specs(cfg: &ModelConfig, prefix: &str, attns: &[&str], out: &mut Vec<ParamSpec>) {
    for attn in attns {
        if branch_enabled(cfg, attn) {
            attention_specs(cfg, &format!("{prefix}.{attn}"), out);
        }
    }
    if cfg.fuses() {
        let d = cfg.d_model;
        out.push(ParamSpec {
            name: format!("{prefix}.cfb.w"),
            shape: vec![2 * d, d],
            init: Init::Xavier { fan_in: 2 * d, fan_out: d },
        });
        out.push(ParamSpec { name: format!("{prefix}.cfb.b"), shape: vec![d], init: Init::Zero });
    }
}

/// Full parameter layout in a fixed order.
pub(crate) fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut out = vec![
        ParamSpec {
            name: "embed.w".into(),
            shape: vec![cfg.n_channels, d],
            init: Init::Xavier { fan_in: cfg.n_channels, fan_out: d },
        },
        ParamSpec { name: "embed.b".into(), shape: vec![d], init: Init::Zero },
        ParamSpec {
            name: "turbine.table".into(),
            shape: vec![cfg.n_turbines, d],
            init: Init::Xavier { fan_in: cfg.n_turbines, fan_out: d },
        },
    ];
    for s in 0..cfg.n_scales() {
        for l in 0..cfg.layers_encoder {
            layer_specs(cfg, &format!("enc.s{s}.l{l}"), &ENC_ATTN, &mut out);
        }
    }
    for s in (0..cfg.n_scales()).rev() {
        for l in 0..cfg.layers_decoder {
            layer_specs(cfg, &format!("dec.s{s}.l{l}"), &DEC_ATTN, &mut out);
        }
        if s > 0 {
            let p = cfg.pool_factors[s - 1];
            let d_in = if cfg.use_skip { 2 * d } else { d };
            out.push(ParamSpec {
                name: format!("dec.up{s}.w"),
                shape: vec![p, d_in, d],
                init: Init::Xavier { fan_in: d_in, fan_out: d },
            });
            out.push(ParamSpec { name: format!("dec.up{s}.b"), shape: vec![d], init: Init::Zero });
        }
    }
    out.push(ParamSpec {
        name: "head.w".into(),
        shape: vec![2 * d, 1],
        init: Init::Xavier { fan_in: 2 * d, fan_out: 1 },
    });
    out.push(ParamSpec { name: "head.b".into(), shape: vec![1], init: Init::Zero });
    out
}

/// Named learnable tensors of one model, in layout order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParameters {
    tensors: IndexMap<String, Tensor>,
}

impl ModelParameters {
    pub fn init(cfg: &ModelConfig, rng: &mut RngStream) -> Self {
        let tensors = layout(cfg)
            .into_iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let data = match spec.init {
                    Init::Zero => vec![0.0; n],
                    Init::Xavier { fan_in, fan_out } => {
                        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        (0..n).map(|_| rng.uniform_range(-bound, bound)).collect()
                    }
                };
                (spec.name, Tensor::new(&spec.shape, data).expect("layout shape"))
            })
            .collect();
        ModelParameters { tensors }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let tensors = layout(cfg).into_iter().map(|s| (s.name, Tensor::zeros(&s.shape))).collect();
        ModelParameters { tensors }
    }

    /// Builds a parameter set from named tensors, checking names and shapes
    /// against the layout of `cfg`.
    pub fn from_named(cfg: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let specs = layout(cfg);
        if specs.len() != named.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                named.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(&named) {
            if &spec.name != name || spec.shape != t.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` {:?} does not match layout entry `{}` {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
        }
        Ok(ModelParameters { tensors: named.into_iter().collect() })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Records every tensor on `tape`, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Names handles already recorded on a tape, given in layout order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundParams> {
        if vars.len() != self.tensors.len() {
            return Err(Error::Contract(format!("{} handles for {} parameters", vars.len(), self.tensors.len())));
        }
        Ok(BoundParams { vars: self.tensors.keys().cloned().zip(vars.iter().copied()).collect() })
    }
}

/// Tape handles for a [`ModelParameters`] set.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` is not part of this model")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients in layout order, zeros for unreached parameters.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars
            .values()
            .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
            .collect()
    }
}
