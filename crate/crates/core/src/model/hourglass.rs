use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::layers::{self, LayerCtx, Streams};
use crate::model::params::{BoundParams, ModelParameters};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Per-scale bookkeeping of one forward pass.
#[derive(Clone, Debug)]
pub struct ScaleTrace {
    /// Encoder lengths, finest scale first.
    pub encoder_lengths: Vec<usize>,
    /// Decoder lengths in processing order, coarsest first.
    pub decoder_lengths: Vec<usize>,
    /// Last encoder layer output at each scale, finest first.
    pub encoder_outputs: Vec<Streams>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[N, F, 1]`, normalized target units.
    pub y_hat: Var,
    pub trace: ScaleTrace,
    /// Attention-weight matrices of every layer, `[B, Lq, Lk]` each.
    pub attention: Vec<Var>,
}

/// An HSTTN instance for one validated configuration.
#[derive(Clone, Debug)]
pub struct Hsttn {
    config: ModelConfig,
}

/// Builds the model for any structural variant expressed by `config`.
pub fn make_variant(config: ModelConfig) -> Result<Hsttn> {
    config.validate()?;
    Ok(Hsttn { config })
}

impl Hsttn {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn init_params(&self, rng: &mut RngStream) -> ModelParameters {
        ModelParameters::init(&self.config, rng)
    }

    /// Forecast `[N, F, 1]` from `history` (`[N, H, C]`) covering the `H`
    /// steps just before timestamp `origin`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        history: &Tensor,
        origin: usize,
        training: bool,
        rng: &mut RngStream,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        let (h, f) = (cfg.history_len, cfg.horizon_len);
        if origin < h {
            return Err(Error::Contract(format!("origin {origin} leaves fewer than {h} history steps")));
        }
        if history.shape() != [cfg.n_turbines, h, cfg.n_channels] {
            return Err(Error::shape(format!(
                "history {:?}, expected [{}, {h}, {}]",
                history.shape(),
                cfg.n_turbines,
                cfg.n_channels
            )));
        }
        let hist_ts: Vec<usize> = (origin - h..origin).collect();
        let fut_ts: Vec<usize> = (origin..origin + f).collect();

        let mut attention = Vec::new();
        let mut ctx = LayerCtx { cfg, params, attention: &mut attention };
        let scales = cfg.n_scales();

        let x = tape.constant(history.clone());
        let mut state = Streams::shared(layers::embed_inputs(tape, x, &hist_ts, &ctx)?);
        let mut enc_outputs = Vec::with_capacity(scales);
        let mut enc_lengths = Vec::with_capacity(scales);
        for s in 0..scales {
            for l in 0..cfg.layers_encoder {
                state = layers::rstel(tape, state, &format!("enc.s{s}.l{l}"), &mut ctx)?;
            }
            enc_outputs.push(state);
            enc_lengths.push(tape.shape(state.tem)[1]);
            if s + 1 < scales {
                let p = cfg.pool_factors[s];
                state = state.map(tape, |tape, v| tape.maxpool1d(v, p))?;
            }
        }

        let dec_x = tape.constant(layers::build_decoder_input(cfg, &fut_ts)?);
        let mut dec = layers::embed_inputs(tape, dec_x, &fut_ts, &ctx)?;
        if cfg.total_pool() > 1 {
            dec = tape.maxpool1d(dec, cfg.total_pool())?;
        }
        let mut state = Streams::shared(dec);
        let mut dec_lengths = Vec::with_capacity(scales);
        for s in (0..scales).rev() {
            let enc = *enc_outputs
                .get(s)
                .ok_or_else(|| Error::Contract(format!("no encoder output retained for scale {s}")))?;
            for l in 0..cfg.layers_decoder {
                state = layers::rstdl(tape, state, enc, &format!("dec.s{s}.l{l}"), &mut ctx)?;
            }
            dec_lengths.push(tape.shape(state.tem)[1]);
            if s > 0 {
                if cfg.use_skip {
                    let tem = tape.concat(&[state.tem, enc.tem], 2)?;
                    let spa = if state.is_shared() && enc.is_shared() {
                        tem
                    } else {
                        tape.concat(&[state.spa, enc.spa], 2)?
                    };
                    state = Streams { tem, spa };
                }
                let p = cfg.pool_factors[s - 1];
                let w = params.get(&format!("dec.up{s}.w"))?;
                let b = params.get(&format!("dec.up{s}.b"))?;
                state = state.map(tape, |tape, v| tape.upconv1d(v, p, w, b))?;
            }
        }

        let enc_final = enc_outputs[0].merged(tape)?;
        let dec_final = state.merged(tape)?;
        let o_orign = tape.concat(&[enc_final, dec_final], 2)?;
        let y_hat = layers::regress(tape, o_orign, training, rng, &ctx)?;
        Ok(ForwardOutput {
            y_hat,
            trace: ScaleTrace { encoder_lengths: enc_lengths, decoder_lengths: dec_lengths, encoder_outputs: enc_outputs },
            attention,
        })
    }

    /// Evaluation-mode forecast on a private tape.
    pub fn predict(&self, params: &ModelParameters, history: &Tensor, origin: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let mut rng = RngStream::new(0);
        let out = self.forward(&mut tape, &bound, history, origin, false, &mut rng)?;
        Ok(tape.value(out.y_hat).clone())
    }
}
