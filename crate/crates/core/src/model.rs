//! The encoder-attention-decoder translation model.
//!
//! Source tokens are embedded and run through a stack of LSTM layers. The
//! decoder stack starts from the encoder's final states (layer by layer) and
//! at each step consumes `[embed(previous token); previous attentional
//! state]`. Its top hidden state attends over all encoder states and is
//! combined with the context into the attentional state, which is projected
//! onto the target vocabulary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend_backward_row, context_row, weights_row, AttentionMode, AttentionWeights};
use crate::data::{Batch, TokenId};
use crate::error::{Error, Result};
use crate::math::{gemm, log_sum_exp, softmax_in_place, ParamSet, Parameter, Tensor};
use crate::rnn::{stack_step, stack_step_backward, LstmCellParams, LstmState, StackStepCache, StateGrad, INIT_RANGE};

pub const DEFAULT_EMBED_DIM: usize = 128;
pub const DEFAULT_HIDDEN: usize = 128;
pub const DEFAULT_LAYERS: usize = 2;
pub const DEFAULT_MAX_DECODE_LEN: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub max_decode_len: usize,
    pub attention: AttentionMode,
}

impl ModelConfig {
    pub fn new(src_vocab_size: usize, tgt_vocab_size: usize) -> Self {
        ModelConfig {
            src_vocab_size,
            tgt_vocab_size,
            embed_dim: DEFAULT_EMBED_DIM,
            hidden: DEFAULT_HIDDEN,
            layers: DEFAULT_LAYERS,
            max_decode_len: DEFAULT_MAX_DECODE_LEN,
            attention: AttentionMode::Dot,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("src_vocab_size", self.src_vocab_size),
            ("tgt_vocab_size", self.tgt_vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("max_decode_len", self.max_decode_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Contract(format!("model config field {name} must be positive")));
            }
        }
        Ok(())
    }

    /// Expected `(name, shape)` of every parameter, in [`ParamSet`] order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (e, h) = (self.embed_dim, self.hidden);
        let mut out = vec![
            ("src_embedding".to_string(), vec![self.src_vocab_size, e]),
            ("tgt_embedding".to_string(), vec![self.tgt_vocab_size, e]),
        ];
        let mut lstm = |prefix: &str, first_input: usize| {
            for l in 0..self.layers {
                let input = if l == 0 { first_input } else { h };
                out.push((format!("{prefix}.{l}.w"), vec![4 * h, input]));
                out.push((format!("{prefix}.{l}.u"), vec![4 * h, h]));
                out.push((format!("{prefix}.{l}.b"), vec![4 * h]));
            }
        };
        lstm("encoder", e);
        lstm("decoder", e + h);
        out.push(("attention.w_c".to_string(), vec![h, 2 * h]));
        out.push(("output.w".to_string(), vec![self.tgt_vocab_size, h]));
        out.push(("output.b".to_string(), vec![self.tgt_vocab_size]));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub src_embedding: Parameter,
    pub tgt_embedding: Parameter,
    pub encoder: Vec<LstmCellParams>,
    pub decoder: Vec<LstmCellParams>,
    /// `[h × 2h]`, applied to `[context; decoder_h]`.
    pub w_c: Parameter,
    pub w_out: Parameter,
    pub b_out: Parameter,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (e, h) = (config.embed_dim, config.hidden);
        let stack = |prefix: &str, first: usize| -> Vec<LstmCellParams> {
            (0..config.layers)
                .map(|l| LstmCellParams::zeros(&format!("{prefix}.{l}"), if l == 0 { first } else { h }, h))
                .collect()
        };
        ModelParams {
            src_embedding: Parameter::new("src_embedding", Tensor::zeros(&[config.src_vocab_size, e])),
            tgt_embedding: Parameter::new("tgt_embedding", Tensor::zeros(&[config.tgt_vocab_size, e])),
            encoder: stack("encoder", e),
            decoder: stack("decoder", e + h),
            w_c: Parameter::new("attention.w_c", Tensor::zeros(&[h, 2 * h])),
            w_out: Parameter::new("output.w", Tensor::zeros(&[config.tgt_vocab_size, h])),
            b_out: Parameter::new("output.b", Tensor::zeros(&[config.tgt_vocab_size])),
        }
    }

    /// Seeded initialization: all weights uniform in ±0.08, LSTM forget-gate
    /// biases 1, every other bias 0.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(config);
        let (e, h) = (config.embed_dim, config.hidden);
        let fill = |param: &mut Parameter, rng: &mut ChaCha8Rng| {
            for v in param.value.data_mut() {
                *v = rng.gen_range(-INIT_RANGE..INIT_RANGE);
            }
        };
        fill(&mut p.src_embedding, &mut rng);
        fill(&mut p.tgt_embedding, &mut rng);
        for l in 0..config.layers {
            let input = if l == 0 { e } else { h };
            p.encoder[l] = LstmCellParams::init(&format!("encoder.{l}"), input, h, &mut rng);
        }
        for l in 0..config.layers {
            let input = if l == 0 { e + h } else { h };
            p.decoder[l] = LstmCellParams::init(&format!("decoder.{l}"), input, h, &mut rng);
        }
        fill(&mut p.w_c, &mut rng);
        fill(&mut p.w_out, &mut rng);
        p
    }

    /// Checks every tensor's name and shape against `config`.
    pub fn shape_audit(&self, config: &ModelConfig) -> Result<()> {
        let want = config.param_shapes();
        let got = self.params();
        if want.len() != got.len() {
            return Err(Error::Schema(format!(
                "{} parameters present, config implies {}",
                got.len(),
                want.len()
            )));
        }
        for ((name, shape), p) in want.iter().zip(got) {
            if &p.name != name || p.shape() != shape.as_slice() || p.grad.shape() != shape.as_slice() {
                return Err(Error::Schema(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    p.name,
                    p.shape()
                )));
            }
        }
        Ok(())
    }
}

impl ParamSet for ModelParams {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.src_embedding, &self.tgt_embedding];
        for l in self.encoder.iter().chain(&self.decoder) {
            out.extend(l.params());
        }
        out.extend([&self.w_c, &self.w_out, &self.b_out]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.src_embedding, &mut self.tgt_embedding];
        for l in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.extend(l.params_mut());
        }
        out.extend([&mut self.w_c, &mut self.w_out, &mut self.b_out]);
        out
    }
}

/// Encoder result for one source sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// Top-layer hidden state per source position, `[src_len × hidden]`.
    pub states: Tensor,
    /// Final `(h, c)` of every encoder layer.
    pub finals: Vec<LstmState>,
    pub mask: Vec<bool>,
}

/// Recurrent decoder state of one hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub layers: Vec<LstmState>,
    /// Attentional state from the previous step, fed back as input.
    pub attentional: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub logits: Tensor,
    pub state: DecoderState,
    pub weights: AttentionWeights,
}

/// Summed loss over a batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossStats {
    /// Σ token negative log-likelihoods.
    pub total: f64,
    pub tokens: usize,
}

impl LossStats {
    pub fn mean(&self) -> f64 {
        self.total / self.tokens as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TranslationModel {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Output-layer logits `W_out · att + b_out` for `batch` rows.
fn project(params: &ModelParams, cfg: &ModelConfig, attentional: &[f64], batch: usize) -> Vec<f64> {
    let (h, v) = (cfg.hidden, cfg.tgt_vocab_size);
    let mut logits = vec![0.0; batch * v];
    for row in logits.chunks_mut(v) {
        row.copy_from_slice(params.b_out.value.data());
    }
    gemm(
        batch,
        h,
        v,
        attentional,
        false,
        params.w_out.value.data(),
        true,
        1.0,
        &mut logits,
    );
    logits
}

struct ForwardTrace {
    enc: EncodeTrace,
    steps: Vec<DecodeTrace>,
}

struct EncodeTrace {
    src_len: usize,
    /// `[batch × src_len × hidden]`
    states: Vec<f64>,
    /// `[batch × src_len]`
    mask: Vec<bool>,
    finals: Vec<LstmState>,
    steps: Vec<StackStepCache>,
    inputs: Vec<Vec<TokenId>>,
}

struct DecodeTrace {
    stack: StackStepCache,
    inputs: Vec<TokenId>,
    top: Vec<f64>,
    weights: Vec<f64>,
    cat: Vec<f64>,
    attentional: Vec<f64>,
    logits: Vec<f64>,
}

impl TranslationModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(TranslationModel {
            config,
            params: ModelParams::init(&config, seed),
        })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.shape_audit(&config)?;
        Ok(TranslationModel { config, params })
    }

    fn check_ids(ids: &[TokenId], size: usize, what: &'static str) -> Result<()> {
        match ids.iter().find(|&&id| id >= size) {
            Some(&index) => Err(Error::Index { what, index, size }),
            None => Ok(()),
        }
    }

    fn gather(table: &Tensor, ids: &[TokenId], width: usize, out: &mut Vec<f64>) {
        for &id in ids {
            out.extend_from_slice(&table.data()[id * width..(id + 1) * width]);
        }
    }

    fn encode_batch(&self, src: &[TokenId], lengths: &[usize], src_len: usize) -> EncodeTrace {
        let (e, h) = (self.config.embed_dim, self.config.hidden);
        let batch = lengths.len();
        let mut states_t = vec![LstmState::zeros_batch(batch, h); self.config.layers];
        let mut out = vec![0.0; batch * src_len * h];
        let mut steps = Vec::with_capacity(src_len);
        let mut inputs = Vec::with_capacity(src_len);
        let mask: Vec<bool> = (0..batch)
            .flat_map(|b| (0..src_len).map(move |t| t < lengths[b]))
            .collect();
        for t in 0..src_len {
            let ids: Vec<TokenId> = (0..batch).map(|b| src[b * src_len + t]).collect();
            let active: Vec<bool> = (0..batch).map(|b| mask[b * src_len + t]).collect();
            let mut x = Vec::with_capacity(batch * e);
            Self::gather(&self.params.src_embedding.value, &ids, e, &mut x);
            steps.push(stack_step(
                &self.params.encoder,
                &x,
                &mut states_t,
                batch,
                Some(&active),
            ));
            let top = states_t.last().unwrap().h.data();
            for b in 0..batch {
                out[(b * src_len + t) * h..][..h].copy_from_slice(&top[b * h..(b + 1) * h]);
            }
            inputs.push(ids);
        }
        EncodeTrace {
            src_len,
            states: out,
            mask,
            finals: states_t,
            steps,
            inputs,
        }
    }

    /// One decoder step for a batch of rows that attend over `enc_states`
    /// (`[batch × src_len × hidden]`).
    #[allow(clippy::too_many_arguments)]
    fn decode_batch_step(
        &self,
        inputs: &[TokenId],
        attentional: &[f64],
        states: &mut [LstmState],
        enc_states: &[f64],
        mask: &[bool],
        src_len: usize,
    ) -> DecodeTrace {
        let (e, h, v) = (self.config.embed_dim, self.config.hidden, self.config.tgt_vocab_size);
        let batch = inputs.len();
        let mut x = Vec::with_capacity(batch * (e + h));
        for (b, &id) in inputs.iter().enumerate() {
            x.extend_from_slice(&self.params.tgt_embedding.value.data()[id * e..(id + 1) * e]);
            x.extend_from_slice(&attentional[b * h..(b + 1) * h]);
        }
        let stack = stack_step(&self.params.decoder, &x, states, batch, None);
        let top = states.last().unwrap().h.data().to_vec();

        let mut weights = vec![0.0; batch * src_len];
        let mut cat = vec![0.0; batch * 2 * h];
        for b in 0..batch {
            let enc = &enc_states[b * src_len * h..(b + 1) * src_len * h];
            let w = &mut weights[b * src_len..(b + 1) * src_len];
            let hb = &top[b * h..(b + 1) * h];
            weights_row(hb, enc, &mask[b * src_len..(b + 1) * src_len], self.config.attention, w);
            let row = &mut cat[b * 2 * h..(b + 1) * 2 * h];
            context_row(w, enc, &mut row[..h]);
            row[h..].copy_from_slice(hb);
        }
        let mut att = vec![0.0; batch * h];
        gemm(
            batch,
            2 * h,
            h,
            &cat,
            false,
            self.params.w_c.value.data(),
            true,
            0.0,
            &mut att,
        );
        att.iter_mut().for_each(|a| *a = a.tanh());
        let logits = project(&self.params, &self.config, &att, batch);
        debug_assert_eq!(logits.len(), batch * v);
        DecodeTrace {
            stack,
            inputs: inputs.to_vec(),
            top,
            weights,
            cat,
            attentional: att,
            logits,
        }
    }

    /// Encodes one source sentence.
    pub fn encode(&self, source_ids: &[TokenId]) -> Result<EncoderOutput> {
        if source_ids.is_empty() {
            return Err(Error::dim("empty source sentence"));
        }
        Self::check_ids(source_ids, self.config.src_vocab_size, "source token id")?;
        let n = source_ids.len();
        let trace = self.encode_batch(source_ids, &[n], n);
        let h = self.config.hidden;
        let finals = trace
            .finals
            .into_iter()
            .map(|s| LstmState {
                h: Tensor::new(&[h], s.h.into_data()).unwrap(),
                c: Tensor::new(&[h], s.c.into_data()).unwrap(),
            })
            .collect();
        Ok(EncoderOutput {
            states: Tensor::new(&[n, h], trace.states)?,
            finals,
            mask: trace.mask,
        })
    }

    /// Decoder state before the first step: encoder finals, zero attentional.
    pub fn initial_decoder_state(&self, enc: &EncoderOutput) -> DecoderState {
        DecoderState {
            layers: enc.finals.clone(),
            attentional: Tensor::zeros(&[self.config.hidden]),
        }
    }

    /// One decoder step for a single hypothesis.
    pub fn decode_step(&self, prev_token: TokenId, state: &DecoderState, enc: &EncoderOutput) -> Result<StepOutput> {
        Self::check_ids(&[prev_token], self.config.tgt_vocab_size, "target token id")?;
        let h = self.config.hidden;
        let (src_len, _) = enc.states.dims2()?;
        let mut layers = state.layers.clone();
        let trace = self.decode_batch_step(
            &[prev_token],
            state.attentional.data(),
            &mut layers,
            enc.states.data(),
            &enc.mask,
            src_len,
        );
        Ok(StepOutput {
            logits: Tensor::vector(trace.logits)?,
            state: DecoderState {
                layers,
                attentional: Tensor::new(&[h], trace.attentional)?,
            },
            weights: AttentionWeights(Tensor::vector(trace.weights)?),
        })
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        Self::check_ids(&batch.source_ids, self.config.src_vocab_size, "source token id")?;
        Self::check_ids(&batch.target_ids, self.config.tgt_vocab_size, "target token id")?;
        if batch.source_lengths.contains(&0) || batch.target_lengths.iter().any(|&l| l < 2) {
            return Err(Error::Contract(
                "batch rows need a non-empty source and BOS/EOS target".into(),
            ));
        }
        Ok(())
    }

    /// Teacher-forced summed loss over the batch, without gradients.
    pub fn forward_loss(&self, batch: &Batch) -> Result<LossStats> {
        self.check_batch(batch)?;
        Ok(self.forward(batch, false).0)
    }

    /// Teacher-forced loss; accumulates the gradient of the *mean* token loss
    /// into the parameters.
    pub fn forward_backward(&mut self, batch: &Batch) -> Result<LossStats> {
        self.check_batch(batch)?;
        let (stats, trace) = self.forward(batch, true);
        self.backward(batch, trace.unwrap(), stats.tokens);
        Ok(stats)
    }

    fn forward(&self, batch: &Batch, keep_trace: bool) -> (LossStats, Option<ForwardTrace>) {
        let (h, v) = (self.config.hidden, self.config.tgt_vocab_size);
        let b_n = batch.len();
        let s_len = batch.max_src_len;
        let enc = self.encode_batch(&batch.source_ids, &batch.source_lengths, s_len);

        let mut states = enc.finals.clone();
        let mut attentional = vec![0.0; b_n * h];
        let steps = batch.max_tgt_len - 1;
        let mut total = 0.0;
        let mut traces = Vec::with_capacity(if keep_trace { steps } else { 0 });
        for t in 0..steps {
            let inputs: Vec<TokenId> = (0..b_n).map(|b| batch.target_row(b)[t]).collect();
            let trace = self.decode_batch_step(&inputs, &attentional, &mut states, &enc.states, &enc.mask, s_len);
            for b in 0..b_n {
                if t + 1 < batch.target_lengths[b] {
                    let gold = batch.target_row(b)[t + 1];
                    let row = &trace.logits[b * v..(b + 1) * v];
                    total += log_sum_exp(row) - row[gold];
                }
            }
            attentional.copy_from_slice(&trace.attentional);
            if keep_trace {
                // logits are recomputed in the backward pass
                traces.push(DecodeTrace {
                    logits: Vec::new(),
                    ..trace
                });
            }
        }
        let stats = LossStats {
            total,
            tokens: batch.predicted_tokens(),
        };
        (stats, keep_trace.then_some(ForwardTrace { enc, steps: traces }))
    }

    fn backward(&mut self, batch: &Batch, trace: ForwardTrace, tokens: usize) {
        let cfg = self.config;
        let (e, h, v) = (cfg.embed_dim, cfg.hidden, cfg.tgt_vocab_size);
        let b_n = batch.len();
        let ForwardTrace { enc, steps } = trace;
        let s_len = enc.src_len;
        let scale = 1.0 / tokens as f64;
        let p = &mut self.params;

        let mut dec_grads: Vec<StateGrad> = (0..cfg.layers).map(|_| StateGrad::zeros(b_n * h)).collect();
        let mut d_enc = vec![0.0; b_n * s_len * h];
        let mut d_att_next = vec![0.0; b_n * h];
        for (t, tr) in steps.iter().enumerate().rev() {
            let mut d_logits = project(p, &cfg, &tr.attentional, b_n);
            for b in 0..b_n {
                let row = &mut d_logits[b * v..(b + 1) * v];
                if t + 1 < batch.target_lengths[b] {
                    softmax_in_place(row);
                    row[batch.target_row(b)[t + 1]] -= 1.0;
                    row.iter_mut().for_each(|d| *d *= scale);
                } else {
                    row.fill(0.0);
                }
            }
            gemm(
                v,
                b_n,
                h,
                &d_logits,
                true,
                &tr.attentional,
                false,
                1.0,
                p.w_out.grad.data_mut(),
            );
            for row in d_logits.chunks(v) {
                for (db, d) in p.b_out.grad.data_mut().iter_mut().zip(row) {
                    *db += d;
                }
            }
            let mut d_att = std::mem::take(&mut d_att_next);
            gemm(
                b_n,
                v,
                h,
                &d_logits,
                false,
                p.w_out.value.data(),
                false,
                1.0,
                &mut d_att,
            );
            for (d, a) in d_att.iter_mut().zip(&tr.attentional) {
                *d *= 1.0 - a * a;
            }
            gemm(h, b_n, 2 * h, &d_att, true, &tr.cat, false, 1.0, p.w_c.grad.data_mut());
            let mut d_cat = vec![0.0; b_n * 2 * h];
            gemm(b_n, h, 2 * h, &d_att, false, p.w_c.value.data(), false, 0.0, &mut d_cat);

            let mut d_top = vec![0.0; b_n * h];
            for b in 0..b_n {
                let d_row = &d_cat[b * 2 * h..(b + 1) * 2 * h];
                d_top[b * h..(b + 1) * h].copy_from_slice(&d_row[h..]);
                let span = b * s_len * h..(b + 1) * s_len * h;
                attend_backward_row(
                    &tr.top[b * h..(b + 1) * h],
                    &enc.states[span.clone()],
                    &tr.weights[b * s_len..(b + 1) * s_len],
                    &d_row[..h],
                    cfg.attention,
                    &mut d_top[b * h..(b + 1) * h],
                    &mut d_enc[span],
                );
            }
            let dx = stack_step_backward(&mut p.decoder, &tr.stack, &d_top, &mut dec_grads);
            d_att_next = vec![0.0; b_n * h];
            for (b, &id) in tr.inputs.iter().enumerate() {
                let row = &dx[b * (e + h)..(b + 1) * (e + h)];
                let grad = &mut p.tgt_embedding.grad.data_mut()[id * e..(id + 1) * e];
                for (g, d) in grad.iter_mut().zip(&row[..e]) {
                    *g += d;
                }
                d_att_next[b * h..(b + 1) * h].copy_from_slice(&row[e..]);
            }
        }

        // The decoder started from the encoder finals, so their gradients
        // seed the encoder's backward pass.
        let mut enc_grads = dec_grads;
        for t in (0..s_len).rev() {
            let mut d_top = vec![0.0; b_n * h];
            for b in 0..b_n {
                d_top[b * h..(b + 1) * h].copy_from_slice(&d_enc[(b * s_len + t) * h..][..h]);
            }
            let dx = stack_step_backward(&mut p.encoder, &enc.steps[t], &d_top, &mut enc_grads);
            for (b, &id) in enc.inputs[t].iter().enumerate() {
                if !enc.mask[b * s_len + t] {
                    continue;
                }
                let grad = &mut p.src_embedding.grad.data_mut()[id * e..(id + 1) * e];
                for (g, d) in grad.iter_mut().zip(&dx[b * e..(b + 1) * e]) {
                    *g += d;
                }
            }
        }
    }

    /// Log-probability of `target` (EOS included if present) given `source`,
    /// by teacher-forced decoding.
    pub fn score(&self, source: &[TokenId], target: &[TokenId]) -> Result<f64> {
        let enc = self.encode(source)?;
        let mut state = self.initial_decoder_state(&enc);
        let mut prev = crate::data::BOS;
        let mut total = 0.0;
        for &tok in target {
            let step = self.decode_step(prev, &state, &enc)?;
            Self::check_ids(&[tok], self.config.tgt_vocab_size, "target token id")?;
            total += step.logits.data()[tok] - log_sum_exp(step.logits.data());
            state = step.state;
            prev = tok;
        }
        Ok(total)
    }
}

impl ParamSet for TranslationModel {
    fn params(&self) -> Vec<&Parameter> {
        self.params.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.params.params_mut()
    }
}
