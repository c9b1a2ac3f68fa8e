//! Global attention: dot-product scores of the decoder state against every
//! encoder state, a masked softmax, the weighted context vector, and the
//! attentional hidden state `tanh(W_c · [context; h])`.

use crate::error::{Error, Result};
use crate::math::{softmax_in_place, Tensor};

/// How alignment weights are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionMode {
    /// Softmax over dot-product scores.
    #[default]
    Dot,
    /// Equal weight on every unmasked position; an ablation baseline with no
    /// learned alignment.
    Uniform,
}

impl AttentionMode {
    pub fn code(self) -> u8 {
        match self {
            AttentionMode::Dot => 0,
            AttentionMode::Uniform => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(AttentionMode::Dot),
            1 => Some(AttentionMode::Uniform),
            _ => None,
        }
    }
}

/// A distribution over encoder timesteps; masked positions hold exactly 0.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights(pub Tensor);

impl AttentionWeights {
    pub fn as_slice(&self) -> &[f64] {
        self.0.data()
    }
}

/// Fills `out` with attention weights for one decoder state.
///
/// `enc` is `[src_len × hidden]` row-major; the caller guarantees at least one
/// unmasked position.
pub(crate) fn weights_row(h: &[f64], enc: &[f64], mask: &[bool], mode: AttentionMode, out: &mut [f64]) {
    let hs = h.len();
    match mode {
        AttentionMode::Dot => {
            for (j, w) in out.iter_mut().enumerate() {
                *w = if mask[j] {
                    enc[j * hs..(j + 1) * hs].iter().zip(h).map(|(a, b)| a * b).sum()
                } else {
                    f64::NEG_INFINITY
                };
            }
            softmax_in_place(out);
        }
        AttentionMode::Uniform => {
            let n = mask.iter().filter(|&&m| m).count() as f64;
            for (w, &m) in out.iter_mut().zip(mask) {
                *w = if m { 1.0 / n } else { 0.0 };
            }
        }
    }
}

pub(crate) fn context_row(weights: &[f64], enc: &[f64], out: &mut [f64]) {
    let hs = out.len();
    out.fill(0.0);
    for (j, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (o, e) in out.iter_mut().zip(&enc[j * hs..(j + 1) * hs]) {
            *o += w * e;
        }
    }
}

/// Backward through weights and context for one row. Gradients are
/// accumulated into `d_h` and `d_enc`.
pub(crate) fn attend_backward_row(
    h: &[f64],
    enc: &[f64],
    weights: &[f64],
    d_ctx: &[f64],
    mode: AttentionMode,
    d_h: &mut [f64],
    d_enc: &mut [f64],
) {
    let hs = h.len();
    let d_w: Vec<f64> = (0..weights.len())
        .map(|j| enc[j * hs..(j + 1) * hs].iter().zip(d_ctx).map(|(a, b)| a * b).sum())
        .collect();
    for (j, &w) in weights.iter().enumerate() {
        for (de, dc) in d_enc[j * hs..(j + 1) * hs].iter_mut().zip(d_ctx) {
            *de += w * dc;
        }
    }
    if mode == AttentionMode::Uniform {
        return;
    }
    let mean: f64 = weights.iter().zip(&d_w).map(|(w, d)| w * d).sum();
    for (j, &w) in weights.iter().enumerate() {
        let ds = w * (d_w[j] - mean);
        if ds == 0.0 {
            continue;
        }
        let e = &enc[j * hs..(j + 1) * hs];
        for k in 0..hs {
            d_h[k] += ds * e[k];
            d_enc[j * hs + k] += ds * h[k];
        }
    }
}

fn check_attend_inputs(decoder_h: &Tensor, encoder_states: &Tensor, mask: &[bool]) -> Result<usize> {
    let (src_len, hs) = encoder_states.dims2()?;
    if decoder_h.shape() != [hs] {
        return Err(Error::dim(format!(
            "decoder state {:?} vs encoder states {:?}",
            decoder_h.shape(),
            encoder_states.shape()
        )));
    }
    if mask.len() != src_len {
        return Err(Error::dim(format!(
            "mask length {} for {src_len} encoder states",
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Contract("every encoder position is masked".into()));
    }
    Ok(src_len)
}

/// Dot-product attention weights of `decoder_h` over `encoder_states`
/// (`[src_len × h]`). `mask[t]` is true for real positions.
pub fn attention_scores(decoder_h: &Tensor, encoder_states: &Tensor, mask: &[bool]) -> Result<AttentionWeights> {
    let src_len = check_attend_inputs(decoder_h, encoder_states, mask)?;
    let mut w = vec![0.0; src_len];
    weights_row(
        decoder_h.data(),
        encoder_states.data(),
        mask,
        AttentionMode::Dot,
        &mut w,
    );
    Ok(AttentionWeights(Tensor::vector(w)?))
}

/// Gradients of [`attention_scores`] with respect to the decoder state and
/// the encoder states, given the upstream gradient on the weights.
pub fn attention_scores_backward(
    decoder_h: &Tensor,
    encoder_states: &Tensor,
    weights: &AttentionWeights,
    d_weights: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (src_len, hs) = encoder_states.dims2()?;
    if weights.0.shape() != [src_len] || d_weights.shape() != [src_len] {
        return Err(Error::dim("weight gradient length does not match encoder states"));
    }
    let w = weights.as_slice();
    let mean: f64 = w.iter().zip(d_weights.data()).map(|(a, b)| a * b).sum();
    let mut d_h = Tensor::zeros(&[hs]);
    let mut d_enc = Tensor::zeros(&[src_len, hs]);
    for j in 0..src_len {
        let ds = w[j] * (d_weights.data()[j] - mean);
        for k in 0..hs {
            d_h.data_mut()[k] += ds * encoder_states.get(&[j, k]);
            d_enc.data_mut()[j * hs + k] += ds * decoder_h.data()[k];
        }
    }
    Ok((d_h, d_enc))
}

/// `Σ_t weights[t] · encoder_states[t]`.
pub fn context_vector(weights: &AttentionWeights, encoder_states: &Tensor) -> Result<Tensor> {
    let (src_len, hs) = encoder_states.dims2()?;
    if weights.0.len() != src_len {
        return Err(Error::dim(format!(
            "{} weights for {src_len} encoder states",
            weights.0.len()
        )));
    }
    let mut ctx = vec![0.0; hs];
    context_row(weights.as_slice(), encoder_states.data(), &mut ctx);
    Tensor::vector(ctx)
}

/// Gradients of [`context_vector`] with respect to weights and states.
pub fn context_vector_backward(
    weights: &AttentionWeights,
    encoder_states: &Tensor,
    d_context: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (src_len, hs) = encoder_states.dims2()?;
    if d_context.shape() != [hs] || weights.0.len() != src_len {
        return Err(Error::dim("context gradient does not match encoder states"));
    }
    let mut d_w = Tensor::zeros(&[src_len]);
    let mut d_enc = Tensor::zeros(&[src_len, hs]);
    for j in 0..src_len {
        for k in 0..hs {
            d_w.data_mut()[j] += encoder_states.get(&[j, k]) * d_context.data()[k];
            d_enc.data_mut()[j * hs + k] = weights.as_slice()[j] * d_context.data()[k];
        }
    }
    Ok((d_w, d_enc))
}

/// `tanh(W_c · [context; decoder_h])` with `W_c` of shape `[h × 2h]`.
pub fn attentional_hidden(decoder_h: &Tensor, context: &Tensor, w_c: &Tensor) -> Result<Tensor> {
    let hs = check_combine(decoder_h, context, w_c)?;
    let cat: Vec<f64> = context.data().iter().chain(decoder_h.data()).copied().collect();
    let out: Vec<f64> = (0..hs)
        .map(|i| w_c.row(i).iter().zip(&cat).map(|(a, b)| a * b).sum::<f64>().tanh())
        .collect();
    Tensor::vector(out)
}

fn check_combine(decoder_h: &Tensor, context: &Tensor, w_c: &Tensor) -> Result<usize> {
    let hs = decoder_h.len();
    if decoder_h.shape() != [hs] || context.shape() != [hs] || w_c.shape() != [hs, 2 * hs] {
        return Err(Error::dim(format!(
            "attentional combination of h {:?}, context {:?} with W_c {:?}",
            decoder_h.shape(),
            context.shape(),
            w_c.shape()
        )));
    }
    Ok(hs)
}

/// Gradients of [`attentional_hidden`]: `(d_decoder_h, d_context, d_w_c)`.
pub fn attentional_hidden_backward(
    decoder_h: &Tensor,
    context: &Tensor,
    w_c: &Tensor,
    output: &Tensor,
    d_output: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let hs = check_combine(decoder_h, context, w_c)?;
    if output.shape() != [hs] || d_output.shape() != [hs] {
        return Err(Error::dim("attentional output gradient shape"));
    }
    let cat: Vec<f64> = context.data().iter().chain(decoder_h.data()).copied().collect();
    let mut d_cat = vec![0.0; 2 * hs];
    let mut d_w = Tensor::zeros(&[hs, 2 * hs]);
    for i in 0..hs {
        let y = output.data()[i];
        let d_pre = d_output.data()[i] * (1.0 - y * y);
        for k in 0..2 * hs {
            d_w.data_mut()[i * 2 * hs + k] = d_pre * cat[k];
            d_cat[k] += d_pre * w_c.get(&[i, k]);
        }
    }
    let d_h = Tensor::vector(d_cat[hs..].to_vec())?;
    let d_ctx = Tensor::vector(d_cat[..hs].to_vec())?;
    Ok((d_h, d_ctx, d_w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{gradient_check, ParamSet, Parameter};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x.to_vec()).unwrap()
    }

    #[test]
    fn singleton_gets_all_weight() {
        let w = attention_scores(&v(&[0.3, -2.0]), &t2(&[vec![5.0, 1.0]]), &[true]).unwrap();
        assert_eq!(w.as_slice(), &[1.0]);
    }

    #[test]
    fn identical_states_get_uniform_weights() {
        let enc = t2(&[vec![0.2, 0.7], vec![0.2, 0.7], vec![0.2, 0.7]]);
        let w = attention_scores(&v(&[1.5, -0.5]), &enc, &[true; 3]).unwrap();
        for &x in w.as_slice() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn scores_one_and_three() {
        // h = (1, 0): scores are the first coordinates of the states.
        let enc = t2(&[vec![1.0, 9.0], vec![3.0, -4.0]]);
        let w = attention_scores(&v(&[1.0, 0.0]), &enc, &[true, true]).unwrap();
        let denom = 1f64.exp() + 3f64.exp();
        assert!((w.as_slice()[0] - 1f64.exp() / denom).abs() < 1e-15);
        assert!((w.as_slice()[1] - 3f64.exp() / denom).abs() < 1e-15);
    }

    #[test]
    fn masked_positions_are_exactly_zero() {
        let enc = t2(&[vec![1.0, 2.0], vec![100.0, 100.0], vec![-1.0, 0.5]]);
        let w = attention_scores(&v(&[1.0, 1.0]), &enc, &[true, false, true]).unwrap();
        assert_eq!(w.as_slice()[1], 0.0);
        assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let err = attention_scores(&v(&[1.0, 1.0]), &enc, &[false; 3]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn context_examples() {
        let enc = t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let ctx = context_vector(&AttentionWeights(v(&[1.0, 0.0])), &enc).unwrap();
        assert_eq!(ctx.data(), &[1.0, 2.0]);
        let same = t2(&[vec![0.5, -1.0], vec![0.5, -1.0]]);
        let ctx = context_vector(&AttentionWeights(v(&[0.5, 0.5])), &same).unwrap();
        assert_eq!(ctx.data(), &[0.5, -1.0]);
        assert!(context_vector(&AttentionWeights(v(&[1.0])), &enc).is_err());
    }

    #[test]
    fn random_context_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let enc = Tensor::uniform(&[3, 2], -3.0, 3.0, &mut rng);
        let w = v(&[0.2, 0.5, 0.3]);
        let ctx = context_vector(&AttentionWeights(w.clone()), &enc).unwrap();
        for k in 0..2 {
            let want: f64 = (0..3).map(|j| w.data()[j] * enc.get(&[j, k])).sum();
            assert!((ctx.data()[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn combiner_examples() {
        let h = v(&[0.4, -0.3]);
        let ctx = v(&[0.1, 0.9]);
        let out = attentional_hidden(&h, &ctx, &Tensor::zeros(&[2, 4])).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
        // h = 1, rows sum large and positive with positive inputs
        let out = attentional_hidden(&v(&[1.0]), &v(&[1.0]), &t2(&[vec![10.0, 10.0]])).unwrap();
        assert!(out.data()[0] > 0.999_999 && out.data()[0] <= 1.0);
        assert!(attentional_hidden(&h, &ctx, &Tensor::zeros(&[2, 2])).is_err());
    }

    /// Loss = ⟨r, tanh(W_c [ctx(h, E); h])⟩ with every input a parameter.
    #[test]
    fn attend_and_combine_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let hs = 3;
        let src = 4;
        let mask = [true, true, false, true];
        let mut params = vec![
            Parameter::new("h", Tensor::uniform(&[hs], -1.5, 1.5, &mut rng)),
            Parameter::new("enc", Tensor::uniform(&[src, hs], -1.5, 1.5, &mut rng)),
            Parameter::new("w_c", Tensor::uniform(&[hs, 2 * hs], -1.0, 1.0, &mut rng)),
        ];
        let r = Tensor::uniform(&[hs], -1.0, 1.0, &mut rng);
        let report = gradient_check(&mut params, 1e-5, |ps| {
            let (h, enc, wc) = (ps[0].value.clone(), ps[1].value.clone(), ps[2].value.clone());
            let w = attention_scores(&h, &enc, &mask).unwrap();
            let ctx = context_vector(&w, &enc).unwrap();
            let out = attentional_hidden(&h, &ctx, &wc).unwrap();
            let loss: f64 = out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();

            let (d_h1, d_ctx, d_wc) = attentional_hidden_backward(&h, &ctx, &wc, &out, &r).unwrap();
            let (d_w, d_enc1) = context_vector_backward(&w, &enc, &d_ctx).unwrap();
            let (d_h2, d_enc2) = attention_scores_backward(&h, &enc, &w, &d_w).unwrap();
            ps[0].grad.add_assign(&d_h1).unwrap();
            ps[0].grad.add_assign(&d_h2).unwrap();
            ps[1].grad.add_assign(&d_enc1).unwrap();
            ps[1].grad.add_assign(&d_enc2).unwrap();
            ps[2].grad.add_assign(&d_wc).unwrap();
            loss
        });
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert_eq!(params.num_values(), 3 + 12 + 18);
    }

    #[test]
    fn row_kernel_backward_matches_tensor_api() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let h = Tensor::uniform(&[3], -1.0, 1.0, &mut rng);
        let enc = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let d_ctx = Tensor::uniform(&[3], -1.0, 1.0, &mut rng);
        let mask = [true, false, true, true];
        let w = attention_scores(&h, &enc, &mask).unwrap();
        let (d_w, d_enc1) = context_vector_backward(&w, &enc, &d_ctx).unwrap();
        let (d_h, d_enc2) = attention_scores_backward(&h, &enc, &w, &d_w).unwrap();

        let mut rh = vec![0.0; 3];
        let mut renc = vec![0.0; 12];
        attend_backward_row(
            h.data(),
            enc.data(),
            w.as_slice(),
            d_ctx.data(),
            AttentionMode::Dot,
            &mut rh,
            &mut renc,
        );
        for k in 0..3 {
            assert!((rh[k] - d_h.data()[k]).abs() < 1e-14);
        }
        for k in 0..12 {
            assert!((renc[k] - d_enc1.data()[k] - d_enc2.data()[k]).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn distribution_bounds_and_permutation(
            seed in any::<u64>(),
            src in 1usize..7,
            perm_seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let hs = 3;
            let h = Tensor::uniform(&[hs], -4.0, 4.0, &mut rng);
            let enc = Tensor::uniform(&[src, hs], -4.0, 4.0, &mut rng);
            let mut mask: Vec<bool> = (0..src).map(|_| rand::Rng::gen_bool(&mut rng, 0.7)).collect();
            mask[0] = true;

            let w = attention_scores(&h, &enc, &mask).unwrap();
            prop_assert!(w.as_slice().iter().all(|&x| x >= 0.0));
            prop_assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for (x, &m) in w.as_slice().iter().zip(&mask) {
                if !m { prop_assert_eq!(*x, 0.0); }
            }
            let ctx = context_vector(&w, &enc).unwrap();
            for k in 0..hs {
                let col: Vec<f64> = (0..src).filter(|&j| mask[j]).map(|j| enc.get(&[j, k])).collect();
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(ctx.data()[k] >= lo - 1e-12 && ctx.data()[k] <= hi + 1e-12);
            }

            let mut perm: Vec<usize> = (0..src).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let penc = Tensor::from_rows(&perm.iter().map(|&j| enc.row(j).to_vec()).collect::<Vec<_>>()).unwrap();
            let pmask: Vec<bool> = perm.iter().map(|&j| mask[j]).collect();
            let pw = attention_scores(&h, &penc, &pmask).unwrap();
            for (i, &j) in perm.iter().enumerate() {
                prop_assert!((pw.as_slice()[i] - w.as_slice()[j]).abs() <= 1e-15);
            }
            let pctx = context_vector(&pw, &penc).unwrap();
            for k in 0..hs {
                prop_assert!((pctx.data()[k] - ctx.data()[k]).abs() <= 1e-12);
            }
        }
    }
}
