//! Character encoder and attention decoder.
//!
//! Gated-linear conv blocks with sqrt(0.5) residual scaling, a single
//! dot-product attention block with sinusoidal positional encodings on query
//! and key, reduction-factor mel output groups, and the monotonic-attention
//! stop rule in place of a learned "done" predictor.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::Hyperparameters;
use crate::error::VoxError;
use crate::matrix::Matrix;
use crate::params::{fan_in_matrix, ParamStore};
use crate::scalar::Scalar;
use crate::speaker::{init_bias_site, speaker_bias};
use crate::tape::{ConvPad, NodeId, Tape};

pub const RESIDUAL_SCALE: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Large negative logit used to mask attention outside the monotonic window.
const MASKED_LOGIT: f64 = -1e30;

pub fn init_seq2seq<F: Scalar>(
    params: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
    hp: &Hyperparameters,
    charset_size: usize,
) {
    let c = hp.encoder_channels;
    let a = hp.attention_channels;
    let d = hp.decoder_channels;
    let ed = hp.char_embedding_dim;
    let sd = hp.speaker_embedding_dim;
    let kw = hp.encoder_conv_width;

    params.insert("encoder.embed", fan_in_matrix(rng, charset_size, ed, ed));
    params.insert("encoder.in_w", fan_in_matrix(rng, ed, c, ed));
    params.insert("encoder.in_b", Matrix::zeros(1, c));
    for i in 0..hp.encoder_layers {
        params.insert(
            &format!("encoder.block{i}.w"),
            fan_in_matrix(rng, kw * c, 2 * c, kw * c),
        );
        params.insert(&format!("encoder.block{i}.b"), Matrix::zeros(1, 2 * c));
        init_bias_site(params, rng, &format!("encoder.block{i}"), sd, 2 * c);
    }
    params.insert("encoder.keys_w", fan_in_matrix(rng, c, a, c));
    params.insert("encoder.keys_b", Matrix::zeros(1, a));
    params.insert("encoder.vals_w", fan_in_matrix(rng, ed, a, ed));
    params.insert("encoder.vals_b", Matrix::zeros(1, a));

    let group = hp.reduction_factor * hp.n_mel_bands;
    let p0 = hp.decoder_prenet_channels[0];
    let p1 = hp.decoder_prenet_channels[1];
    assert_eq!(
        p1, d,
        "second prenet width must equal decoder_channels (feeds the conv stack)"
    );
    params.insert("decoder.prenet0_w", fan_in_matrix(rng, group, p0, group));
    params.insert("decoder.prenet0_b", Matrix::zeros(1, p0));
    params.insert("decoder.prenet1_w", fan_in_matrix(rng, p0, p1, p0));
    params.insert("decoder.prenet1_b", Matrix::zeros(1, p1));
    let dw = hp.decoder_conv_width;
    for i in 0..hp.decoder_layers {
        params.insert(
            &format!("decoder.block{i}.w"),
            fan_in_matrix(rng, dw * d, 2 * d, dw * d),
        );
        params.insert(&format!("decoder.block{i}.b"), Matrix::zeros(1, 2 * d));
        init_bias_site(params, rng, &format!("decoder.block{i}"), sd, 2 * d);
    }
    params.insert("decoder.query_w", fan_in_matrix(rng, d, a, d));
    params.insert("decoder.query_b", Matrix::zeros(1, a));
    params.insert("decoder.ctx_w", fan_in_matrix(rng, a, d, a));
    params.insert("decoder.ctx_b", Matrix::zeros(1, d));
    params.insert("decoder.mel_w", fan_in_matrix(rng, d, group, d));
    params.insert("decoder.mel_b", Matrix::zeros(1, group));
}

/// Sinusoidal positional encoding `[n x dim]` at the given angular rate.
pub fn positional_encoding<F: Scalar>(n: usize, dim: usize, rate: f64) -> Matrix<F> {
    Matrix::from_fn(n, dim, |t, c| {
        let k = (c / 2) as f64;
        let denom = 10000f64.powf(2.0 * k / dim as f64);
        let angle = rate * t as f64 / denom;
        F::from_f64(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Inverted-dropout mask as a tape constant, or `None` when disabled.
pub struct Dropout<'a> {
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub keep_prob: f64,
}

impl<'a> Dropout<'a> {
    pub fn disabled() -> Self {
        Dropout {
            rng: None,
            keep_prob: 1.0,
        }
    }

    pub fn apply<F: Scalar>(&mut self, tape: &mut Tape<F>, x: NodeId) -> NodeId {
        let Some(rng) = self.rng.as_deref_mut() else {
            return x;
        };
        if self.keep_prob >= 1.0 {
            return x;
        }
        let (rows, cols) = (tape.value(x).rows, tape.value(x).cols);
        let inv = F::from_f64(1.0 / self.keep_prob);
        let mask = Matrix::from_fn(rows, cols, |_, _| {
            if rng.gen_range(0.0..1.0) < self.keep_prob {
                inv
            } else {
                F::zero()
            }
        });
        let m = tape.constant(mask);
        tape.mul(x, m)
    }
}

/// One gated-linear conv block with speaker bias and residual scaling.
fn conv_block<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ParamStore<F>,
    name: &str,
    input: NodeId,
    width_dilation: (usize, usize),
    pad: ConvPad,
    speaker_emb: NodeId,
    dropout: &mut Dropout,
) -> NodeId {
    let dropped = dropout.apply(tape, input);
    let w = params.node(tape, &format!("{name}.w"));
    let b = params.node(tape, &format!("{name}.b"));
    let conv = tape.conv1d(dropped, w, width_dilation.1, pad);
    let conv = tape.add_row(conv, b);
    let sbias = speaker_bias(tape, params, name, speaker_emb);
    let conv = tape.add_row(conv, sbias);
    let gated = tape.glu(conv);
    let sum = tape.add(input, gated);
    tape.scale(sum, F::from_f64(RESIDUAL_SCALE))
}

pub struct EncoderOutput {
    pub keys: NodeId,
    pub values: NodeId,
    pub t_char: usize,
}

pub fn encoder_forward<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ParamStore<F>,
    hp: &Hyperparameters,
    char_ids: &[usize],
    speaker_emb: NodeId,
    dropout: &mut Dropout,
) -> EncoderOutput {
    let embed_table = params.node(tape, "encoder.embed");
    let embedded = tape.gather_rows(embed_table, char_ids);
    let in_w = params.node(tape, "encoder.in_w");
    let in_b = params.node(tape, "encoder.in_b");
    let mut h = tape.affine(embedded, in_w, in_b);
    for i in 0..hp.encoder_layers {
        h = conv_block(
            tape,
            params,
            &format!("encoder.block{i}"),
            h,
            (hp.encoder_conv_width, 1),
            ConvPad::Same,
            speaker_emb,
            dropout,
        );
    }
    let kw = params.node(tape, "encoder.keys_w");
    let kb = params.node(tape, "encoder.keys_b");
    let keys = tape.affine(h, kw, kb);
    let vw = params.node(tape, "encoder.vals_w");
    let vb = params.node(tape, "encoder.vals_b");
    let embedded_proj = tape.affine(embedded, vw, vb);
    let sum = tape.add(keys, embedded_proj);
    let values = tape.scale(sum, F::from_f64(RESIDUAL_SCALE));
    EncoderOutput {
        keys,
        values,
        t_char: char_ids.len(),
    }
}

/// Reshape `[T_dec*r x n_mels]` frames into `[T_dec x r*n_mels]` groups.
pub fn group_frames<F: Scalar>(mel: &Matrix<F>, r: usize) -> Matrix<F> {
    assert_eq!(mel.rows % r, 0, "frame count not a reduction multiple");
    let t_dec = mel.rows / r;
    Matrix::from_fn(t_dec, r * mel.cols, |t, j| mel.at(t * r + j / mel.cols, j % mel.cols))
}

/// Teacher-forcing input: groups delayed one step, first group all zero.
pub fn shift_groups<F: Scalar>(groups: &Matrix<F>) -> Matrix<F> {
    Matrix::from_fn(groups.rows, groups.cols, |t, j| {
        if t == 0 {
            F::zero()
        } else {
            groups.at(t - 1, j)
        }
    })
}

pub struct DecoderOutput {
    /// `[T_dec x r*n_mels]`
    pub mel_pred: NodeId,
    /// `[T_dec x decoder_channels]`, post-attention hidden for the bridge.
    pub hidden: NodeId,
    /// `[T_dec x T_char]` row-stochastic attention.
    pub attention: NodeId,
}

/// Full-sequence decoder forward. `monotonic_from` enables windowed argmax
/// masking (inference); `None` leaves attention unconstrained (training).
pub fn decoder_forward<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ParamStore<F>,
    hp: &Hyperparameters,
    enc: &EncoderOutput,
    shifted_groups: NodeId,
    speaker_emb: NodeId,
    dropout: &mut Dropout,
    monotonic_from: Option<&AttentionState>,
) -> DecoderOutput {
    let t_dec = tape.value(shifted_groups).rows;
    let p0w = params.node(tape, "decoder.prenet0_w");
    let p0b = params.node(tape, "decoder.prenet0_b");
    let mut h = tape.affine(shifted_groups, p0w, p0b);
    h = tape.relu(h);
    h = dropout.apply(tape, h);
    let p1w = params.node(tape, "decoder.prenet1_w");
    let p1b = params.node(tape, "decoder.prenet1_b");
    h = tape.affine(h, p1w, p1b);
    h = tape.relu(h);
    h = dropout.apply(tape, h);

    for i in 0..hp.decoder_layers {
        h = conv_block(
            tape,
            params,
            &format!("decoder.block{i}"),
            h,
            (hp.decoder_conv_width, 1),
            ConvPad::Causal,
            speaker_emb,
            dropout,
        );
    }

    // attention block
    let qw = params.node(tape, "decoder.query_w");
    let qb = params.node(tape, "decoder.query_b");
    let mut query = tape.affine(h, qw, qb);
    let a = hp.attention_channels;
    let qpe = positional_encoding::<F>(t_dec, a, 1.0).map(|v| v * F::from_f64(hp.positional_weight));
    let qpe = tape.constant(qpe);
    query = tape.add(query, qpe);

    let kpe = positional_encoding::<F>(enc.t_char, a, hp.positional_initial_rate)
        .map(|v| v * F::from_f64(hp.positional_weight));
    let kpe = tape.constant(kpe);
    let keys = tape.add(enc.keys, kpe);

    let scores = tape.matmul_nt(query, keys);
    let scores = tape.scale(scores, F::from_f64(1.0 / (a as f64).sqrt()));
    let scores = match monotonic_from {
        Some(state) => {
            let mask = monotonic_mask::<F>(t_dec, enc.t_char, state, hp.attention_window);
            let mask = tape.constant(mask);
            tape.add(scores, mask)
        }
        None => scores,
    };
    let attention = tape.softmax_rows(scores);
    let ctx = tape.matmul(attention, enc.values);
    let ctx = tape.scale(ctx, F::from_f64(1.0 / (enc.t_char as f64).sqrt()));
    let cw = params.node(tape, "decoder.ctx_w");
    let cb = params.node(tape, "decoder.ctx_b");
    let ctx = tape.affine(ctx, cw, cb);
    let sum = tape.add(h, ctx);
    let hidden = tape.scale(sum, F::from_f64(RESIDUAL_SCALE));

    let mw = params.node(tape, "decoder.mel_w");
    let mb = params.node(tape, "decoder.mel_b");
    let mel_pred = tape.affine(hidden, mw, mb);
    DecoderOutput {
        mel_pred,
        hidden,
        attention,
    }
}

/// Attention bookkeeping across decode steps.
#[derive(Clone, Debug, Default)]
pub struct AttentionState {
    pub argmax_history: Vec<usize>,
}

impl AttentionState {
    pub fn last_argmax(&self) -> usize {
        self.argmax_history.last().copied().unwrap_or(0)
    }

    pub fn push_row<F: Scalar>(&mut self, row: &[F]) {
        let mut best = 0;
        let mut best_v = F::neg_infinity();
        for (i, &v) in row.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        self.argmax_history.push(best);
    }
}

/// Additive logit mask for the monotonic inference constraint: only
/// `[prev_argmax, prev_argmax + window]` stays unmasked on the newest row.
/// Earlier (already decoded) rows are left unconstrained; their outputs are
/// never consumed when decoding step-by-step.
fn monotonic_mask<F: Scalar>(
    t_dec: usize,
    t_char: usize,
    state: &AttentionState,
    window: usize,
) -> Matrix<F> {
    let prev = state.last_argmax();
    Matrix::from_fn(t_dec, t_char, |t, c| {
        if t + 1 == t_dec && (c < prev || c > prev + window) {
            F::from_f64(MASKED_LOGIT)
        } else {
            F::zero()
        }
    })
}

/// Standalone form of the inference constraint: mask logits outside
/// `[prev_argmax, prev_argmax + window]`, then renormalize via softmax.
pub fn monotonic_inference_constraint<F: Scalar>(
    logits_row: &[F],
    prev_argmax: usize,
    window: usize,
) -> Vec<F> {
    let mut masked: Vec<F> = logits_row
        .iter()
        .enumerate()
        .map(|(c, &v)| {
            if c < prev_argmax || c > prev_argmax + window {
                F::from_f64(MASKED_LOGIT)
            } else {
                v
            }
        })
        .collect();
    let mx = masked.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in masked.iter_mut() {
        *v = (*v - mx).exp();
        sum = sum + *v;
    }
    for v in masked.iter_mut() {
        *v = *v / sum;
    }
    masked
}

/// True once the attention argmax has sat on the last character for
/// `patience_steps` consecutive steps.
pub fn stop_decision(
    att: &AttentionState,
    last_char_index: usize,
    patience_steps: usize,
) -> bool {
    assert!(
        !att.argmax_history.is_empty(),
        "stop_decision needs at least one attention row"
    );
    let h = &att.argmax_history;
    h.len() >= patience_steps
        && h[h.len() - patience_steps..]
            .iter()
            .all(|&a| a == last_char_index)
}

/// Mean absolute error over unmasked cells. `mask` entries are 1 for real
/// content, 0 for padding.
pub fn decoder_l1_loss<F: Scalar>(
    tape: &mut Tape<F>,
    pred: NodeId,
    target: NodeId,
    mask: &Matrix<F>,
) -> Result<NodeId, VoxError> {
    let kept = mask.data.iter().filter(|&&v| v > F::zero()).count();
    if kept == 0 {
        return Err(VoxError::Model("fully masked batch in L1 loss".into()));
    }
    let diff = tape.sub(pred, target);
    let abs = tape.abs(diff);
    let m = tape.constant(mask.clone());
    let masked = tape.mul(abs, m);
    Ok(tape.sum_div(masked, kept))
}

/// Group-level mask: cell (t, j) is real iff frame `t*r + j/n_mels` is real.
pub fn group_mask<F: Scalar>(
    t_dec: usize,
    r: usize,
    n_mels: usize,
    real_frames: usize,
) -> Matrix<F> {
    Matrix::from_fn(t_dec, r * n_mels, |t, j| {
        if t * r + j / n_mels < real_frames {
            F::one()
        } else {
            F::zero()
        }
    })
}
