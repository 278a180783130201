//! Bridge-net: non-causal conv blocks over decoder hidden frames, an
//! auxiliary L1 mel head, and transposed-conv upsampling from frame level to
//! sample level (the vocoder's local conditioner).

use rand_chacha::ChaCha8Rng;

use crate::config::Hyperparameters;
use crate::matrix::Matrix;
use crate::params::{fan_in_matrix, ParamStore};
use crate::scalar::Scalar;
use crate::seq2seq::{Dropout, RESIDUAL_SCALE};
use crate::speaker::{init_bias_site, speaker_bias};
use crate::tape::{ConvPad, NodeId, Tape};

pub fn init_bridge<F: Scalar>(
    params: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
    hp: &Hyperparameters,
) {
    let b = hp.bridge_channels;
    let d = hp.decoder_channels;
    let sd = hp.speaker_embedding_dim;
    let kw = hp.bridge_conv_width;
    let cond = hp.conditioner_channels;

    params.insert("bridge.in_w", fan_in_matrix(rng, d, b, d));
    params.insert("bridge.in_b", Matrix::zeros(1, b));
    for i in 0..hp.bridge_layers {
        params.insert(
            &format!("bridge.block{i}.w"),
            fan_in_matrix(rng, kw * b, 2 * b, kw * b),
        );
        params.insert(&format!("bridge.block{i}.b"), Matrix::zeros(1, 2 * b));
        init_bias_site(params, rng, &format!("bridge.block{i}"), sd, 2 * b);
    }
    let mut in_ch = b;
    for (s, &stride) in hp.upsample_strides.iter().enumerate() {
        params.insert(
            &format!("bridge.up{s}.w"),
            fan_in_matrix(rng, 2 * stride * in_ch, 2 * cond, 2 * stride * in_ch),
        );
        params.insert(&format!("bridge.up{s}.b"), Matrix::zeros(1, 2 * cond));
        init_bias_site(params, rng, &format!("bridge.up{s}"), sd, 2 * cond);
        in_ch = cond;
    }
    params.insert("bridge.mel_w", fan_in_matrix(rng, b, hp.n_mel_bands, b));
    params.insert("bridge.mel_b", Matrix::zeros(1, hp.n_mel_bands));
}

/// Non-causal conv stack over `[n_frames x decoder_channels]` input.
pub fn bridge_conv_forward<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ParamStore<F>,
    hp: &Hyperparameters,
    frames: NodeId,
    speaker_emb: NodeId,
    dropout: &mut Dropout,
) -> NodeId {
    let in_w = params.node(tape, "bridge.in_w");
    let in_b = params.node(tape, "bridge.in_b");
    let mut h = tape.affine(frames, in_w, in_b);
    for i in 0..hp.bridge_layers {
        let name = format!("bridge.block{i}");
        let dropped = dropout.apply(tape, h);
        let w = params.node(tape, &format!("{name}.w"));
        let b = params.node(tape, &format!("{name}.b"));
        let conv = tape.conv1d(dropped, w, 1, ConvPad::Same);
        let conv = tape.add_row(conv, b);
        let sbias = speaker_bias(tape, params, &name, speaker_emb);
        let conv = tape.add_row(conv, sbias);
        let gated = tape.glu(conv);
        let sum = tape.add(h, gated);
        h = tape.scale(sum, F::from_f64(RESIDUAL_SCALE));
    }
    h
}

/// Two gated transposed-conv stages; output length is exactly
/// `n_frames * hop` (strides multiply to the hop).
pub fn upsample<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ParamStore<F>,
    hp: &Hyperparameters,
    frame_hidden: NodeId,
    speaker_emb: NodeId,
) -> NodeId {
    let mut h = frame_hidden;
    for (s, &stride) in hp.upsample_strides.iter().enumerate() {
        let name = format!("bridge.up{s}");
        let w = params.node(tape, &format!("{name}.w"));
        let b = params.node(tape, &format!("{name}.b"));
        let up = tape.conv_transpose1d(h, w, stride);
        let up = tape.add_row(up, b);
        let sbias = speaker_bias(tape, params, &name, speaker_emb);
        let up = tape.add_row(up, sbias);
        h = tape.glu(up);
    }
    h
}

/// Auxiliary mel prediction head: affine `bridge_channels -> n_mel_bands`.
pub fn bridge_aux_mel_head<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ParamStore<F>,
    frame_hidden: NodeId,
) -> NodeId {
    let w = params.node(tape, "bridge.mel_w");
    let b = params.node(tape, "bridge.mel_b");
    tape.affine(frame_hidden, w, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::speaker::{init_embedding_table, lookup};
    use rand::SeedableRng;

    fn tiny_hp() -> Hyperparameters {
        let mut hp = Hyperparameters::default();
        hp.bridge_layers = 2;
        hp.bridge_channels = 8;
        hp.decoder_channels = 6;
        hp.conditioner_channels = 4;
        hp.upsample_strides = vec![15, 20];
        hp
    }

    fn setup(hp: &Hyperparameters, seed: u64) -> ParamStore<f64> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_embedding_table(&mut params, &mut rng, 2, hp.speaker_embedding_dim);
        init_bridge(&mut params, &mut rng, hp);
        params
    }

    fn forward(
        hp: &Hyperparameters,
        params: &ParamStore<f64>,
        frames: &Matrix<f64>,
        speaker: usize,
    ) -> (Matrix<f64>, Matrix<f64>) {
        let mut tape = Tape::new();
        let emb = lookup(&mut tape, params, speaker).unwrap();
        let input = tape.constant(frames.clone());
        let fh = bridge_conv_forward(&mut tape, params, hp, input, emb, &mut Dropout::disabled());
        let cond = upsample(&mut tape, params, hp, fh, emb);
        (tape.value(fh).clone(), tape.value(cond).clone())
    }

    #[test]
    fn shapes_and_length_contract() {
        let hp = tiny_hp();
        let params = setup(&hp, 1);
        let frames = Matrix::from_fn(12, hp.decoder_channels, |r, c| ((r + c) % 5) as f64 * 0.1);
        let (fh, cond) = forward(&hp, &params, &frames, 0);
        assert_eq!((fh.rows, fh.cols), (12, hp.bridge_channels));
        assert_eq!((cond.rows, cond.cols), (3600, hp.conditioner_channels));

        let one = Matrix::from_fn(1, hp.decoder_channels, |_, c| c as f64 * 0.2);
        let (_, cond1) = forward(&hp, &params, &one, 0);
        assert_eq!(cond1.rows, 300);
    }

    #[test]
    fn conv_stack_is_non_causal() {
        let hp = tiny_hp();
        let params = setup(&hp, 2);
        let frames = Matrix::from_fn(12, hp.decoder_channels, |r, c| ((r * 3 + c) % 7) as f64 * 0.1);
        let (base, _) = forward(&hp, &params, &frames, 0);
        let mut perturbed = frames.clone();
        for v in perturbed.row_mut(10) {
            *v += 1.0;
        }
        let (out, _) = forward(&hp, &params, &perturbed, 0);
        let changed_before: f64 = (0..base.cols)
            .map(|c| (base.at(8, c) - out.at(8, c)).abs())
            .sum();
        assert!(changed_before > 0.0, "future frame did not reach frame 8");
    }

    #[test]
    fn zero_projectors_remove_speaker_dependence() {
        let hp = tiny_hp();
        let mut params = setup(&hp, 3);
        let names: Vec<String> = params
            .names()
            .filter(|n| n.contains("speaker_"))
            .cloned()
            .collect();
        for n in names {
            params.get_mut(&n).data.fill(0.0);
        }
        let frames = Matrix::from_fn(6, hp.decoder_channels, |r, c| (r + c) as f64 * 0.05);
        let (fh0, cond0) = forward(&hp, &params, &frames, 0);
        let (fh1, cond1) = forward(&hp, &params, &frames, 1);
        assert_eq!(fh0.data, fh1.data);
        assert_eq!(cond0.data, cond1.data);
    }

    /// Constant input + all-ones normalized kernels propagate a constant
    /// through both transposed stages (no block-boundary artifacts).
    #[test]
    fn upsample_constant_propagation() {
        let hp = tiny_hp();
        let mut params = setup(&hp, 4);
        let mut in_ch = hp.bridge_channels;
        for (s, &stride) in hp.upsample_strides.iter().enumerate() {
            let w = params.get_mut(&format!("bridge.up{s}.w"));
            let norm = 1.0 / (2.0 * in_ch as f64);
            w.data.fill(norm);
            params.get_mut(&format!("bridge.up{s}.b")).data.fill(0.0);
            params
                .get_mut(&format!("bridge.up{s}.speaker_w"))
                .data
                .fill(0.0);
            params
                .get_mut(&format!("bridge.up{s}.speaker_b"))
                .data
                .fill(0.0);
            let _ = stride;
            in_ch = hp.conditioner_channels;
        }
        let mut tape = Tape::new();
        let emb = lookup(&mut tape, &params, 0).unwrap();
        let fh = tape.constant(Matrix::from_fn(5, hp.bridge_channels, |_, _| 0.8));
        let cond = upsample(&mut tape, &params, &hp, fh, emb);
        let v = tape.value(cond);
        assert_eq!(v.rows, 5 * 300);
        let first = v.data[0];
        for &x in &v.data {
            assert!((x - first).abs() < 1e-12, "edge artifact: {x} vs {first}");
        }
    }

    #[test]
    fn aux_head_shape_and_overfit() {
        let hp = tiny_hp();
        let mut params = setup(&hp, 5);
        {
            let mut tape = Tape::new();
            let fh = tape.constant(Matrix::from_fn(12, hp.bridge_channels, |r, c| {
                (r * c) as f64 * 0.01
            }));
            let mel = bridge_aux_mel_head(&mut tape, &params, fh);
            assert_eq!(
                (tape.value(mel).rows, tape.value(mel).cols),
                (12, hp.n_mel_bands)
            );
        }
        // single constant-target toy problem: plain GD on the head drives L1 to ~0
        let fh_const = Matrix::from_fn(4, hp.bridge_channels, |_, c| 0.1 * c as f64);
        let target = Matrix::from_fn(4, hp.n_mel_bands, |_, _| 0.37);
        let mut loss_final = f64::MAX;
        for _ in 0..4000 {
            let mut tape = Tape::new();
            let fh = tape.constant(fh_const.clone());
            let mel = bridge_aux_mel_head(&mut tape, &params, fh);
            let t = tape.constant(target.clone());
            let diff = tape.sub(mel, t);
            let sq = tape.mul(diff, diff);
            let loss = tape.mean_all(sq);
            loss_final = tape.scalar_value(loss);
            let grads = tape.backward(loss);
            for name in ["bridge.mel_w", "bridge.mel_b"] {
                let g = grads.get(name).unwrap();
                let p = params.get_mut(name);
                for (pv, gv) in p.data.iter_mut().zip(g.data.iter()) {
                    *pv -= 0.5 * gv;
                }
            }
        }
        assert!(loss_final < 1e-8, "head failed to fit: {loss_final}");
    }

    #[test]
    fn masked_frames_contribute_zero_gradient() {
        let hp = tiny_hp();
        let params = setup(&hp, 6);
        let n_frames = 6;
        let real = 3;
        let run = |fh_const: &Matrix<f64>| {
            let mut tape = Tape::new();
            let fh = tape.constant(fh_const.clone());
            let mel = bridge_aux_mel_head(&mut tape, &params, fh);
            let target = tape.constant(Matrix::zeros(n_frames, hp.n_mel_bands));
            let mask = Matrix::from_fn(n_frames, hp.n_mel_bands, |t, _| {
                if t < real {
                    1.0
                } else {
                    0.0
                }
            });
            let loss =
                crate::seq2seq::decoder_l1_loss(&mut tape, mel, target, &mask).unwrap();
            tape.backward(loss)
        };
        let fh = Matrix::from_fn(n_frames, hp.bridge_channels, |r, c| (r + c) as f64 * 0.1);
        let g1 = run(&fh);
        // perturbing only masked frames must leave head gradients untouched
        let mut fh2 = fh.clone();
        for t in real..n_frames {
            for v in fh2.row_mut(t) {
                *v += 2.0;
            }
        }
        let g2 = run(&fh2);
        assert_eq!(
            g1.get("bridge.mel_w").unwrap().data,
            g2.get("bridge.mel_w").unwrap().data
        );
    }

    /// Finite-difference check on the first upsample kernel through a scalar loss.
    #[test]
    fn upsample_kernel_finite_difference() {
        let hp = tiny_hp();
        let params = setup(&hp, 7);
        let frames = Matrix::from_fn(2, hp.bridge_channels, |r, c| ((r + c) % 3) as f64 * 0.2 - 0.1);
        let eval = |params: &ParamStore<f64>| {
            let mut tape = Tape::new();
            let emb = lookup(&mut tape, params, 0).unwrap();
            let fh = tape.constant(frames.clone());
            let cond = upsample(&mut tape, params, &hp, fh, emb);
            let t = tape.tanh(cond);
            let loss = tape.mean_all(t);
            (tape.scalar_value(loss), tape.backward(loss))
        };
        let (_, grads) = eval(&params);
        for name in ["bridge.up0.w", "bridge.up1.w"] {
            let analytic = grads.get(name).unwrap().clone();
            let eps = 1e-6;
            let n = params.get(name).len();
            for i in (0..n).step_by(n / 24 + 1) {
                let mut plus = params.clone();
                plus.get_mut(name).data[i] += eps;
                let mut minus = params.clone();
                minus.get_mut(name).data[i] -= eps;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
                let a = analytic.data[i];
                let denom = fd.abs().max(a.abs()).max(1e-8);
                assert!(
                    (fd - a).abs() / denom < 1e-3,
                    "{name}[{i}]: fd {fd} vs analytic {a}"
                );
            }
        }
    }
}
