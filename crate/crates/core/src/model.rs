//! Full model assembly: joint training loss over all three components and
//! end-to-end text-to-waveform synthesis.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bridge::{bridge_aux_mel_head, bridge_conv_forward, init_bridge, upsample};
use crate::config::Hyperparameters;
use crate::dsp::{TrainingBatch, Waveform};
use crate::error::VoxError;
use crate::manifest::SpeakerRegistry;
use crate::matrix::Matrix;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::seq2seq::{
    decoder_forward, decoder_l1_loss, encoder_forward, group_frames, group_mask, init_seq2seq,
    shift_groups, stop_decision, AttentionState, Dropout,
};
use crate::speaker::{init_embedding_table, lookup};
use crate::tape::{NodeId, Tape};
use crate::text::{normalize_and_encode_text, Charset};
use crate::vocoder::{gaussian_nll, init_vocoder, sample_incremental, wavenet_forward};

pub struct TtsModel<F> {
    pub hp: Hyperparameters,
    pub registry: SpeakerRegistry,
    pub charset: Charset,
    pub params: ParamStore<F>,
}

impl<F: Scalar> TtsModel<F> {
    /// Fresh model with all parameters drawn from one seeded generator.
    pub fn init(
        hp: Hyperparameters,
        registry: SpeakerRegistry,
        charset: Charset,
        seed: u64,
    ) -> Result<Self, VoxError> {
        hp.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_embedding_table(
            &mut params,
            &mut rng,
            registry.len(),
            hp.speaker_embedding_dim,
        );
        init_seq2seq(&mut params, &mut rng, &hp, charset.len());
        init_bridge(&mut params, &mut rng, &hp);
        init_vocoder(&mut params, &mut rng, &hp);
        Ok(TtsModel {
            hp,
            registry,
            charset,
            params,
        })
    }

    /// Joint loss over a padded batch; pass a generator to enable dropout
    /// (training) or `None` for a deterministic evaluation pass.
    pub fn joint_loss(
        &self,
        tape: &mut Tape<F>,
        batch: &TrainingBatch<F>,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<LossBreakdown, VoxError> {
        let hp = &self.hp;
        let r = hp.reduction_factor;
        let hop = hp.hop_length_samples;
        let n_items = batch.items.len();
        let mut dropout = match dropout_rng {
            Some(rng) => Dropout {
                rng: Some(rng),
                keep_prob: hp.dropout_keep_prob,
            },
            None => Dropout::disabled(),
        };

        let mut dec_terms = Vec::with_capacity(n_items);
        let mut bridge_terms = Vec::with_capacity(n_items);
        let mut nll_terms = Vec::with_capacity(n_items);
        for item in &batch.items {
            let seq = normalize_and_encode_text(&item.transcript, &self.charset)?;
            let emb = lookup(tape, &self.params, item.speaker_index)?;
            let enc = encoder_forward(tape, &self.params, hp, &seq.ids, emb, &mut dropout);

            let groups = group_frames(&item.mel, r);
            let shifted = tape.constant(shift_groups(&groups));
            let t_dec = groups.rows;
            let dec = decoder_forward(tape, &self.params, hp, &enc, shifted, emb, &mut dropout, None);
            let target = tape.constant(groups);
            let gmask = group_mask::<F>(t_dec, r, hp.n_mel_bands, item.real_frames);
            dec_terms.push(decoder_l1_loss(tape, dec.mel_pred, target, &gmask)?);

            let frame_hidden = tape.repeat_rows(dec.hidden, r);
            let bridged = bridge_conv_forward(tape, &self.params, hp, frame_hidden, emb, &mut dropout);
            let aux_mel = bridge_aux_mel_head(tape, &self.params, bridged);
            let mel_target = tape.constant(item.mel.clone());
            let fmask = Matrix::from_fn(batch.padded_frames, hp.n_mel_bands, |t, _| {
                if t < item.real_frames {
                    F::one()
                } else {
                    F::zero()
                }
            });
            bridge_terms.push(decoder_l1_loss(tape, aux_mel, mel_target, &fmask)?);

            let cond = upsample(tape, &self.params, hp, bridged, emb);
            let n = item.waveform.len();
            debug_assert_eq!(n, batch.padded_frames * hop);
            let x_shifted = tape.constant(Matrix::from_fn(n, 1, |t, _| {
                if t == 0 {
                    F::zero()
                } else {
                    item.waveform[t - 1]
                }
            }));
            let x_target = tape.constant(Matrix::from_fn(n, 1, |t, _| item.waveform[t]));
            let frame = wavenet_forward(tape, &self.params, hp, x_shifted, cond, emb)?;
            let smask = Matrix::from_fn(n, 1, |t, _| {
                if t < item.real_samples {
                    F::one()
                } else {
                    F::zero()
                }
            });
            nll_terms.push(gaussian_nll(tape, &frame, x_target, &smask)?);
        }

        let mean_of = |tape: &mut Tape<F>, terms: &[NodeId]| {
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = tape.add(acc, t);
            }
            tape.scale(acc, F::from_f64(1.0 / n_items as f64))
        };
        let decoder_l1 = mean_of(tape, &dec_terms);
        let bridge_l1 = mean_of(tape, &bridge_terms);
        let vocoder_nll = mean_of(tape, &nll_terms);
        let partial = tape.add(decoder_l1, bridge_l1);
        let total = tape.add(partial, vocoder_nll);

        let breakdown = LossBreakdown {
            decoder_l1: tape.scalar_value(decoder_l1).into_f64(),
            bridge_l1: tape.scalar_value(bridge_l1).into_f64(),
            vocoder_nll: tape.scalar_value(vocoder_nll).into_f64(),
            total: tape.scalar_value(total).into_f64(),
            total_node: total,
        };
        for (name, v) in [
            ("decoder_l1", breakdown.decoder_l1),
            ("bridge_l1", breakdown.bridge_l1),
            ("vocoder_nll", breakdown.vocoder_nll),
        ] {
            if !v.is_finite() {
                return Err(VoxError::Train(format!(
                    "non-finite loss component {name}: {v}"
                )));
            }
        }
        Ok(breakdown)
    }

    /// Text to waveform: monotonic attention-stopped decode, bridge
    /// upsampling, then autoregressive vocoder sampling.
    pub fn synthesize(
        &self,
        text: &str,
        speaker_id: &str,
        temperature: f64,
        seed: u64,
    ) -> Result<SynthesisOutput<F>, VoxError> {
        let hp = &self.hp;
        let speaker_index = self
            .registry
            .index_of(speaker_id)
            .ok_or_else(|| VoxError::Model(format!("unknown speaker_id `{speaker_id}`")))?;
        let seq = normalize_and_encode_text(text, &self.charset)?;
        let t_char = seq.len();
        let t_max = hp.max_decode_factor * t_char;
        let group = hp.reduction_factor * hp.n_mel_bands;

        let mut groups: Vec<Vec<F>> = Vec::new();
        let mut hidden_rows: Vec<Vec<F>> = Vec::new();
        let mut attention_rows: Vec<Vec<F>> = Vec::new();
        let mut att = AttentionState::default();
        let mut stopped = false;
        while groups.len() < t_max {
            let t = groups.len();
            // shifted teacher input built from what has been emitted so far
            let shifted = Matrix::from_fn(t + 1, group, |row, j| {
                if row == 0 {
                    F::zero()
                } else {
                    groups[row - 1][j]
                }
            });
            let mut tape = Tape::new();
            let emb = lookup(&mut tape, &self.params, speaker_index)?;
            let mut dropout = Dropout::disabled();
            let enc = encoder_forward(&mut tape, &self.params, hp, &seq.ids, emb, &mut dropout);
            let shifted = tape.constant(shifted);
            let dec = decoder_forward(
                &mut tape,
                &self.params,
                hp,
                &enc,
                shifted,
                emb,
                &mut dropout,
                Some(&att),
            );
            groups.push(tape.value(dec.mel_pred).row(t).to_vec());
            hidden_rows.push(tape.value(dec.hidden).row(t).to_vec());
            let att_row = tape.value(dec.attention).row(t).to_vec();
            att.push_row(&att_row);
            attention_rows.push(att_row);
            if stop_decision(&att, seq.last_char_index(), hp.stop_patience_steps) {
                stopped = true;
                break;
            }
        }
        if !stopped {
            eprintln!(
                "warning: decode for `{}` hit the step cap ({t_max}) without reaching the final character",
                seq.normalized_text
            );
        }
        let n_steps = groups.len();
        let hidden = Matrix::from_fn(n_steps, hp.decoder_channels, |t, j| hidden_rows[t][j]);
        let attention = Matrix::from_fn(n_steps, t_char, |t, j| attention_rows[t][j]);

        let mut tape = Tape::new();
        let emb = lookup(&mut tape, &self.params, speaker_index)?;
        let mut dropout = Dropout::disabled();
        let hidden_node = tape.constant(hidden);
        let frame_hidden = tape.repeat_rows(hidden_node, hp.reduction_factor);
        let bridged = bridge_conv_forward(&mut tape, &self.params, hp, frame_hidden, emb, &mut dropout);
        let cond_node = upsample(&mut tape, &self.params, hp, bridged, emb);
        let cond = tape.value(cond_node).clone();
        debug_assert_eq!(
            cond.rows,
            n_steps * hp.reduction_factor * hp.hop_length_samples
        );

        let trace = sample_incremental(&self.params, hp, &cond, speaker_index, temperature, seed)?;
        Ok(SynthesisOutput {
            waveform: Waveform {
                samples: trace.samples,
                sample_rate_hz: hp.sample_rate_hz,
            },
            attention,
            n_decoder_steps: n_steps,
            stopped_naturally: stopped,
            normalized_text: seq.normalized_text,
            speaker_index,
        })
    }
}

pub struct LossBreakdown {
    pub decoder_l1: f64,
    pub bridge_l1: f64,
    pub vocoder_nll: f64,
    pub total: f64,
    pub total_node: NodeId,
}

pub struct SynthesisOutput<F> {
    pub waveform: Waveform<F>,
    /// `[n_decoder_steps x t_char]` attention actually used while decoding.
    pub attention: Matrix<F>,
    pub n_decoder_steps: usize,
    pub stopped_naturally: bool,
    pub normalized_text: String,
    pub speaker_index: usize,
}

#[cfg(test)]
pub mod tests {
    use super::*;
    use crate::dsp::{make_batch, BatchItem};
    use crate::dsp::mel::MelSpectrogram;
    use crate::dsp::ProcessedUtterance;

    pub fn tiny_hp() -> Hyperparameters {
        let mut hp = Hyperparameters::default();
        hp.encoder_layers = 2;
        hp.encoder_channels = 16;
        hp.char_embedding_dim = 12;
        hp.decoder_layers = 2;
        hp.decoder_channels = 16;
        hp.decoder_prenet_channels = vec![12, 16];
        hp.attention_channels = 16;
        hp.n_mel_bands = 8;
        hp.bridge_layers = 2;
        hp.bridge_channels = 16;
        hp.conditioner_channels = 8;
        hp.upsample_strides = vec![3, 5];
        hp.hop_length_samples = 15;
        hp.win_length_samples = 60;
        hp.fft_size = 64;
        hp.vocoder_layers = 4;
        hp.vocoder_cycle_length = 4;
        hp.vocoder_residual_channels = 8;
        hp.vocoder_skip_channels = 12;
        hp.speaker_embedding_dim = 6;
        hp
    }

    fn registry() -> SpeakerRegistry {
        SpeakerRegistry::from_sorted_unique(vec!["spk_a".into(), "spk_b".into()])
    }

    fn toy_utterance(speaker: &str, text: &str, frames: usize, hp: &Hyperparameters, phase: f64) -> ProcessedUtterance<f64> {
        let n = frames * hp.hop_length_samples;
        ProcessedUtterance {
            utterance_id: format!("{speaker}_{frames}"),
            speaker_id: speaker.into(),
            transcript: text.into(),
            mel: MelSpectrogram {
                values: Matrix::from_fn(frames, hp.n_mel_bands, |t, c| {
                    ((t * 3 + c) as f64 * 0.37 + phase).sin() - 5.0
                }),
                hop_length_samples: hp.hop_length_samples,
            },
            waveform: (0..n).map(|i| (i as f64 * 0.05 + phase).sin() * 0.3).collect(),
        }
    }

    fn toy_model(seed: u64) -> TtsModel<f64> {
        TtsModel::init(tiny_hp(), registry(), Charset::default(), seed).unwrap()
    }

    #[test]
    fn joint_loss_components_and_gradient_coverage() {
        let model = toy_model(11);
        let hp = model.hp.clone();
        let utts = vec![
            toy_utterance("spk_a", "hi there.", 7, &hp, 0.0),
            toy_utterance("spk_b", "bye now.", 10, &hp, 1.3),
        ];
        let batch = make_batch(&utts, &model.registry, &hp).unwrap();
        let mut tape = Tape::new();
        let loss = model.joint_loss(&mut tape, &batch, None).unwrap();
        assert!(loss.total.is_finite());
        assert!((loss.decoder_l1 + loss.bridge_l1 + loss.vocoder_nll - loss.total).abs() < 1e-9);
        assert!(loss.decoder_l1 > 0.0 && loss.bridge_l1 > 0.0);

        let grads = tape.backward(loss.total_node);
        for name in model.params.names() {
            assert!(
                grads.get(name).is_some(),
                "no gradient reached parameter {name}"
            );
        }
    }

    #[test]
    fn dropout_passes_are_seeded() {
        let model = toy_model(12);
        let hp = model.hp.clone();
        let utts = vec![toy_utterance("spk_a", "seed check.", 6, &hp, 0.4)];
        let batch = make_batch(&utts, &model.registry, &hp).unwrap();
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            model.joint_loss(&mut tape, &batch, Some(&mut rng)).unwrap().total
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn unknown_speaker_is_error() {
        let model = toy_model(13);
        assert!(model.synthesize("hello.", "nobody", 0.5, 1).is_err());
        assert!(matches!(
            model.synthesize("hello.", "nobody", 0.5, 1),
            Err(VoxError::Model(_))
        ));
    }

    #[test]
    fn synthesis_shape_contract_and_determinism() {
        let model = toy_model(14);
        let out = model.synthesize("ab.", "spk_a", 0.5, 9).unwrap();
        let hp = &model.hp;
        assert_eq!(
            out.waveform.samples.len(),
            out.n_decoder_steps * hp.reduction_factor * hp.hop_length_samples
        );
        assert_eq!(out.attention.rows, out.n_decoder_steps);
        assert_eq!(out.attention.cols, 3); // "ab."
        assert_eq!(out.normalized_text, "ab.");
        assert!(out.n_decoder_steps <= hp.max_decode_factor * 3);
        for &s in &out.waveform.samples {
            assert!((-1.0..=1.0).contains(&s));
        }
        let again = model.synthesize("ab.", "spk_a", 0.5, 9).unwrap();
        assert_eq!(out.waveform.samples, again.waveform.samples);
        assert_eq!(out.n_decoder_steps, again.n_decoder_steps);
    }

    #[test]
    fn synthesis_differs_across_speakers() {
        let model = toy_model(15);
        let a = model.synthesize("same words.", "spk_a", 0.0, 2).unwrap();
        let b = model.synthesize("same words.", "spk_b", 0.0, 2).unwrap();
        let n = a.waveform.samples.len().min(b.waveform.samples.len());
        let diff: f64 = (0..n)
            .map(|i| (a.waveform.samples[i] - b.waveform.samples[i]).abs())
            .sum();
        assert!(diff > 0.0, "speaker change must alter the waveform");
    }

    pub fn make_toy_batch(model: &TtsModel<f64>) -> TrainingBatch<f64> {
        let hp = &model.hp;
        let utts = vec![
            toy_utterance("spk_a", "one two.", 8, hp, 0.0),
            toy_utterance("spk_b", "three four.", 8, hp, 2.1),
        ];
        make_batch(&utts, &model.registry, hp).unwrap()
    }

    #[test]
    fn padded_regions_do_not_affect_loss() {
        // same real content, different padding tails -> identical loss
        let model = toy_model(16);
        let hp = model.hp.clone();
        let utts = vec![
            toy_utterance("spk_a", "pad test.", 8, &hp, 0.5),
            toy_utterance("spk_b", "pad test.", 12, &hp, 0.9),
        ];
        let batch = make_batch(&utts, &model.registry, &hp).unwrap();
        let mut tape = Tape::new();
        let base = model.joint_loss(&mut tape, &batch, None).unwrap();

        let mut noisy = batch.clone();
        for item in &mut noisy.items {
            let BatchItem {
                mel,
                real_frames,
                waveform,
                real_samples,
                ..
            } = item;
            for t in *real_frames..mel.rows {
                for c in 0..mel.cols {
                    *mel.at_mut(t, c) += 3.0;
                }
            }
            for s in waveform[*real_samples..].iter_mut() {
                *s += 0.25;
            }
        }
        let mut tape2 = Tape::new();
        let perturbed = model.joint_loss(&mut tape2, &noisy, None).unwrap();
        assert!((base.decoder_l1 - perturbed.decoder_l1).abs() < 1e-12);
        assert!((base.bridge_l1 - perturbed.bridge_l1).abs() < 1e-12);
        // padding sits at the tail and the vocoder is causal, so masked
        // samples never see it
        assert!((base.vocoder_nll - perturbed.vocoder_nll).abs() < 1e-12);
    }
}
