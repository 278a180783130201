//! Joint training: Adam with the annealed learning-rate schedule, dual
//! gradient clipping (global norm, then per-element clamp), single-file
//! checkpoints, and a CSV metrics log.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_config, Hyperparameters};
use crate::dsp::{make_batch, ProcessedUtterance};
use crate::error::VoxError;
use crate::manifest::SpeakerRegistry;
use crate::matrix::Matrix;
use crate::model::TtsModel;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape};
use crate::text::Charset;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Initial rate up to the anneal start; the first halving takes effect
/// immediately after it, later halvings at the absolute breakpoints
/// `start + k * period` (k >= 2): `lr = lr_initial * 0.5^max(1, floor((step - start) / period))`.
pub fn lr_schedule(step: u64, hp: &Hyperparameters) -> f64 {
    if step <= hp.lr_anneal_start_step {
        hp.lr_initial
    } else {
        let k = ((step - hp.lr_anneal_start_step) / hp.lr_anneal_period).max(1);
        hp.lr_initial * 0.5f64.powi(k as i32)
    }
}

/// Rescale so the global L2 norm is at most `max_grad_norm`, then clamp every
/// element to `[-grad_clip_value, grad_clip_value]`.
pub fn clip_gradients<F: Scalar>(
    grads: &mut Gradients<F>,
    hp: &Hyperparameters,
) -> Result<(), VoxError> {
    let mut sq_sum = 0.0f64;
    for (name, g) in grads.iter() {
        for &v in &g.data {
            let v = v.into_f64();
            if v.is_nan() {
                return Err(VoxError::Train(format!("NaN gradient in {name}")));
            }
            sq_sum += v * v;
        }
    }
    let norm = sq_sum.sqrt();
    let scale = if norm > hp.max_grad_norm {
        hp.max_grad_norm / norm
    } else {
        1.0
    };
    let scale_f = F::from_f64(scale);
    let clip = F::from_f64(hp.grad_clip_value);
    for (_, g) in grads.iter_mut() {
        for v in g.data.iter_mut() {
            *v = (*v * scale_f).min(clip).max(-clip);
        }
    }
    Ok(())
}

/// Adam with lazily-initialized first/second moments keyed by parameter name.
pub struct Adam<F> {
    pub m: BTreeMap<String, Matrix<F>>,
    pub v: BTreeMap<String, Matrix<F>>,
    /// Count of updates applied (1-indexed bias correction).
    pub t: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new() -> Self {
        Adam {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &Gradients<F>, lr: f64) {
        self.t += 1;
        let b1 = F::from_f64(ADAM_BETA1);
        let b2 = F::from_f64(ADAM_BETA2);
        let one = F::one();
        let corr1 = F::from_f64(1.0 - ADAM_BETA1.powi(self.t as i32));
        let corr2 = F::from_f64(1.0 - ADAM_BETA2.powi(self.t as i32));
        let eps = F::from_f64(ADAM_EPS);
        let lr = F::from_f64(lr);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(p.rows, p.cols));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Matrix::zeros(p.rows, p.cols));
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (one - b1) * gi;
                v.data[i] = b2 * v.data[i] + (one - b2) * gi * gi;
                let mhat = m.data[i] / corr1;
                let vhat = v.data[i] / corr2;
                p.data[i] = p.data[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

impl<F: Scalar> Default for Adam<F> {
    fn default() -> Self {
        Adam::new()
    }
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"VSCK";
const CKPT_VERSION: u32 = 1;

pub struct Checkpoint {
    pub step: u64,
    pub adam_t: u64,
    pub hp_text: String,
    pub charset_text: String,
    pub registry: SpeakerRegistry,
    /// Model parameters plus optimizer moments (`adam.m.*` / `adam.v.*`),
    /// all widened to f64.
    pub tensors: BTreeMap<String, Matrix<f64>>,
}

fn push_block(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn checkpoint_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    out.extend_from_slice(&ckpt.adam_t.to_le_bytes());
    push_block(&mut out, ckpt.hp_text.as_bytes());
    push_block(&mut out, ckpt.charset_text.as_bytes());
    push_block(&mut out, ckpt.registry.ids().join("\n").as_bytes());
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.tensors {
        push_block(&mut out, name.as_bytes());
        out.extend_from_slice(&(t.rows as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols as u32).to_le_bytes());
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], VoxError> {
        if self.pos + n > self.bytes.len() {
            return Err(VoxError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, VoxError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, VoxError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn block(&mut self) -> Result<&'a [u8], VoxError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn text(&mut self) -> Result<String, VoxError> {
        String::from_utf8(self.block()?.to_vec())
            .map_err(|_| VoxError::Checkpoint("non-UTF8 text block".into()))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), VoxError> {
    let bytes = checkpoint_bytes(ckpt);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, VoxError> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4)? != CKPT_MAGIC {
        return Err(VoxError::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(VoxError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let step = r.u64()?;
    let adam_t = r.u64()?;
    let hp_text = r.text()?;
    let charset_text = r.text()?;
    let registry_text = r.text()?;
    let registry =
        SpeakerRegistry::from_sorted_unique(registry_text.lines().map(String::from).collect());
    let n_tensors = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..n_tensors {
        let name = r.text()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        tensors.insert(name, Matrix::from_vec(rows, cols, data));
    }
    Ok(Checkpoint {
        step,
        adam_t,
        hp_text,
        charset_text,
        registry,
        tensors,
    })
}

// ---------------------------------------------------------------------------
// training driver
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub decoder_l1: f64,
    pub bridge_l1: f64,
    pub vocoder_nll: f64,
    pub total: f64,
}

pub const METRICS_HEADER: &str = "step,lr,decoder_l1,bridge_l1,vocoder_nll,total";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.lr, self.decoder_l1, self.bridge_l1, self.vocoder_nll, self.total
        )
    }
}

pub struct TrainOptions<'a> {
    /// Train until this global step (inclusive).
    pub target_step: u64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub checkpoint_path: Option<&'a Path>,
    pub metrics_path: Option<&'a Path>,
}

pub struct Trainer<F> {
    pub model: TtsModel<F>,
    pub adam: Adam<F>,
    pub step: u64,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(model: TtsModel<F>) -> Self {
        Trainer {
            model,
            adam: Adam::new(),
            step: 0,
        }
    }

    /// Rebuild the full training state from a checkpoint. When `expected_hp`
    /// is given (resuming an existing run), a mismatched snapshot is an error.
    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        expected_hp: Option<&Hyperparameters>,
    ) -> Result<Self, VoxError> {
        let hp = parse_config(&ckpt.hp_text)?;
        if let Some(expected) = expected_hp {
            if expected.serialize() != hp.serialize() {
                return Err(VoxError::Checkpoint(
                    "hyperparameter snapshot in checkpoint does not match the current config; \
                     refusing to resume"
                        .into(),
                ));
            }
        }
        let charset = Charset::parse(&ckpt.charset_text)?;
        let mut params = ParamStore::new();
        let mut adam = Adam::new();
        adam.t = ckpt.adam_t;
        for (name, t) in &ckpt.tensors {
            let cast: Matrix<F> = t.cast();
            if let Some(rest) = name.strip_prefix("adam.m.") {
                adam.m.insert(rest.to_string(), cast);
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                adam.v.insert(rest.to_string(), cast);
            } else {
                params.insert(name, cast);
            }
        }
        Ok(Trainer {
            model: TtsModel {
                hp,
                registry: ckpt.registry.clone(),
                charset,
                params,
            },
            adam,
            step: ckpt.step,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: BTreeMap<String, Matrix<f64>> = BTreeMap::new();
        for (name, p) in self.model.params.iter() {
            tensors.insert(name.clone(), p.cast());
        }
        for (name, m) in &self.adam.m {
            tensors.insert(format!("adam.m.{name}"), m.cast());
        }
        for (name, v) in &self.adam.v {
            tensors.insert(format!("adam.v.{name}"), v.cast());
        }
        Checkpoint {
            step: self.step,
            adam_t: self.adam.t,
            hp_text: self.model.hp.serialize(),
            charset_text: self.model.charset.serialize(),
            registry: self.model.registry.clone(),
            tensors,
        }
    }

    /// Run training up to `target_step`. Each step draws its batch and
    /// dropout masks from generators keyed by (seed, step), so a resumed run
    /// replays the exact step sequence of an uninterrupted one.
    pub fn train(
        &mut self,
        corpus: &[ProcessedUtterance<F>],
        opts: &TrainOptions,
    ) -> Result<Vec<MetricsRow>, VoxError> {
        if corpus.is_empty() {
            return Err(VoxError::Train("empty training corpus".into()));
        }
        let hp = self.model.hp.clone();
        let mut metrics_file = match opts.metrics_path {
            Some(p) => {
                let fresh = !p.exists();
                let mut f = fs::OpenOptions::new().create(true).append(true).open(p)?;
                if fresh {
                    writeln!(f, "{METRICS_HEADER}")?;
                }
                Some(f)
            }
            None => None,
        };
        let mut rows = Vec::new();
        while self.step < opts.target_step {
            let step = self.step + 1;
            let mut batch_rng = ChaCha8Rng::seed_from_u64(opts.seed);
            batch_rng.set_stream(2 * step);
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(opts.seed);
            dropout_rng.set_stream(2 * step + 1);

            let picks: Vec<ProcessedUtterance<F>> = (0..hp.batch_size.min(corpus.len()))
                .map(|_| corpus[batch_rng.gen_range(0..corpus.len())].clone())
                .collect();
            let batch = make_batch(&picks, &self.model.registry, &hp)?;
            let mut tape = Tape::new();
            let loss = self
                .model
                .joint_loss(&mut tape, &batch, Some(&mut dropout_rng))?;
            let mut grads = tape.backward(loss.total_node);
            clip_gradients(&mut grads, &hp)?;
            let lr = lr_schedule(step, &hp);
            self.adam.step(&mut self.model.params, &grads, lr);
            self.step = step;

            let row = MetricsRow {
                step,
                lr,
                decoder_l1: loss.decoder_l1,
                bridge_l1: loss.bridge_l1,
                vocoder_nll: loss.vocoder_nll,
                total: loss.total,
            };
            if let Some(f) = metrics_file.as_mut() {
                writeln!(f, "{}", row.csv_line())?;
            }
            rows.push(row);

            if let Some(path) = opts.checkpoint_path {
                if step % opts.checkpoint_every == 0 || step == opts.target_step {
                    save_checkpoint(path, &self.to_checkpoint())?;
                }
            }
        }
        Ok(rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::mel::MelSpectrogram;
    use crate::tape::Tape;
    use tempfile::tempdir;

    #[test]
    fn lr_schedule_values_and_breakpoints() {
        let hp = Hyperparameters::default();
        assert_eq!(lr_schedule(0, &hp), 0.001);
        assert_eq!(lr_schedule(100_000, &hp), 0.001);
        assert_eq!(lr_schedule(500_000, &hp), 0.001);
        assert_eq!(lr_schedule(500_001, &hp), 0.0005);
        assert_eq!(lr_schedule(600_000, &hp), 0.0005);
        assert_eq!(lr_schedule(899_999, &hp), 0.0005);
        assert_eq!(lr_schedule(900_000, &hp), 0.00025);
        assert_eq!(lr_schedule(950_000, &hp), 0.00025);
        assert_eq!(lr_schedule(1_100_000, &hp), 0.000125);
        // non-increasing; every change lands on a 500000 + 200000k breakpoint
        let mut prev = lr_schedule(0, &hp);
        for step in 1..1_500_000u64 {
            let lr = lr_schedule(step, &hp);
            assert!(lr <= prev);
            if lr != prev {
                assert!(
                    step == 500_001 || (step - 500_000) % 200_000 == 0,
                    "unexpected change at step {step}"
                );
            }
            prev = lr;
        }
    }

    fn grads_from(entries: &[(&str, Vec<f64>)]) -> Gradients<f64> {
        Gradients::from_map(
            entries
                .iter()
                .map(|(name, data)| {
                    (name.to_string(), Matrix::from_vec(1, data.len(), data.clone()))
                })
                .collect(),
        )
    }

    #[test]
    fn clipping_norm_then_value() {
        let hp = Hyperparameters::default();
        // global norm 200 -> halved
        let mut g = grads_from(&[("a", vec![120.0, 160.0])]);
        clip_gradients(&mut g, &hp).unwrap();
        let a = g.get("a").unwrap();
        assert!((a.data[0] - 5.0).abs() < 1e-12); // 60 clamps to 5
        assert!((a.data[1] - 5.0).abs() < 1e-12); // 80 clamps to 5
        // norm 200 with small elements: pure rescale
        let n = 10_000usize;
        let v = vec![200.0 / (n as f64).sqrt(); n];
        let mut g = grads_from(&[("a", v.clone())]);
        clip_gradients(&mut g, &hp).unwrap();
        for &x in &g.get("a").unwrap().data {
            assert!((x - v[0] / 2.0).abs() < 1e-9);
        }
        // element 7.0 after rescale (norm already <= 100) -> 5.0
        let mut g = grads_from(&[("a", vec![7.0, -7.0, 1.0])]);
        clip_gradients(&mut g, &hp).unwrap();
        assert_eq!(g.get("a").unwrap().data, vec![5.0, -5.0, 1.0]);
        // norm 1, all small -> unchanged
        let mut g = grads_from(&[("a", vec![0.6, 0.8])]);
        clip_gradients(&mut g, &hp).unwrap();
        assert_eq!(g.get("a").unwrap().data, vec![0.6, 0.8]);
        // NaN -> error naming the parameter
        let mut g = grads_from(&[("bad_param", vec![f64::NAN])]);
        let err = clip_gradients(&mut g, &hp).unwrap_err();
        assert!(err.to_string().contains("bad_param"));
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // minimize (p - 3)^2 elementwise
        let mut params = ParamStore::new();
        params.insert("p", Matrix::from_vec(1, 2, vec![0.0f64, 10.0]));
        let mut adam = Adam::new();
        for _ in 0..4000 {
            let mut tape = Tape::new();
            let p = params.node(&mut tape, "p");
            let t = tape.constant(Matrix::from_vec(1, 2, vec![3.0, 3.0]));
            let d = tape.sub(p, t);
            let sq = tape.mul(d, d);
            let loss = tape.sum_div(sq, 1);
            let grads = tape.backward(loss);
            adam.step(&mut params, &grads, 0.01);
        }
        for &v in &params.get("p").data {
            assert!((v - 3.0).abs() < 1e-3, "got {v}");
        }
    }

    fn toy_trainer(seed: u64) -> (Trainer<f64>, Vec<ProcessedUtterance<f64>>) {
        let hp = crate::model::tests::tiny_hp();
        let registry =
            SpeakerRegistry::from_sorted_unique(vec!["spk_a".into(), "spk_b".into()]);
        let model = TtsModel::init(hp.clone(), registry, Charset::default(), seed).unwrap();
        let corpus = (0..4)
            .map(|i| {
                let speaker = if i % 2 == 0 { "spk_a" } else { "spk_b" };
                let frames = 6 + i;
                let n = frames * hp.hop_length_samples;
                ProcessedUtterance {
                    utterance_id: format!("u{i}"),
                    speaker_id: speaker.into(),
                    transcript: format!("toy clip {i}."),
                    mel: MelSpectrogram {
                        values: Matrix::from_fn(frames, hp.n_mel_bands, |t, c| {
                            ((t + c + i) as f64 * 0.61).sin() - 5.0
                        }),
                        hop_length_samples: hp.hop_length_samples,
                    },
                    waveform: (0..n).map(|s| (s as f64 * 0.07 + i as f64).sin() * 0.2).collect(),
                }
            })
            .collect();
        (Trainer::new(model), corpus)
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let (mut trainer, corpus) = toy_trainer(21);
        let dir = tempdir().unwrap();
        let ck = dir.path().join("model.ckpt");
        let opts = TrainOptions {
            target_step: 3,
            seed: 9,
            checkpoint_every: 100,
            checkpoint_path: Some(&ck),
            metrics_path: None,
        };
        trainer.train(&corpus, &opts).unwrap();
        let loaded = load_checkpoint(&ck).unwrap();
        assert_eq!(loaded.step, 3);
        let resaved = dir.path().join("resaved.ckpt");
        save_checkpoint(&resaved, &loaded).unwrap();
        assert_eq!(fs::read(&ck).unwrap(), fs::read(&resaved).unwrap());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (mut full, corpus) = toy_trainer(22);
        let base_opts = |target| TrainOptions {
            target_step: target,
            seed: 31,
            checkpoint_every: 1_000_000,
            checkpoint_path: None,
            metrics_path: None,
        };
        let rows_full = full.train(&corpus, &base_opts(6)).unwrap();

        let (mut half, corpus2) = toy_trainer(22);
        half.train(&corpus2, &base_opts(4)).unwrap();
        let hp = half.model.hp.clone();
        let dir = tempdir().unwrap();
        let ck = dir.path().join("halt.ckpt");
        save_checkpoint(&ck, &half.to_checkpoint()).unwrap();
        drop(half);
        let loaded = load_checkpoint(&ck).unwrap();
        let mut resumed = Trainer::<f64>::from_checkpoint(&loaded, Some(&hp)).unwrap();
        let rows_resumed = resumed.train(&corpus2, &base_opts(6)).unwrap();
        assert_eq!(rows_resumed.len(), 2);
        for (a, b) in rows_full[4..].iter().zip(rows_resumed.iter()) {
            assert_eq!(a.step, b.step);
            assert!((a.total - b.total).abs() < 1e-6, "{} vs {}", a.total, b.total);
        }
    }

    #[test]
    fn resume_with_mismatched_config_is_error() {
        let (mut trainer, corpus) = toy_trainer(23);
        let opts = TrainOptions {
            target_step: 1,
            seed: 1,
            checkpoint_every: 1,
            checkpoint_path: None,
            metrics_path: None,
        };
        trainer.train(&corpus, &opts).unwrap();
        let ckpt = trainer.to_checkpoint();
        let mut other_hp = trainer.model.hp.clone();
        other_hp.encoder_channels *= 2;
        assert!(Trainer::<f64>::from_checkpoint(&ckpt, Some(&other_hp)).is_err());
        assert!(Trainer::<f64>::from_checkpoint(&ckpt, Some(&trainer.model.hp)).is_ok());
        assert!(Trainer::<f64>::from_checkpoint(&ckpt, None).is_ok());
    }

    #[test]
    fn metrics_rows_strictly_increase_and_log_to_csv() {
        let (mut trainer, corpus) = toy_trainer(24);
        let dir = tempdir().unwrap();
        let metrics = dir.path().join("metrics.csv");
        let opts = TrainOptions {
            target_step: 4,
            seed: 2,
            checkpoint_every: 1_000_000,
            checkpoint_path: None,
            metrics_path: Some(&metrics),
        };
        let rows = trainer.train(&corpus, &opts).unwrap();
        for w in rows.windows(2) {
            assert!(w[1].step > w[0].step);
        }
        let text = fs::read_to_string(&metrics).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("1,0.001,"));
    }

    #[test]
    fn every_parameter_moves_after_a_few_steps() {
        let (mut trainer, corpus) = toy_trainer(25);
        let before: BTreeMap<String, Matrix<f64>> = trainer
            .model
            .params
            .iter()
            .map(|(n, p)| (n.clone(), p.clone()))
            .collect();
        let opts = TrainOptions {
            target_step: 3,
            seed: 3,
            checkpoint_every: 1_000_000,
            checkpoint_path: None,
            metrics_path: None,
        };
        trainer.train(&corpus, &opts).unwrap();
        for (name, p) in trainer.model.params.iter() {
            let b = &before[name];
            let moved = p
                .data
                .iter()
                .zip(b.data.iter())
                .any(|(a, b)| (a - b).abs() > 0.0);
            assert!(moved, "parameter {name} never updated");
        }
    }
}
