//! Identity evaluations: a toy speaker classifier over log-mel features, the
//! EER verification harness (seeded 50/50 trial pairing, cosine scoring,
//! rank-interpolated equal-error rate), and PCA export of speaker embeddings.

use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::VoxError;
use crate::matrix::Matrix;
use crate::params::{fan_in_matrix, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{ConvPad, NodeId, Tape};
use crate::trainer::Adam;

// ---------------------------------------------------------------------------
// speaker classifier
// ---------------------------------------------------------------------------

/// Small conv net over `[T x n_mels]` log-mel: two gated-free conv+relu
/// layers, mean over time, then two fully-connected layers. The penultimate
/// activation doubles as the verification embedding.
pub struct SpeakerClassifier<F> {
    pub params: ParamStore<F>,
    pub n_mels: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub n_speakers: usize,
}

impl<F: Scalar> SpeakerClassifier<F> {
    pub fn init(
        n_mels: usize,
        channels: usize,
        embed_dim: usize,
        n_speakers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut params = ParamStore::new();
        params.insert("clf.conv0_w", fan_in_matrix(rng, 3 * n_mels, channels, 3 * n_mels));
        params.insert("clf.conv0_b", Matrix::zeros(1, channels));
        params.insert("clf.conv1_w", fan_in_matrix(rng, 3 * channels, channels, 3 * channels));
        params.insert("clf.conv1_b", Matrix::zeros(1, channels));
        params.insert("clf.fc0_w", fan_in_matrix(rng, channels, embed_dim, channels));
        params.insert("clf.fc0_b", Matrix::zeros(1, embed_dim));
        params.insert("clf.fc1_w", fan_in_matrix(rng, embed_dim, n_speakers, embed_dim));
        params.insert("clf.fc1_b", Matrix::zeros(1, n_speakers));
        SpeakerClassifier {
            params,
            n_mels,
            channels,
            embed_dim,
            n_speakers,
        }
    }

    /// Returns (embedding `[1 x embed_dim]`, logits `[1 x n_speakers]`).
    pub fn forward(&self, tape: &mut Tape<F>, mel: &Matrix<F>) -> (NodeId, NodeId) {
        assert_eq!(mel.cols, self.n_mels);
        let t = mel.rows;
        let x = tape.constant(mel.clone());
        let w0 = self.params.node(tape, "clf.conv0_w");
        let b0 = self.params.node(tape, "clf.conv0_b");
        let h = tape.conv1d(x, w0, 1, ConvPad::Same);
        let h = tape.add_row(h, b0);
        let h = tape.relu(h);
        let w1 = self.params.node(tape, "clf.conv1_w");
        let b1 = self.params.node(tape, "clf.conv1_b");
        let h = tape.conv1d(h, w1, 1, ConvPad::Same);
        let h = tape.add_row(h, b1);
        let h = tape.relu(h);
        // mean over time
        let ones = tape.constant(Matrix::from_fn(1, t, |_, _| F::from_f64(1.0 / t as f64)));
        let pooled = tape.matmul(ones, h);
        let f0w = self.params.node(tape, "clf.fc0_w");
        let f0b = self.params.node(tape, "clf.fc0_b");
        let emb = tape.affine(pooled, f0w, f0b);
        let emb = tape.relu(emb);
        let f1w = self.params.node(tape, "clf.fc1_w");
        let f1b = self.params.node(tape, "clf.fc1_b");
        let logits = tape.affine(emb, f1w, f1b);
        (emb, logits)
    }

    /// Cross-entropy `-ln p[target]` as a tape scalar.
    pub fn loss(&self, tape: &mut Tape<F>, mel: &Matrix<F>, target: usize) -> NodeId {
        let (_, logits) = self.forward(tape, mel);
        let p = tape.softmax_rows(logits);
        let pt = tape.slice_cols(p, target, 1);
        let lp = tape.ln(pt);
        let neg = tape.scale(lp, -F::one());
        tape.sum_div(neg, 1)
    }

    pub fn embed(&self, mel: &Matrix<F>) -> Vec<f64> {
        let mut tape = Tape::new();
        let (emb, _) = self.forward(&mut tape, mel);
        tape.value(emb).data.iter().map(|v| v.into_f64()).collect()
    }

    pub fn classify(&self, mel: &Matrix<F>) -> usize {
        let mut tape = Tape::new();
        let (_, logits) = self.forward(&mut tape, mel);
        let row = tape.value(logits);
        let mut best = 0;
        for i in 1..row.cols {
            if row.at(0, i) > row.at(0, best) {
                best = i;
            }
        }
        best
    }
}

pub struct ClassifierReport<F> {
    pub classifier: SpeakerClassifier<F>,
    pub held_out_accuracy: f64,
    pub n_train: usize,
    pub n_held_out: usize,
}

/// Per-speaker split: every fourth utterance (and at least one) is held out.
pub fn split_held_out(labels: &[usize], n_speakers: usize) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut held = Vec::new();
    for s in 0..n_speakers {
        let of_speaker: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == s).collect();
        for (k, &i) in of_speaker.iter().enumerate() {
            if k % 4 == of_speaker.len().min(4) - 1 {
                held.push(i);
            } else {
                train.push(i);
            }
        }
    }
    (train, held)
}

/// Train the toy classifier on (log-mel, speaker index) pairs and report
/// held-out accuracy.
pub fn train_speaker_classifier<F: Scalar>(
    data: &[(Matrix<F>, usize)],
    n_speakers: usize,
    seed: u64,
    steps: usize,
) -> Result<ClassifierReport<F>, VoxError> {
    if n_speakers < 2 {
        return Err(VoxError::Eval(format!(
            "speaker classification needs at least 2 speakers, got {n_speakers}"
        )));
    }
    for s in 0..n_speakers {
        let count = data.iter().filter(|(_, l)| *l == s).count();
        if count < 2 {
            return Err(VoxError::Eval(format!(
                "speaker index {s} has {count} utterance(s); need at least 2"
            )));
        }
    }
    let n_mels = data[0].0.cols;
    let labels: Vec<usize> = data.iter().map(|(_, l)| *l).collect();
    let (train_idx, held_idx) = split_held_out(&labels, n_speakers);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clf = SpeakerClassifier::init(n_mels, 16, 16, n_speakers, &mut rng);
    let mut adam = Adam::new();
    for _ in 0..steps {
        let &i = &train_idx[rng.gen_range(0..train_idx.len())];
        let (mel, target) = &data[i];
        let mut tape = Tape::new();
        let loss = clf.loss(&mut tape, mel, *target);
        let grads = tape.backward(loss);
        adam.step(&mut clf.params, &grads, 0.003);
    }
    let correct = held_idx
        .iter()
        .filter(|&&i| clf.classify(&data[i].0) == data[i].1)
        .count();
    Ok(ClassifierReport {
        classifier: clf,
        held_out_accuracy: correct as f64 / held_idx.len() as f64,
        n_train: train_idx.len(),
        n_held_out: held_idx.len(),
    })
}

// ---------------------------------------------------------------------------
// verification trials and EER
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct VerificationTrial {
    pub same_speaker: bool,
    pub score: f64,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn mean_vec(vs: &[&Vec<f64>]) -> Vec<f64> {
    let d = vs[0].len();
    let mut m = vec![0.0; d];
    for v in vs {
        for (o, &x) in m.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    m.iter_mut().for_each(|x| *x /= vs.len() as f64);
    m
}

/// Seeded 50/50 same/different pairing over `embeddings[speaker][utterance]`,
/// scored as cosine similarity between the test embedding and the mean of the
/// enrollment embeddings. Enrollment and test utterances are always distinct.
pub fn generate_trials(
    embeddings: &[Vec<Vec<f64>>],
    n_trials: usize,
    enroll_size: usize,
    seed: u64,
) -> Result<Vec<VerificationTrial>, VoxError> {
    if embeddings.len() < 2 {
        return Err(VoxError::Eval(
            "verification trials need at least 2 speakers".into(),
        ));
    }
    if embeddings.iter().any(|u| u.len() < enroll_size + 1) {
        return Err(VoxError::Eval(format!(
            "every speaker needs at least {} utterances for enrollment size {enroll_size}",
            enroll_size + 1
        )));
    }
    let n_spk = embeddings.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(n_trials);
    for i in 0..n_trials {
        let same = i % 2 == 0;
        let enroll_spk = rng.gen_range(0..n_spk);
        let test_spk = if same {
            enroll_spk
        } else {
            let mut other = rng.gen_range(0..n_spk - 1);
            if other >= enroll_spk {
                other += 1;
            }
            other
        };
        let utts = &embeddings[enroll_spk];
        // sample enroll_size (+1 reserved test slot when same-speaker) without replacement
        let mut order: Vec<usize> = (0..utts.len()).collect();
        for k in 0..enroll_size + 1 {
            let j = rng.gen_range(k..order.len());
            order.swap(k, j);
        }
        let enroll: Vec<&Vec<f64>> = order[..enroll_size].iter().map(|&u| &utts[u]).collect();
        let test = if same {
            &utts[order[enroll_size]]
        } else {
            &embeddings[test_spk][rng.gen_range(0..embeddings[test_spk].len())]
        };
        trials.push(VerificationTrial {
            same_speaker: same,
            score: cosine_similarity(test, &mean_vec(&enroll)),
        });
    }
    Ok(trials)
}

/// Equal-error rate by threshold sweep over the observed scores with linear
/// interpolation between the two bracketing operating points. Only score
/// ranks matter, so any strictly monotone transform leaves the result
/// unchanged exactly.
pub fn estimate_eer(trials: &[VerificationTrial]) -> Result<f64, VoxError> {
    let n_same = trials.iter().filter(|t| t.same_speaker).count();
    let n_diff = trials.len() - n_same;
    if n_same == 0 || n_diff == 0 {
        return Err(VoxError::Eval(
            "EER needs both same-speaker and different-speaker trials".into(),
        ));
    }
    let mut sorted: Vec<&VerificationTrial> = trials.iter().collect();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());

    // operating points while lowering the threshold through the data:
    // start accepting nothing (FA 0, FR 1), end accepting everything.
    let mut fa_prev = 0.0f64;
    let mut fr_prev = 1.0f64;
    let mut acc_same = 0usize;
    let mut acc_diff = 0usize;
    let mut k = 0usize;
    while k < sorted.len() {
        // move the threshold past the next tie group
        let s = sorted[k].score;
        while k < sorted.len() && sorted[k].score == s {
            if sorted[k].same_speaker {
                acc_same += 1;
            } else {
                acc_diff += 1;
            }
            k += 1;
        }
        let fa = acc_diff as f64 / n_diff as f64;
        let fr = 1.0 - acc_same as f64 / n_same as f64;
        if fa >= fr {
            // crossing happened within this segment; interpolate
            let dfa = fa - fa_prev;
            let dfr = fr - fr_prev;
            let denom = dfa - dfr;
            let t = if denom.abs() < 1e-300 {
                0.0
            } else {
                (fr_prev - fa_prev) / denom
            };
            return Ok(fa_prev + t * dfa);
        }
        fa_prev = fa;
        fr_prev = fr;
    }
    // accepting everything: FA 1, FR 0 — crossing on the final segment
    let dfa = 1.0 - fa_prev;
    let dfr = -fr_prev;
    let t = (fr_prev - fa_prev) / (dfa - dfr);
    Ok(fa_prev + t * dfa)
}

// ---------------------------------------------------------------------------
// embedding PCA
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct PcaRow {
    pub speaker_id: String,
    pub pc1: f64,
    pub pc2: f64,
    pub label: Option<String>,
}

pub struct PcaExport {
    pub rows: Vec<PcaRow>,
    /// Fraction of total variance carried by PC1 and PC2.
    pub explained_variance_ratio: [f64; 2],
    /// Accuracy of a 2-D linear classifier on the labels, when labels given.
    pub separability: Option<f64>,
}

/// Mean-center, eigendecompose the covariance, project to the top two
/// components. Sign convention: first nonzero loading of each component is
/// positive, so re-runs and translations give identical coordinates.
pub fn embedding_pca(
    table: &Matrix<f64>,
    speaker_ids: &[String],
    labels: Option<&HashMap<String, String>>,
) -> Result<PcaExport, VoxError> {
    let s = table.rows;
    let d = table.cols;
    if s < 2 {
        return Err(VoxError::Eval(format!(
            "PCA needs at least 2 embeddings, got {s}"
        )));
    }
    assert_eq!(s, speaker_ids.len());
    let mut mean = vec![0.0f64; d];
    for r in 0..s {
        for c in 0..d {
            mean[c] += table.at(r, c);
        }
    }
    mean.iter_mut().for_each(|m| *m /= s as f64);
    let centered = DMatrix::from_fn(s, d, |r, c| table.at(r, c) - mean[c]);
    let cov = centered.transpose() * &centered / (s as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let total: f64 = eig.eigenvalues.iter().map(|&v| v.max(0.0)).sum();
    let mut components = [vec![0.0f64; d], vec![0.0f64; d]];
    let mut explained = [0.0f64; 2];
    for pc in 0..2 {
        let col = order[pc];
        let mut v: Vec<f64> = (0..d).map(|r| eig.eigenvectors[(r, col)]).collect();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        components[pc] = v;
        explained[pc] = if total > 0.0 {
            eig.eigenvalues[col].max(0.0) / total
        } else {
            0.0
        };
    }
    let rows: Vec<PcaRow> = (0..s)
        .map(|r| {
            let proj = |comp: &[f64]| -> f64 {
                (0..d).map(|c| (table.at(r, c) - mean[c]) * comp[c]).sum()
            };
            PcaRow {
                speaker_id: speaker_ids[r].clone(),
                pc1: proj(&components[0]),
                pc2: proj(&components[1]),
                label: labels.and_then(|m| m.get(&speaker_ids[r]).cloned()),
            }
        })
        .collect();
    let separability = labels.map(|_| linear_separability(&rows));
    Ok(PcaExport {
        rows,
        explained_variance_ratio: explained,
        separability,
    })
}

/// Accuracy of a softmax-regression classifier on the 2-D projections
/// (deterministic full-batch gradient descent).
fn linear_separability(rows: &[PcaRow]) -> f64 {
    let labeled: Vec<(&PcaRow, usize)> = {
        let mut classes: Vec<String> = rows.iter().filter_map(|r| r.label.clone()).collect();
        classes.sort();
        classes.dedup();
        rows.iter()
            .filter(|r| r.label.is_some())
            .map(|r| {
                let k = classes
                    .binary_search(r.label.as_ref().unwrap())
                    .unwrap();
                (r, k)
            })
            .collect()
    };
    if labeled.is_empty() {
        return 0.0;
    }
    let n_classes = labeled.iter().map(|(_, k)| *k).max().unwrap() + 1;
    if n_classes < 2 {
        return 1.0;
    }
    // normalize coordinates for a well-conditioned descent
    let scale = labeled
        .iter()
        .map(|(r, _)| r.pc1.abs().max(r.pc2.abs()))
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let feats: Vec<[f64; 3]> = labeled
        .iter()
        .map(|(r, _)| [r.pc1 / scale, r.pc2 / scale, 1.0])
        .collect();
    let mut w = vec![[0.0f64; 3]; n_classes];
    for _ in 0..3000 {
        let mut grad = vec![[0.0f64; 3]; n_classes];
        for ((_, label), x) in labeled.iter().zip(feats.iter()) {
            let logits: Vec<f64> = w.iter().map(|wk| wk[0] * x[0] + wk[1] * x[1] + wk[2]).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for k in 0..n_classes {
                let p = exps[k] / z;
                let err = p - if k == *label { 1.0 } else { 0.0 };
                for j in 0..3 {
                    grad[k][j] += err * x[j];
                }
            }
        }
        let lr = 0.5 / labeled.len() as f64;
        for k in 0..n_classes {
            for j in 0..3 {
                w[k][j] -= lr * grad[k][j];
            }
        }
    }
    let correct = labeled
        .iter()
        .zip(feats.iter())
        .filter(|((_, label), x)| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (k, wk) in w.iter().enumerate() {
                let l = wk[0] * x[0] + wk[1] * x[1] + wk[2];
                if l > best_v {
                    best_v = l;
                    best = k;
                }
            }
            best == **&label
        })
        .count();
    correct as f64 / labeled.len() as f64
}

pub fn pca_csv(export: &PcaExport) -> String {
    let mut out = String::from("speaker_id,pc1,pc2,label\n");
    for r in &export.rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.speaker_id,
            r.pc1,
            r.pc2,
            r.label.as_deref().unwrap_or("")
        ));
    }
    out
}

/// Static scatter plot of the projection, one color per label.
pub fn render_pca_plot(export: &PcaExport, path: &std::path::Path) -> Result<(), VoxError> {
    const SIZE: u32 = 640;
    const MARGIN: f64 = 50.0;
    let mut img = image::RgbImage::from_pixel(SIZE, SIZE, image::Rgb([255, 255, 255]));
    let palette: [[u8; 3]; 6] = [
        [214, 39, 40],
        [31, 119, 180],
        [44, 160, 44],
        [255, 127, 14],
        [148, 103, 189],
        [23, 190, 207],
    ];
    let mut classes: Vec<String> = export
        .rows
        .iter()
        .map(|r| r.label.clone().unwrap_or_default())
        .collect();
    classes.sort();
    classes.dedup();
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in &export.rows {
        min_x = min_x.min(r.pc1);
        max_x = max_x.max(r.pc1);
        min_y = min_y.min(r.pc2);
        max_y = max_y.max(r.pc2);
    }
    let span_x = (max_x - min_x).max(1e-12);
    let span_y = (max_y - min_y).max(1e-12);
    let usable = SIZE as f64 - 2.0 * MARGIN;
    for r in &export.rows {
        let px = MARGIN + (r.pc1 - min_x) / span_x * usable;
        let py = SIZE as f64 - MARGIN - (r.pc2 - min_y) / span_y * usable;
        let class = r.label.clone().unwrap_or_default();
        let ci = classes.iter().position(|c| *c == class).unwrap_or(0);
        let color = image::Rgb(palette[ci % palette.len()]);
        for dy in -3i32..=3 {
            for dx in -3i32..=3 {
                if dx * dx + dy * dy > 9 {
                    continue;
                }
                let x = px as i32 + dx;
                let y = py as i32 + dy;
                if (0..SIZE as i32).contains(&x) && (0..SIZE as i32).contains(&y) {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
    img.save(path)
        .map_err(|e| VoxError::Eval(format!("cannot write plot {}: {e}", path.display())))
}
