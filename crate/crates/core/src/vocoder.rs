//! Gaussian autoregressive WaveNet vocoder.
//!
//! Width-2 dilated causal convolutions with gated activation units, local
//! conditioning from the bridge-net, per-layer speaker bias, 128-channel skip
//! connections into two fully-connected output layers, and a (mu, log sigma)
//! Gaussian head with the log-sigma floor.
//!
//! Two execution paths share one parameter set: the tape-based teacher-forced
//! forward used in training, and a ring-buffer incremental path that emits
//! one sample per step in O(layers) work.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::Hyperparameters;
use crate::error::VoxError;
use crate::matrix::Matrix;
use crate::params::{fan_in_matrix, ParamStore};
use crate::scalar::Scalar;
use crate::speaker::init_bias_site;
use crate::tape::{ConvPad, NodeId, Tape};

pub const GAUSSIAN_NLL_CONST: f64 = 0.9189385332046727; // 0.5 * ln(2*pi)
const RESIDUAL_SCALE: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// d_i = 2^(i mod cycle); the full sequence is the doubling cycle repeated.
pub fn dilation_schedule(n_layers: usize, cycle: usize) -> Result<Vec<usize>, VoxError> {
    if cycle == 0 || n_layers == 0 || n_layers % cycle != 0 {
        return Err(VoxError::Model(format!(
            "vocoder layer count {n_layers} is not a positive multiple of the cycle length {cycle}"
        )));
    }
    Ok((0..n_layers).map(|i| 1usize << (i % cycle)).collect())
}

pub fn init_vocoder<F: Scalar>(
    params: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
    hp: &Hyperparameters,
) {
    let r = hp.vocoder_residual_channels;
    let s = hp.vocoder_skip_channels;
    let c = hp.conditioner_channels;
    let sd = hp.speaker_embedding_dim;

    params.insert("vocoder.in_w", fan_in_matrix(rng, 1, r, 1));
    params.insert("vocoder.in_b", Matrix::zeros(1, r));
    for i in 0..hp.vocoder_layers {
        params.insert(
            &format!("vocoder.layer{i}.w"),
            fan_in_matrix(rng, 2 * r, 2 * r, 2 * r),
        );
        params.insert(&format!("vocoder.layer{i}.b"), Matrix::zeros(1, 2 * r));
        params.insert(
            &format!("vocoder.layer{i}.cond_w"),
            fan_in_matrix(rng, c, 2 * r, c),
        );
        init_bias_site(params, rng, &format!("vocoder.layer{i}"), sd, 2 * r);
        // the last layer feeds the head through its skip only
        if i + 1 < hp.vocoder_layers {
            params.insert(
                &format!("vocoder.layer{i}.res_w"),
                fan_in_matrix(rng, r, r, r),
            );
            params.insert(&format!("vocoder.layer{i}.res_b"), Matrix::zeros(1, r));
        }
        params.insert(
            &format!("vocoder.layer{i}.skip_w"),
            fan_in_matrix(rng, r, s, r),
        );
        params.insert(&format!("vocoder.layer{i}.skip_b"), Matrix::zeros(1, s));
    }
    params.insert("vocoder.fc1_w", fan_in_matrix(rng, s, s, s));
    params.insert("vocoder.fc1_b", Matrix::zeros(1, s));
    init_bias_site(params, rng, "vocoder.fc1", sd, s);
    params.insert("vocoder.fc2_w", fan_in_matrix(rng, s, 2, s));
    params.insert("vocoder.fc2_b", Matrix::zeros(1, 2));
    init_bias_site(params, rng, "vocoder.fc2", sd, s);
}

pub struct GaussianFrameParams {
    /// `[n_samples x 1]`
    pub mu: NodeId,
    /// `[n_samples x 1]`, natural log, already floored.
    pub log_sigma: NodeId,
}

/// Teacher-forced forward over the whole sequence.
///
/// `x_shifted` is the target waveform delayed by one sample (first entry 0).
pub fn wavenet_forward<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ParamStore<F>,
    hp: &Hyperparameters,
    x_shifted: NodeId,
    cond: NodeId,
    speaker_emb: NodeId,
) -> Result<GaussianFrameParams, VoxError> {
    let n = tape.value(x_shifted).rows;
    if tape.value(cond).rows != n {
        return Err(VoxError::Model(format!(
            "conditioner length {} != waveform length {n}",
            tape.value(cond).rows
        )));
    }
    let dilations = dilation_schedule(hp.vocoder_layers, hp.vocoder_cycle_length)?;

    let in_w = params.node(tape, "vocoder.in_w");
    let in_b = params.node(tape, "vocoder.in_b");
    let mut h = tape.affine(x_shifted, in_w, in_b);
    let mut skip_sum: Option<NodeId> = None;
    for (i, &d) in dilations.iter().enumerate() {
        let name = format!("vocoder.layer{i}");
        let w = params.node(tape, &format!("{name}.w"));
        let conv = tape.conv1d(h, w, d, ConvPad::Causal);
        let b = params.node(tape, &format!("{name}.b"));
        let conv = tape.add_row(conv, b);
        let cw = params.node(tape, &format!("{name}.cond_w"));
        let cproj = tape.matmul(cond, cw);
        let conv = tape.add(conv, cproj);
        let sbias = crate::speaker::speaker_bias(tape, params, &name, speaker_emb);
        let pre = tape.add_row(conv, sbias);
        let z = tape.gau_gate(pre);
        let sw = params.node(tape, &format!("{name}.skip_w"));
        let sb = params.node(tape, &format!("{name}.skip_b"));
        let skip = tape.affine(z, sw, sb);
        skip_sum = Some(match skip_sum {
            Some(acc) => tape.add(acc, skip),
            None => skip,
        });
        if i + 1 < dilations.len() {
            let rw = params.node(tape, &format!("{name}.res_w"));
            let rb = params.node(tape, &format!("{name}.res_b"));
            let res = tape.affine(z, rw, rb);
            let sum = tape.add(h, res);
            h = tape.scale(sum, F::from_f64(RESIDUAL_SCALE));
        }
    }
    let skip = skip_sum.expect("at least one vocoder layer");
    let skip = tape.relu(skip);
    let b1 = crate::speaker::speaker_bias(tape, params, "vocoder.fc1", speaker_emb);
    let skip = tape.add_row(skip, b1);
    let f1w = params.node(tape, "vocoder.fc1_w");
    let f1b = params.node(tape, "vocoder.fc1_b");
    let hfc = tape.affine(skip, f1w, f1b);
    let hfc = tape.relu(hfc);
    let b2 = crate::speaker::speaker_bias(tape, params, "vocoder.fc2", speaker_emb);
    let hfc = tape.add_row(hfc, b2);
    let f2w = params.node(tape, "vocoder.fc2_w");
    let f2b = params.node(tape, "vocoder.fc2_b");
    let out = tape.affine(hfc, f2w, f2b);
    let mu = tape.slice_cols(out, 0, 1);
    let raw_log_sigma = tape.slice_cols(out, 1, 1);
    let log_sigma = tape.clamp_min(raw_log_sigma, F::from_f64(hp.log_sigma_floor));
    Ok(GaussianFrameParams { mu, log_sigma })
}

/// Mean negative log density over unmasked samples:
/// `0.5 ln(2 pi) + log sigma + (x - mu)^2 / (2 sigma^2)`.
pub fn gaussian_nll<F: Scalar>(
    tape: &mut Tape<F>,
    frame: &GaussianFrameParams,
    target: NodeId,
    mask: &Matrix<F>,
) -> Result<NodeId, VoxError> {
    let kept = mask.data.iter().filter(|&&v| v > F::zero()).count();
    if kept == 0 {
        return Err(VoxError::Model("fully masked batch in Gaussian NLL".into()));
    }
    let diff = tape.sub(target, frame.mu);
    let sq = tape.mul(diff, diff);
    let neg2ls = tape.scale(frame.log_sigma, F::from_f64(-2.0));
    let inv_var = tape.exp(neg2ls);
    let quad = tape.mul(sq, inv_var);
    let quad = tape.scale(quad, F::from_f64(0.5));
    let with_ls = tape.add(frame.log_sigma, quad);
    let per_sample = tape.add_const(with_ls, F::from_f64(GAUSSIAN_NLL_CONST));
    let m = tape.constant(mask.clone());
    let masked = tape.mul(per_sample, m);
    Ok(tape.sum_div(masked, kept))
}

// ---------------------------------------------------------------------------
// incremental sampling
// ---------------------------------------------------------------------------

struct RingBuffer<F> {
    buf: Vec<F>,
    width: usize,
    capacity: usize,
    pos: usize,
}

impl<F: Scalar> RingBuffer<F> {
    fn new(capacity: usize, width: usize) -> Self {
        RingBuffer {
            buf: vec![F::zero(); capacity * width],
            width,
            capacity,
            pos: 0,
        }
    }

    /// Push the newest vector, returning a copy of the one it evicted
    /// (which is exactly the input from `capacity` steps ago).
    fn rotate(&mut self, newest: &[F]) -> Vec<F> {
        let slot = self.pos * self.width;
        let evicted = self.buf[slot..slot + self.width].to_vec();
        self.buf[slot..slot + self.width].copy_from_slice(newest);
        self.pos = (self.pos + 1) % self.capacity;
        evicted
    }
}

/// Per-layer ring buffers sized to each layer's dilation.
pub struct IncrementalCache<F> {
    layers: Vec<RingBuffer<F>>,
}

impl<F: Scalar> IncrementalCache<F> {
    pub fn new(dilations: &[usize], residual_channels: usize) -> Self {
        IncrementalCache {
            layers: dilations
                .iter()
                .map(|&d| RingBuffer::new(d, residual_channels))
                .collect(),
        }
    }
}

/// Weight views extracted once per utterance so the per-sample loop touches
/// plain slices only.
struct LayerWeights<'a, F> {
    w: &'a Matrix<F>,
    bias: Vec<F>, // conv bias + speaker bias, fused
    cond_w: &'a Matrix<F>,
    res: Option<(&'a Matrix<F>, &'a [F])>,
    skip_w: &'a Matrix<F>,
    skip_b: &'a [F],
}

fn softsign_bias_host<F: Scalar>(params: &ParamStore<F>, site: &str, emb: &[F]) -> Vec<F> {
    let w = params.get(&format!("{site}.speaker_w"));
    let b = params.get(&format!("{site}.speaker_b"));
    (0..w.cols)
        .map(|c| {
            let mut acc = b.at(0, c);
            for (i, &e) in emb.iter().enumerate() {
                acc = acc + e * w.at(i, c);
            }
            acc / (F::one() + acc.abs())
        })
        .collect()
}

fn matvec_t<F: Scalar>(w: &Matrix<F>, x: &[F], out: &mut [F]) {
    // out += x^T * w  (w is [in x out])
    for (i, &xv) in x.iter().enumerate() {
        if xv == F::zero() {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(w.row(i).iter()) {
            *o = *o + xv * wv;
        }
    }
}

/// Autoregressive sampling with O(layers) work per sample.
///
/// `x_t = clip(mu_t + temperature * sigma_t * z_t)` with `z_t` drawn from a
/// seeded generator; fully deterministic given (weights, cond, seed,
/// temperature).
pub fn sample_incremental<F: Scalar>(
    params: &ParamStore<F>,
    hp: &Hyperparameters,
    cond: &Matrix<F>,
    speaker_index: usize,
    temperature: f64,
    seed: u64,
) -> Result<SampledTrace<F>, VoxError> {
    assert!(temperature >= 0.0, "temperature must be non-negative");
    let dilations = dilation_schedule(hp.vocoder_layers, hp.vocoder_cycle_length)?;
    let r = hp.vocoder_residual_channels;
    let s = hp.vocoder_skip_channels;
    let table = params.get(crate::speaker::EMBEDDING_TABLE);
    if speaker_index >= table.rows {
        return Err(VoxError::Model(format!(
            "speaker index {speaker_index} out of range"
        )));
    }
    let emb: Vec<F> = table.row(speaker_index).to_vec();

    let layers: Vec<LayerWeights<F>> = (0..hp.vocoder_layers)
        .map(|i| {
            let name = format!("vocoder.layer{i}");
            let mut bias = params.get(&format!("{name}.b")).data.clone();
            let sb = softsign_bias_host(params, &name, &emb);
            for (b, sv) in bias.iter_mut().zip(sb.iter()) {
                *b = *b + *sv;
            }
            LayerWeights {
                w: params.get(&format!("{name}.w")),
                bias,
                cond_w: params.get(&format!("{name}.cond_w")),
                res: (i + 1 < hp.vocoder_layers).then(|| {
                    (
                        params.get(&format!("{name}.res_w")),
                        params.get(&format!("{name}.res_b")).data.as_slice(),
                    )
                }),
                skip_w: params.get(&format!("{name}.skip_w")),
                skip_b: &params.get(&format!("{name}.skip_b")).data,
            }
        })
        .collect();
    let in_w = params.get("vocoder.in_w");
    let in_b = params.get("vocoder.in_b");
    let fc1_w = params.get("vocoder.fc1_w");
    let fc1_b = params.get("vocoder.fc1_b");
    let fc2_w = params.get("vocoder.fc2_w");
    let fc2_b = params.get("vocoder.fc2_b");
    let fc1_sbias = softsign_bias_host(params, "vocoder.fc1", &emb);
    let fc2_sbias = softsign_bias_host(params, "vocoder.fc2", &emb);

    let mut cache = IncrementalCache::new(&dilations, r);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cond.rows;
    let temp = F::from_f64(temperature);
    let mut samples = Vec::with_capacity(n);
    let mut mu_trace = Vec::with_capacity(n);
    let mut ls_trace = Vec::with_capacity(n);
    let mut x_prev = F::zero();

    let mut h = vec![F::zero(); r];
    let mut pre = vec![F::zero(); 2 * r];
    let mut z = vec![F::zero(); r];
    let mut skip_sum = vec![F::zero(); s];
    let mut h_next = vec![F::zero(); r];
    let mut fc = vec![F::zero(); s];

    for t in 0..n {
        // input projection of the previous sample
        for (i, hv) in h.iter_mut().enumerate() {
            *hv = in_b.at(0, i) + x_prev * in_w.at(0, i);
        }
        skip_sum.iter_mut().for_each(|v| *v = F::zero());
        let cond_row = cond.row(t);
        for (lw, ring) in layers.iter().zip(cache.layers.iter_mut()) {
            let delayed = ring.rotate(&h);
            pre.copy_from_slice(&lw.bias);
            // width-2 conv: rows [0, r) tap t - d, rows [r, 2r) tap t
            for (i, &xv) in delayed.iter().enumerate() {
                if xv == F::zero() {
                    continue;
                }
                for (o, &wv) in pre.iter_mut().zip(lw.w.row(i).iter()) {
                    *o = *o + xv * wv;
                }
            }
            for (i, &xv) in h.iter().enumerate() {
                if xv == F::zero() {
                    continue;
                }
                for (o, &wv) in pre.iter_mut().zip(lw.w.row(r + i).iter()) {
                    *o = *o + xv * wv;
                }
            }
            matvec_t(lw.cond_w, cond_row, &mut pre);
            for i in 0..r {
                let one = F::one();
                let g = one / (one + (-pre[r + i]).exp());
                z[i] = pre[i].tanh() * g;
            }
            for (o, &b) in skip_sum.iter_mut().zip(lw.skip_b.iter()) {
                *o = *o + b;
            }
            matvec_t(lw.skip_w, &z, &mut skip_sum);
            if let Some((res_w, res_b)) = lw.res {
                h_next.copy_from_slice(res_b);
                matvec_t(res_w, &z, &mut h_next);
                for (hn, &hv) in h_next.iter_mut().zip(h.iter()) {
                    *hn = (*hn + hv) * F::from_f64(RESIDUAL_SCALE);
                }
                std::mem::swap(&mut h, &mut h_next);
            }
        }
        // output head
        for (f, (&sv, &b1)) in fc.iter_mut().zip(skip_sum.iter().zip(fc1_sbias.iter())) {
            *f = sv.max(F::zero()) + b1;
        }
        let mut h1 = fc1_b.data.clone();
        matvec_t(fc1_w, &fc, &mut h1);
        for (hv, &b2) in h1.iter_mut().zip(fc2_sbias.iter()) {
            *hv = hv.max(F::zero()) + b2;
        }
        let mut out2 = fc2_b.data.clone();
        matvec_t(fc2_w, &h1, &mut out2);
        let mu = out2[0];
        let log_sigma = out2[1].max(F::from_f64(hp.log_sigma_floor));
        let noise: f64 = StandardNormal.sample(&mut rng);
        let x = mu + temp * log_sigma.exp() * F::from_f64(noise);
        let x = x.min(F::one()).max(-F::one());
        samples.push(x);
        mu_trace.push(mu);
        ls_trace.push(log_sigma);
        x_prev = x;
    }
    Ok(SampledTrace {
        samples,
        mu: mu_trace,
        log_sigma: ls_trace,
    })
}

pub struct SampledTrace<F> {
    pub samples: Vec<F>,
    pub mu: Vec<F>,
    pub log_sigma: Vec<F>,
}
