use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use voxsynth::config::{load_config, Hyperparameters};
use voxsynth::dsp::{preprocess_utterance, read_feature_cache, write_feature_cache, write_wav};
use voxsynth::dsp::ProcessedUtterance;
use voxsynth::eval::{
    embedding_pca, estimate_eer, generate_trials, pca_csv, render_pca_plot,
    train_speaker_classifier,
};
use voxsynth::manifest::{build_manifest, Manifest};
use voxsynth::model::TtsModel;
use voxsynth::speaker::EMBEDDING_TABLE;
use voxsynth::text::Charset;
use voxsynth::trainer::{load_checkpoint, save_checkpoint, TrainOptions, Trainer};
use voxsynth::Real;

#[derive(Parser)]
#[command(name = "voxsynth", about = "Multi-speaker text-to-wave synthesis", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a data directory, build the manifest and the feature cache.
    Prepare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train (or resume) the joint model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory for checkpoint + metrics.csv.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        checkpoint_every: u64,
    },
    /// Text to WAV through a trained checkpoint.
    Synthesize {
        #[arg(long)]
        text: String,
        #[arg(long)]
        speaker: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.5)]
        temperature: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy speaker classifier on a data directory and report
    /// held-out accuracy.
    EvalClassify {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
    },
    /// Speaker-verification EER over seeded 50/50 trials.
    EvalEer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 40960)]
        trials: usize,
        #[arg(long, default_value_t = 1)]
        enroll: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        classifier_steps: usize,
    },
    /// Project the learned speaker embeddings to their top-2 principal
    /// components; writes <prefix>.csv and <prefix>.png.
    EmbedPca {
        #[arg(long)]
        ckpt: PathBuf,
        /// Optional CSV of `speaker_id,label` rows.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out_prefix: PathBuf,
    },
}

fn hp_from(config: &Option<PathBuf>) -> Result<Hyperparameters> {
    let hp = match config {
        Some(path) => load_config(path)?,
        None => Hyperparameters::default(),
    };
    hp.validate()?;
    Ok(hp)
}

fn cache_dir(data: &Path) -> PathBuf {
    data.join("cache")
}

fn cache_path(data: &Path, utterance_id: &str) -> PathBuf {
    cache_dir(data).join(format!("{utterance_id}.vsfc"))
}

/// Load every utterance, preferring the feature cache and filling it in on
/// misses.
fn load_corpus(data: &Path, hp: &Hyperparameters) -> Result<(Manifest, Vec<ProcessedUtterance<Real>>)> {
    let manifest = build_manifest(data)?;
    fs::create_dir_all(cache_dir(data))?;
    let mut corpus = Vec::with_capacity(manifest.records.len());
    for record in &manifest.records {
        let cpath = cache_path(data, &record.utterance_id);
        let u = if cpath.exists() {
            read_feature_cache::<Real>(&cpath, record, hp.hop_length_samples)?
        } else {
            let u = preprocess_utterance::<Real>(record, hp)
                .with_context(|| format!("preprocessing {}", record.utterance_id))?;
            if let Some(parent) = cpath.parent() {
                fs::create_dir_all(parent)?;
            }
            write_feature_cache(&cpath, &u)?;
            u
        };
        corpus.push(u);
    }
    Ok((manifest, corpus))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Prepare { config, data } => {
            let hp = hp_from(&config)?;
            let (manifest, corpus) = load_corpus(&data, &hp)?;
            fs::write(data.join("manifest.tsv"), manifest.serialize())?;
            let total_frames: usize = corpus.iter().map(|u| u.mel.n_frames()).sum();
            println!(
                "prepared {} utterances from {} speakers ({} skipped, {} mel frames) -> {}",
                manifest.records.len(),
                manifest.registry.len(),
                manifest.skipped,
                total_frames,
                cache_dir(&data).display()
            );
        }
        Command::Train {
            config,
            data,
            steps,
            seed,
            resume,
            out,
            checkpoint_every,
        } => {
            let hp = hp_from(&config)?;
            let (manifest, corpus) = load_corpus(&data, &hp)?;
            fs::create_dir_all(&out)?;
            let ckpt_path = out.join("model.ckpt");
            let mut trainer = match &resume {
                Some(path) => {
                    let ckpt = load_checkpoint(path)?;
                    let t = Trainer::<Real>::from_checkpoint(&ckpt, Some(&hp))?;
                    println!("resumed from {} at step {}", path.display(), t.step);
                    t
                }
                None => Trainer::new(TtsModel::init(
                    hp.clone(),
                    manifest.registry.clone(),
                    Charset::default(),
                    seed,
                )?),
            };
            let metrics_path = out.join("metrics.csv");
            let rows = trainer.train(
                &corpus,
                &TrainOptions {
                    target_step: steps,
                    seed,
                    checkpoint_every,
                    checkpoint_path: Some(&ckpt_path),
                    metrics_path: Some(&metrics_path),
                },
            )?;
            if rows.is_empty() {
                // resumed past the target; still leave a checkpoint behind
                save_checkpoint(&ckpt_path, &trainer.to_checkpoint())?;
            }
            if let Some(last) = rows.last() {
                println!(
                    "step {} lr {} total {:.4} (decoder {:.4}, bridge {:.4}, vocoder {:.4})",
                    last.step, last.lr, last.total, last.decoder_l1, last.bridge_l1, last.vocoder_nll
                );
            }
            println!("checkpoint: {}", ckpt_path.display());
            println!("metrics: {}", metrics_path.display());
        }
        Command::Synthesize {
            text,
            speaker,
            ckpt,
            seed,
            temperature,
            out,
        } => {
            let trainer = Trainer::<Real>::from_checkpoint(&load_checkpoint(&ckpt)?, None)?;
            let model = trainer.model;
            let result = model.synthesize(&text, &speaker, temperature, seed)?;
            write_wav(&out, &result.waveform)?;
            let meta = format!(
                "text={}\nspeaker_id={}\nseed={}\ntemperature={}\ndecoder_steps={}\n\
                 stopped_by_attention={}\nno_stop={}\nsamples={}\nsample_rate_hz={}\n",
                result.normalized_text,
                speaker,
                seed,
                temperature,
                result.n_decoder_steps,
                result.stopped_naturally,
                !result.stopped_naturally,
                result.waveform.samples.len(),
                result.waveform.sample_rate_hz,
            );
            let meta_path = out.with_extension("meta.txt");
            fs::write(&meta_path, meta)?;
            println!(
                "wrote {} ({} samples, {} decoder steps{})",
                out.display(),
                result.waveform.samples.len(),
                result.n_decoder_steps,
                if result.stopped_naturally {
                    ""
                } else {
                    ", NO-STOP: hit the decode cap"
                }
            );
            println!("metadata: {}", meta_path.display());
        }
        Command::EvalClassify {
            data,
            ckpt,
            seed,
            steps,
        } => {
            let trainer = Trainer::<Real>::from_checkpoint(&load_checkpoint(&ckpt)?, None)?;
            let hp = trainer.model.hp.clone();
            let registry = trainer.model.registry.clone();
            let (_, corpus) = load_corpus(&data, &hp)?;
            let pairs: Vec<_> = corpus
                .iter()
                .map(|u| {
                    let idx = registry
                        .index_of(&u.speaker_id)
                        .with_context(|| format!("speaker {} not in checkpoint registry", u.speaker_id))?;
                    Ok((u.mel.values.clone(), idx))
                })
                .collect::<Result<_>>()?;
            let report = train_speaker_classifier(&pairs, registry.len(), seed, steps)?;
            println!(
                "held-out accuracy: {:.4} ({} train / {} held-out utterances, {} speakers)",
                report.held_out_accuracy,
                report.n_train,
                report.n_held_out,
                registry.len()
            );
        }
        Command::EvalEer {
            data,
            ckpt,
            trials,
            enroll,
            seed,
            classifier_steps,
        } => {
            if enroll != 1 && enroll != 5 {
                bail!("--enroll must be 1 or 5");
            }
            let trainer = Trainer::<Real>::from_checkpoint(&load_checkpoint(&ckpt)?, None)?;
            let hp = trainer.model.hp.clone();
            let registry = trainer.model.registry.clone();
            let (_, corpus) = load_corpus(&data, &hp)?;
            let pairs: Vec<_> = corpus
                .iter()
                .map(|u| {
                    let idx = registry
                        .index_of(&u.speaker_id)
                        .with_context(|| format!("speaker {} not in checkpoint registry", u.speaker_id))?;
                    Ok((u.mel.values.clone(), idx))
                })
                .collect::<Result<_>>()?;
            let report = train_speaker_classifier(&pairs, registry.len(), seed, classifier_steps)?;
            let mut embeddings: Vec<Vec<Vec<f64>>> = vec![Vec::new(); registry.len()];
            for (mel, idx) in &pairs {
                embeddings[*idx].push(report.classifier.embed(mel));
            }
            let trial_set = generate_trials(&embeddings, trials, enroll, seed)?;
            let eer = estimate_eer(&trial_set)?;
            println!(
                "EER: {:.4} ({} trials, enrollment size {}, backbone held-out accuracy {:.4})",
                eer, trials, enroll, report.held_out_accuracy
            );
        }
        Command::EmbedPca {
            ckpt,
            labels,
            out_prefix,
        } => {
            let loaded = load_checkpoint(&ckpt)?;
            let table = loaded
                .tensors
                .get(EMBEDDING_TABLE)
                .context("checkpoint has no speaker embedding table")?;
            let ids: Vec<String> = loaded.registry.ids().to_vec();
            let label_map = match &labels {
                Some(path) => Some(read_labels(path)?),
                None => None,
            };
            let export = embedding_pca(table, &ids, label_map.as_ref())?;
            let csv_path = out_prefix.with_extension("csv");
            let png_path = out_prefix.with_extension("png");
            fs::write(&csv_path, pca_csv(&export))?;
            render_pca_plot(&export, &png_path)?;
            println!(
                "explained variance: PC1 {:.3}, PC2 {:.3}",
                export.explained_variance_ratio[0], export.explained_variance_ratio[1]
            );
            if let Some(sep) = export.separability {
                println!("linear separability on labels: {:.4}", sep);
            }
            println!("wrote {} and {}", csv_path.display(), png_path.display());
        }
    }
    Ok(())
}

/// `speaker_id,label` rows; an optional header line is skipped.
fn read_labels(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading labels {}", path.display()))?;
    let mut map = HashMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (ln == 0 && line.eq_ignore_ascii_case("speaker_id,label")) {
            continue;
        }
        let (id, label) = line
            .split_once(',')
            .with_context(|| format!("labels line {}: expected `speaker_id,label`", ln + 1))?;
        map.insert(id.trim().to_string(), label.trim().to_string());
    }
    Ok(map)
}
