//! Dataset manifest: one record per (audio, transcript) pair plus the
//! speaker registry that fixes embedding-table row order.
//!
//! Data layout expected under the data root: one subdirectory per speaker,
//! each holding `<utt>.wav` / `<utt>.txt` pairs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::VoxError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub transcript: String,
    pub audio_path: PathBuf,
}

/// Ordered speaker ids; position is the embedding-table row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpeakerRegistry {
    ids: Vec<String>,
}

impl SpeakerRegistry {
    pub fn from_sorted_unique(mut ids: Vec<String>) -> Self {
        ids.sort();
        ids.dedup();
        SpeakerRegistry { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, speaker_id: &str) -> Option<usize> {
        self.ids.binary_search_by(|s| s.as_str().cmp(speaker_id)).ok()
    }

    pub fn id_at(&self, index: usize) -> Option<&str> {
        self.ids.get(index).map(|s| s.as_str())
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub records: Vec<UtteranceRecord>,
    pub registry: SpeakerRegistry,
    /// Count of orphan audio/transcript files skipped during the scan.
    pub skipped: usize,
}

/// Scan `data_root` for speaker directories of wav/txt pairs.
///
/// Deterministic: speakers and utterances are sorted lexicographically, never
/// taken in filesystem order.
pub fn build_manifest(data_root: &Path) -> Result<Manifest, VoxError> {
    let mut records = Vec::new();
    let mut skipped = 0usize;
    let mut speaker_dirs: Vec<(String, PathBuf)> = Vec::new();
    let entries = std::fs::read_dir(data_root)
        .map_err(|e| VoxError::Manifest(format!("reading {}: {e}", data_root.display())))?;
    for entry in entries {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            let name = entry.file_name().to_string_lossy().into_owned();
            speaker_dirs.push((name, entry.path()));
        }
    }
    speaker_dirs.sort();

    for (speaker_id, dir) in &speaker_dirs {
        let mut wavs: BTreeMap<String, PathBuf> = BTreeMap::new();
        let mut txts: BTreeMap<String, PathBuf> = BTreeMap::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            let (Some(stem), Some(ext)) = (
                path.file_stem().map(|s| s.to_string_lossy().into_owned()),
                path.extension().map(|e| e.to_string_lossy().to_lowercase()),
            ) else {
                continue;
            };
            match ext.as_str() {
                "wav" => {
                    wavs.insert(stem, path);
                }
                "txt" => {
                    txts.insert(stem, path);
                }
                _ => {}
            }
        }
        for (stem, wav) in &wavs {
            match txts.get(stem) {
                Some(txt) => {
                    let transcript = std::fs::read_to_string(txt)?.trim().to_string();
                    if transcript.is_empty() {
                        eprintln!("warning: empty transcript for {}, skipping", wav.display());
                        skipped += 1;
                        continue;
                    }
                    records.push(UtteranceRecord {
                        utterance_id: format!("{speaker_id}/{stem}"),
                        speaker_id: speaker_id.clone(),
                        transcript,
                        audio_path: wav.clone(),
                    });
                }
                None => {
                    eprintln!("warning: audio without transcript: {}", wav.display());
                    skipped += 1;
                }
            }
        }
        skipped += txts.keys().filter(|stem| !wavs.contains_key(*stem)).count();
        for stem in txts.keys().filter(|stem| !wavs.contains_key(*stem)) {
            eprintln!("warning: transcript without audio: {speaker_id}/{stem}");
        }
    }

    if records.is_empty() {
        return Err(VoxError::Manifest(format!(
            "no usable (audio, transcript) pairs under {}",
            data_root.display()
        )));
    }
    let registry = SpeakerRegistry::from_sorted_unique(
        records.iter().map(|r| r.speaker_id.clone()).collect(),
    );
    Ok(Manifest {
        records,
        registry,
        skipped,
    })
}

impl Manifest {
    /// Tab-separated lines: `utterance_id \t speaker_id \t audio_path \t transcript`.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.utterance_id);
            out.push('\t');
            out.push_str(&r.speaker_id);
            out.push('\t');
            out.push_str(&r.audio_path.to_string_lossy());
            out.push('\t');
            out.push_str(&r.transcript);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Manifest, VoxError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(4, '\t');
            let (Some(utt), Some(spk), Some(path), Some(tr)) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(VoxError::Manifest(format!(
                    "line {}: expected 4 tab-separated fields",
                    i + 1
                )));
            };
            records.push(UtteranceRecord {
                utterance_id: utt.to_string(),
                speaker_id: spk.to_string(),
                transcript: tr.to_string(),
                audio_path: PathBuf::from(path),
            });
        }
        if records.is_empty() {
            return Err(VoxError::Manifest("empty manifest".into()));
        }
        let registry = SpeakerRegistry::from_sorted_unique(
            records.iter().map(|r| r.speaker_id.clone()).collect(),
        );
        Ok(Manifest {
            records,
            registry,
            skipped: 0,
        })
    }
}
