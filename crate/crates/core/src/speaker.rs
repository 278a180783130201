//! Speaker conditioning: a trainable embedding table plus, per injection
//! site, an affine projector whose softsign-activated output is added as a
//! bias inside the network component at that site.

use rand_chacha::ChaCha8Rng;

use crate::error::VoxError;
use crate::matrix::Matrix;
use crate::params::{uniform_matrix, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

pub const EMBEDDING_TABLE: &str = "speaker.table";
pub const EMBEDDING_INIT_LIMIT: f64 = 0.1;

/// Register the `[n_speakers x dim]` table, init uniform(-0.1, 0.1).
pub fn init_embedding_table<F: Scalar>(
    params: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
    n_speakers: usize,
    dim: usize,
) {
    params.insert(
        EMBEDDING_TABLE,
        uniform_matrix(rng, n_speakers, dim, EMBEDDING_INIT_LIMIT),
    );
}

/// Register one projection site `{site}` mapping `dim -> channels`.
pub fn init_bias_site<F: Scalar>(
    params: &mut ParamStore<F>,
    rng: &mut ChaCha8Rng,
    site: &str,
    dim: usize,
    channels: usize,
) {
    params.insert(
        &format!("{site}.speaker_w"),
        uniform_matrix(rng, dim, channels, (1.0 / dim as f64).sqrt()),
    );
    params.insert(&format!("{site}.speaker_b"), Matrix::zeros(1, channels));
}

/// Embedding row for `speaker_index`, as a `[1 x dim]` tape node.
/// Gradient updates land only on that row (gather backward is a scatter-add).
pub fn lookup<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ParamStore<F>,
    speaker_index: usize,
) -> Result<NodeId, VoxError> {
    let table = params.get(EMBEDDING_TABLE);
    if speaker_index >= table.rows {
        return Err(VoxError::Model(format!(
            "speaker index {speaker_index} out of range (table has {} rows)",
            table.rows
        )));
    }
    let table_node = params.node(tape, EMBEDDING_TABLE);
    Ok(tape.gather_rows(table_node, &[speaker_index]))
}

/// softsign(W*e + b), a `[1 x channels]` bias row with every entry in (-1, 1).
pub fn speaker_bias<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ParamStore<F>,
    site: &str,
    embedding: NodeId,
) -> NodeId {
    let w = params.node(tape, &format!("{site}.speaker_w"));
    let b = params.node(tape, &format!("{site}.speaker_b"));
    let projected = tape.affine(embedding, w, b);
    tape.softsign(projected)
}

/// Standalone CSV export of the table (one row per speaker).
pub fn embedding_csv<F: Scalar>(table: &Matrix<F>, speaker_ids: &[String]) -> String {
    assert_eq!(table.rows, speaker_ids.len());
    let mut out = String::from("speaker_id");
    for d in 0..table.cols {
        out.push_str(&format!(",e{d}"));
    }
    out.push('\n');
    for (r, id) in speaker_ids.iter().enumerate() {
        out.push_str(id);
        for &v in table.row(r) {
            out.push_str(&format!(",{}", v.into_f64()));
        }
        out.push('\n');
    }
    out
}
