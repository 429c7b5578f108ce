//! Binary checkpoints of a run between tasks.
//!
//! ```text
//! "TAAMCKPT"            8 bytes
//! version               u32 LE
//! header length         u64 LE
//! header                JSON: shapes, registry, progress, config echo
//! blocks                f64 LE, in this order:
//!                         backbone layers
//!                         per task: per site W_base, b_base, W_attn, b_attn; then e
//!                         classifier columns in registry order
//!                         prototypes in task order
//! SHA-256               32 bytes over everything above
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::Backbone;
use crate::classifier::{ClassSlot, ClassifierHead};
use crate::error::{Error, Result};
use crate::harness::{AccuracyMatrix, FinetuneModel, Learner, Retrieval, RunState};
use crate::nsm::{Modulator, SiteParams};
use crate::prototype::{BankEntry, Prototype, PrototypeBank};

pub const MAGIC: &[u8; 8] = b"TAAMCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Serialize, Deserialize)]
struct SiteMeta {
    width: usize,
    heads: usize,
    embedding_dim: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum LearnerKind {
    Modulated,
    Finetune,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    learner: LearnerKind,
    hops: usize,
    layers: Vec<[usize; 2]>,
    modulators: Vec<Vec<SiteMeta>>,
    hidden_dim: usize,
    slots: Vec<ClassSlot>,
    frozen: Vec<bool>,
    prototypes: Vec<[usize; 2]>,
    tasks: usize,
    /// Accuracy rows as raw f64 bits so they survive JSON exactly.
    matrix_bits: Vec<Vec<u64>>,
    retrievals: Vec<Retrieval>,
    donors: Vec<Option<usize>>,
    config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: RunState,
    pub config: serde_json::Value,
}

struct BlockWriter(Vec<u8>);

impl BlockWriter {
    fn put(&mut self, a: &Array2<f64>) {
        for v in a.iter() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn put_iter(&mut self, it: impl Iterator<Item = f64>) {
        for v in it {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct BlockReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl BlockReader<'_> {
    fn take(&mut self, n: usize) -> Result<Vec<f64>> {
        let end = n
            .checked_mul(8)
            .and_then(|b| b.checked_add(self.pos))
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Integrity("parameter blocks are shorter than the header says".into()))?;
        let out = self.bytes[self.pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        self.pos = end;
        Ok(out)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let v = self.take(rows * cols)?;
        Ok(Array2::from_shape_vec((rows, cols), v).expect("length checked"))
    }
}

type LearnerParts<'a> = (
    LearnerKind,
    &'a [Array2<f64>],
    Option<(&'a Backbone, &'a PrototypeBank)>,
    &'a ClassifierHead,
);

fn split_learner(state: &RunState) -> LearnerParts<'_> {
    match &state.learner {
        Learner::Modulated { backbone, bank, head } => {
            (LearnerKind::Modulated, backbone.layers(), Some((backbone, bank)), head)
        }
        Learner::Finetune(m) => (LearnerKind::Finetune, &m.layers, None, &m.head),
    }
}

pub fn encode(state: &RunState, config: &serde_json::Value) -> Result<Vec<u8>> {
    let (learner, layers, modulated, head) = split_learner(state);
    let mut blocks = BlockWriter(Vec::new());
    for w in layers {
        blocks.put(w);
    }
    let mut modulators = Vec::new();
    let mut prototypes = Vec::new();
    let mut hops = 0;
    if let Some((backbone, bank)) = modulated {
        hops = backbone.hops();
        for e in bank.entries() {
            let mut metas = Vec::new();
            for site in e.modulator.sites() {
                metas.push(SiteMeta {
                    width: site.width(),
                    heads: site.heads(),
                    embedding_dim: site.embedding_dim(),
                });
                for t in site.tensors() {
                    blocks.put(t);
                }
            }
            blocks.put(e.modulator.embedding());
            modulators.push(metas);
        }
    }
    for slot in head.slots() {
        blocks.put_iter(head.weight().column(slot.column).iter().copied());
    }
    if let Some((_, bank)) = modulated {
        for e in bank.entries() {
            prototypes.push([e.prototype.dim(), e.prototype.nodes()]);
            blocks.put_iter(e.prototype.vector().iter().copied());
        }
    }

    let header = Header {
        learner,
        hops,
        layers: layers.iter().map(|w| [w.nrows(), w.ncols()]).collect(),
        modulators,
        hidden_dim: head.hidden_dim(),
        slots: head.slots().to_vec(),
        frozen: head.frozen_mask().to_vec(),
        prototypes,
        tasks: state.matrix.tasks(),
        matrix_bits: state
            .matrix
            .rows()
            .iter()
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect(),
        retrievals: state.retrievals.clone(),
        donors: state.donors.clone(),
        config: config.clone(),
    };
    let header = serde_json::to_vec(&header)?;

    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + blocks.0.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blocks.0);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::Integrity("not a checkpoint (bad magic bytes)".into()));
    }
    if bytes.len() < PREFIX_LEN + DIGEST_LEN {
        return Err(Error::Integrity("file is truncated".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::IncompatibleVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity("checksum mismatch (truncated or corrupted)".into()));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|l| l.checked_add(PREFIX_LEN))
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Integrity("header length exceeds file".into()))?;
    let header: Header =
        serde_json::from_slice(&body[PREFIX_LEN..header_end]).map_err(|e| Error::Integrity(format!("header: {e}")))?;
    let mut r = BlockReader {
        bytes: &body[header_end..],
        pos: 0,
    };

    let layers = header
        .layers
        .iter()
        .map(|&[a, b]| r.matrix(a, b))
        .collect::<Result<Vec<_>>>()?;
    let mut modulators = Vec::new();
    for metas in &header.modulators {
        let mut sites = Vec::new();
        let mut embedding_dim = 0;
        for m in metas {
            let rows = m.heads * 2 * m.width;
            sites.push(SiteParams::new(
                r.matrix(rows, m.embedding_dim)?,
                r.matrix(rows, 1)?,
                r.matrix(m.heads, m.width)?,
                r.matrix(1, m.heads)?,
            )?);
            embedding_dim = m.embedding_dim;
        }
        let e = r.matrix(embedding_dim, 1)?;
        modulators.push(Modulator::from_parts(sites, e, true)?);
    }
    let mut weight = Array2::zeros((header.hidden_dim, header.slots.len()));
    for slot in &header.slots {
        let col = r.take(header.hidden_dim)?;
        weight.column_mut(slot.column).assign(&Array1::from(col));
    }
    let head = ClassifierHead::from_parts(weight, header.slots, header.frozen)?;
    let prototypes = header
        .prototypes
        .iter()
        .map(|&[d, n]| Prototype::new(Array1::from(r.take(d)?), n))
        .collect::<Result<Vec<_>>>()?;
    if r.pos != r.bytes.len() {
        return Err(Error::Integrity("trailing bytes after the last block".into()));
    }

    let learner = match header.learner {
        LearnerKind::Finetune => Learner::Finetune(FinetuneModel { layers, head }),
        LearnerKind::Modulated => {
            if modulators.len() != prototypes.len() {
                return Err(Error::Integrity("modulator and prototype counts differ".into()));
            }
            let mut bank = PrototypeBank::new();
            for (i, (modulator, prototype)) in modulators.into_iter().zip(prototypes).enumerate() {
                bank.restore(BankEntry {
                    task: i + 1,
                    prototype,
                    modulator,
                })?;
            }
            Learner::Modulated {
                backbone: Backbone::from_layers(layers, header.hops)?,
                bank,
                head,
            }
        }
    };
    let rows = header
        .matrix_bits
        .iter()
        .map(|r| r.iter().map(|&b| f64::from_bits(b)).collect())
        .collect();
    Ok(Checkpoint {
        state: RunState {
            learner,
            matrix: AccuracyMatrix::from_rows(header.tasks, rows)?,
            retrievals: header.retrievals,
            donors: header.donors,
        },
        config: header.config,
    })
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn save_checkpoint(path: &Path, state: &RunState, config: &serde_json::Value) -> Result<()> {
    let bytes = encode(state, config)?;
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_sbm, SbmSpec};
    use crate::harness::{build_stream, prepare_stream, run_continual, ClassOrder, Method, Protocol, RunOptions};

    fn small_state(method: Method) -> RunState {
        let g = generate_sbm(&SbmSpec::new(4, 10), 3).unwrap();
        let s = build_stream(&g, &Protocol::Equal(2), ClassOrder::Ascending, 3).unwrap();
        let tasks = prepare_stream(&g, &s, 2).unwrap();
        let mut opts = RunOptions {
            method,
            hidden_dim: 8,
            ..RunOptions::default()
        };
        opts.train.epochs = 3;
        opts.train.embedding_dim = 4;
        run_continual(&tasks, opts, 1).unwrap().state
    }

    #[test]
    fn round_trip_is_lossless() {
        let cfg = serde_json::json!({"seed": 1});
        for method in [Method::Taam, Method::Finetune] {
            let state = small_state(method);
            let back = decode(&encode(&state, &cfg).unwrap()).unwrap();
            assert_eq!(back.state, state);
            assert_eq!(back.config, cfg);
        }
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = encode(&small_state(Method::Taam), &serde_json::Value::Null).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(Error::Integrity(_))));

        assert!(matches!(decode(&bytes[..bytes.len() - 9]), Err(Error::Integrity(_))));
        assert!(matches!(decode(&bytes[..10]), Err(Error::Integrity(_))));

        let mut flipped = bytes.clone();
        let mid = bytes.len() - 100;
        flipped[mid] ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::Integrity(_))));

        let mut future = bytes.clone();
        future[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode(&future),
            Err(Error::IncompatibleVersion { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn save_replaces_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let state = small_state(Method::Taam);
        save_checkpoint(&path, &state, &serde_json::Value::Null).unwrap();
        save_checkpoint(&path, &state, &serde_json::Value::Null).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap().state, state);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
