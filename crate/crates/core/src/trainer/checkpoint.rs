//! Binary checkpoint format.
//!
//! Layout (little endian): magic `MODK`, version `u16`, flags `u8`
//! (bit 0: optimizer moments present), topology, step and example counters,
//! a CRC32 of everything so far, then one CRC-protected block per tensor,
//! optional CRC-protected Adam blocks in the same order, and finally a
//! CRC-protected block of random generator states. Values are stored as f64
//! so that load followed by save reproduces the input byte for byte.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Ensemble, Topology};
use crate::nextvlad::ModelConfig;
use crate::numerics::{AdamState, Matrix};
use crate::params::Parameters;
use crate::wire::{ByteReader, ByteWriter};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MODK";
pub const CHECKPOINT_VERSION: u16 = 1;
const FLAG_OPTIMIZER: u8 = 1;

/// Serializable position of a ChaCha generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Ensemble,
    pub step: u64,
    pub examples_seen: u64,
    /// Adam moments per tensor in parameter visiting order.
    pub optimizer: Option<Vec<AdamState>>,
    pub rngs: Vec<RngState>,
}

impl Checkpoint {
    pub fn new(model: Ensemble) -> Self {
        Self {
            model,
            step: 0,
            examples_seen: 0,
            optimizer: None,
            rngs: Vec::new(),
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.model.topology
    }

    /// Fails with the list of differing fields when the stored topology is
    /// not `expected`.
    pub fn check_topology(&self, expected: &Topology) -> Result<()> {
        let diff = self.topology().differences(expected);
        if diff.is_empty() {
            Ok(())
        } else {
            Err(Error::Topology(diff))
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        w.u8(if self.optimizer.is_some() { FLAG_OPTIMIZER } else { 0 });
        write_topology(&mut w, self.topology())?;
        w.u64(self.step);
        w.u64(self.examples_seen);
        let crc = crc32fast::hash(w.slice_from(0));
        w.u32(crc);

        let mut tensors: Vec<(String, &Matrix)> = Vec::new();
        self.model.visit(&mut |name, m| tensors.push((name.to_string(), m)));
        w.u32(tensors.len() as u32);
        for (name, m) in &tensors {
            let start = w.len();
            w.str16(name);
            w.u32(m.rows() as u32);
            w.u32(m.cols() as u32);
            m.data().iter().for_each(|&x| w.f64(x));
            let crc = crc32fast::hash(w.slice_from(start));
            w.u32(crc);
        }

        if let Some(states) = &self.optimizer {
            if states.len() != tensors.len() {
                return Err(Error::Contract(format!(
                    "{} optimizer states for {} tensors",
                    states.len(),
                    tensors.len()
                )));
            }
            for (state, (name, m)) in states.iter().zip(&tensors) {
                if state.m.data().len() != m.data().len() || state.v.data().len() != m.data().len() {
                    return Err(Error::Contract(format!("optimizer state shape for `{name}`")));
                }
                let start = w.len();
                w.u64(state.step);
                state.m.data().iter().for_each(|&x| w.f64(x));
                state.v.data().iter().for_each(|&x| w.f64(x));
                let crc = crc32fast::hash(w.slice_from(start));
                w.u32(crc);
            }
        }

        let start = w.len();
        w.u32(self.rngs.len() as u32);
        for r in &self.rngs {
            w.bytes(&r.seed);
            w.u64(r.stream);
            w.u128(r.word_pos);
        }
        let crc = crc32fast::hash(w.slice_from(start));
        w.u32(crc);
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let at = r.offset();
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: CHECKPOINT_VERSION,
                offset: at,
            });
        }
        let flags = r.u8()?;
        if flags & !FLAG_OPTIMIZER != 0 {
            return Err(Error::Format {
                offset: at + 2,
                msg: format!("unknown flags {flags:#04x}"),
            });
        }
        let topology = read_topology(&mut r)?;
        let step = r.u64()?;
        let examples_seen = r.u64()?;
        check_crc(&mut r, 0, "header")?;
        topology.validate().map_err(|e| Error::Format {
            offset: 6,
            msg: format!("invalid topology: {e}"),
        })?;

        let mut model = Ensemble::zeros(topology)?;
        let expected = model.tensor_count();
        let at = r.offset();
        let count = r.u32()? as usize;
        if count != expected {
            return Err(Error::Format {
                offset: at,
                msg: format!("{count} tensors, topology needs {expected}"),
            });
        }
        let mut failure: Option<Error> = None;
        let mut names = Vec::with_capacity(count);
        model.visit_mut(&mut |name, m| {
            if failure.is_some() {
                return;
            }
            if let Err(e) = read_tensor(&mut r, name, m) {
                failure = Some(e);
            }
            names.push(name.to_string());
        });
        if let Some(e) = failure {
            return Err(e);
        }

        let mut optimizer = None;
        if flags & FLAG_OPTIMIZER != 0 {
            let mut states = Vec::with_capacity(count);
            let mut shapes = Vec::with_capacity(count);
            model.visit(&mut |_, m| shapes.push((m.rows(), m.cols())));
            for (name, &(rows, cols)) in names.iter().zip(&shapes) {
                let start = r.offset();
                let mut s = AdamState::new(rows, cols);
                s.step = r.u64()?;
                read_values(&mut r, s.m.data_mut())?;
                read_values(&mut r, s.v.data_mut())?;
                check_crc(&mut r, start, &format!("adam:{name}"))?;
                states.push(s);
            }
            optimizer = Some(states);
        }

        let start = r.offset();
        let n = r.u32()? as usize;
        if n > bytes.len() / 56 + 1 {
            return Err(Error::Format {
                offset: start,
                msg: format!("implausible generator count {n}"),
            });
        }
        let mut rngs = Vec::with_capacity(n);
        for _ in 0..n {
            let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
            let stream = r.u64()?;
            let word_pos = r.u128()?;
            rngs.push(RngState {
                seed,
                stream,
                word_pos,
            });
        }
        check_crc(&mut r, start, "rng")?;
        r.expect_end()?;
        Ok(Self {
            model,
            step,
            examples_seen,
            optimizer,
            rngs,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::wire::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn write_topology(w: &mut ByteWriter, t: &Topology) -> Result<()> {
    let m = &t.model;
    for v in [
        m.visual_dim,
        m.audio_dim,
        m.expansion,
        m.groups,
        m.clusters,
        m.hidden,
        m.class_count,
    ] {
        w.u32(u32::try_from(v).map_err(|_| Error::Config(format!("dimension {v} too large")))?);
    }
    w.u8(m.global_norm as u8);
    w.u8(t.learnable_weights as u8);
    w.u8(t.tree.len() as u8);
    for &b in &t.tree {
        w.u32(b as u32);
    }
    Ok(())
}

fn read_topology(r: &mut ByteReader<'_>) -> Result<Topology> {
    let mut dims = [0usize; 7];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let global_norm = read_bool(r)?;
    let learnable_weights = read_bool(r)?;
    let depth = r.u8()? as usize;
    let tree = (0..depth)
        .map(|_| r.u32().map(|b| b as usize))
        .collect::<Result<Vec<_>>>()?;
    let [visual_dim, audio_dim, expansion, groups, clusters, hidden, class_count] = dims;
    Ok(Topology {
        model: ModelConfig {
            visual_dim,
            audio_dim,
            expansion,
            groups,
            clusters,
            hidden,
            class_count,
            global_norm,
        },
        tree,
        learnable_weights,
    })
}

fn read_bool(r: &mut ByteReader<'_>) -> Result<bool> {
    let at = r.offset();
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(Error::Format {
            offset: at,
            msg: format!("expected a boolean byte, found {v}"),
        }),
    }
}

fn read_tensor(r: &mut ByteReader<'_>, name: &str, m: &mut Matrix) -> Result<()> {
    let start = r.offset();
    let stored = r.str16()?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    if stored != name || rows != m.rows() || cols != m.cols() {
        // blame corruption when the block at its expected size fails its crc
        let header = 2 + name.len() as u64 + 8;
        let corrupt = r
            .buffer()
            .get(start as usize..)
            .and_then(|rest| {
                let body = (header + 8 * m.data().len() as u64) as usize;
                let stored_crc = rest.get(body..body + 4)?;
                Some(crc32fast::hash(&rest[..body]) != u32::from_le_bytes(stored_crc.try_into().ok()?))
            });
        if corrupt.unwrap_or(false) {
            return Err(Error::Checksum {
                tensor: name.to_string(),
                offset: start,
            });
        }
        return Err(Error::Format {
            offset: start,
            msg: format!(
                "tensor `{stored}` {rows}x{cols} where `{name}` {}x{} was expected",
                m.rows(),
                m.cols()
            ),
        });
    }
    read_values(r, m.data_mut())?;
    check_crc(r, start, name)
}

fn read_values(r: &mut ByteReader<'_>, out: &mut [f64]) -> Result<()> {
    let raw = r.take(out.len() * 8)?;
    for (o, chunk) in out.iter_mut().zip(raw.chunks_exact(8)) {
        *o = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
    }
    Ok(())
}

fn check_crc(r: &mut ByteReader<'_>, start: u64, block: &str) -> Result<()> {
    let actual = crc32fast::hash(r.since(start));
    let stored = r.u32()?;
    if actual != stored {
        return Err(Error::Checksum {
            tensor: block.to_string(),
            offset: start,
        });
    }
    Ok(())
}
