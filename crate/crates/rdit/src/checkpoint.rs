//! Checkpoint persistence.
//!
//! File layout:
//! ```text
//! bytes 0..4    magic "RDIT"
//! bytes 4..8    format version (u32 LE)
//! bytes 8..16   header length (u64 LE)
//! ...           JSON header
//! ...           zero padding to a 64-byte boundary
//! payload       little-endian f32 tensors, each record 64-byte aligned
//! ```
//!
//! The header embeds the full experiment config (revalidated on load), the
//! step counter, the exact RNG position, and a named tensor table with
//! payload-relative offsets. Saving is deterministic: save -> load -> save
//! produces byte-identical files.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{RditError, Result};
use crate::numerics::tensor::Tensor;
use crate::trainer::TrainState;

pub const MAGIC: &[u8; 4] = b"RDIT";
pub const VERSION: u32 = 1;
const ALIGN: usize = 64;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Offset into the payload region, 64-byte aligned.
    offset: u64,
    /// Element count.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    step: u64,
    config: ExperimentConfig,
    rng_seed: String,
    rng_word_pos: String,
    tensors: Vec<TensorEntry>,
}

fn align_up(x: usize) -> usize {
    x.div_ceil(ALIGN) * ALIGN
}

fn tensor_groups(state: &TrainState) -> Vec<(String, Tensor<f32>)> {
    let mut out = Vec::new();
    for (i, p) in state.model.params.iter().enumerate() {
        out.push((format!("param/{}", p.name), p.tensor.clone()));
        out.push((format!("ema/{}", p.name), state.ema[i].clone()));
        out.push((format!("m/{}", p.name), state.opt_m[i].clone()));
        out.push((format!("v/{}", p.name), state.opt_v[i].clone()));
    }
    out
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let groups = tensor_groups(state);
    let mut entries = Vec::with_capacity(groups.len());
    let mut offset = 0usize;
    for (name, t) in &groups {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset: offset as u64,
            len: t.numel() as u64,
        });
        offset = align_up(offset + t.numel() * 4);
    }
    let header = Header {
        step: state.step,
        config: state.exp.clone(),
        rng_seed: hex(&state.rng.get_seed()),
        rng_word_pos: format!("{}", state.rng.get_word_pos()),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| RditError::Checkpoint(format!("header encode: {e}")))?;

    let payload_start = align_up(16 + header_json.len());
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    file.write_all(&vec![0u8; payload_start - 16 - header_json.len()])?;
    let mut written = 0usize;
    for (_, t) in &groups {
        for &v in t.data() {
            file.write_all(&v.to_le_bytes())?;
        }
        written += t.numel() * 4;
        let aligned = align_up(written);
        file.write_all(&vec![0u8; aligned - written])?;
        written = aligned;
    }
    file.flush()?;
    Ok(())
}

/// Load a checkpoint, rebuilding the train state from the embedded config.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let (header, payload) = read_file(path)?;
    header.config.validate()?;
    let mut state = TrainState::new_unchecked(&header.config)?;
    state.step = header.step;
    let seed = unhex(&header.rng_seed)?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    let pos: u128 = header
        .rng_word_pos
        .parse()
        .map_err(|_| RditError::Checkpoint("bad rng word position".into()))?;
    rng.set_word_pos(pos);
    state.rng = rng;

    let mut by_name: std::collections::HashMap<&str, &TensorEntry> =
        std::collections::HashMap::new();
    for e in &header.tensors {
        by_name.insert(e.name.as_str(), e);
    }
    let names: Vec<String> = state.model.params.iter().map(|p| p.name.clone()).collect();
    for (i, name) in names.iter().enumerate() {
        let shape = state.model.params[i].tensor.shape().to_vec();
        state.model.params[i].tensor =
            read_tensor(&by_name, &payload, &format!("param/{name}"), &shape)?;
        state.ema[i] = read_tensor(&by_name, &payload, &format!("ema/{name}"), &shape)?;
        state.opt_m[i] = read_tensor(&by_name, &payload, &format!("m/{name}"), &shape)?;
        state.opt_v[i] = read_tensor(&by_name, &payload, &format!("v/{name}"), &shape)?;
    }
    Ok(state)
}

/// Load, then verify the embedded model config matches `expected` tensor by
/// tensor (explicit shape errors name the offending tensor).
pub fn load_checkpoint_expecting(
    path: &Path,
    expected: &crate::config::ModelConfig,
) -> Result<TrainState> {
    let (header, _) = read_file(path)?;
    let want = crate::backbone::Model::<f32>::init(expected, 0)?;
    let got = crate::backbone::Model::<f32>::init(&header.config.model, 0)?;
    for wp in &want.params {
        match got.params.iter().find(|gp| gp.name == wp.name) {
            None => {
                return Err(RditError::Checkpoint(format!(
                    "checkpoint lacks tensor `{}` required by the requested config",
                    wp.name
                )))
            }
            Some(gp) if gp.tensor.shape() != wp.tensor.shape() => {
                return Err(RditError::shape(
                    format!("checkpoint tensor `{}`", wp.name),
                    format!("{:?}", wp.tensor.shape()),
                    format!("{:?}", gp.tensor.shape()),
                ))
            }
            _ => {}
        }
    }
    load_checkpoint(path)
}

fn read_file(path: &Path) -> Result<(Header, Vec<u8>)> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    if raw.len() < 16 || &raw[0..4] != MAGIC {
        return Err(RditError::Checkpoint(format!(
            "{}: bad magic (not an RDIT checkpoint)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(raw[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(RditError::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let hlen = u64::from_le_bytes(raw[8..16].try_into().unwrap()) as usize;
    if raw.len() < 16 + hlen {
        return Err(RditError::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&raw[16..16 + hlen])
        .map_err(|e| RditError::Checkpoint(format!("header decode: {e}")))?;
    let payload_start = align_up(16 + hlen);
    if raw.len() < payload_start {
        return Err(RditError::Checkpoint("truncated payload".into()));
    }
    Ok((header, raw[payload_start..].to_vec()))
}

fn read_tensor(
    by_name: &std::collections::HashMap<&str, &TensorEntry>,
    payload: &[u8],
    name: &str,
    expect_shape: &[usize],
) -> Result<Tensor<f32>> {
    let e = by_name
        .get(name)
        .ok_or_else(|| RditError::Checkpoint(format!("missing tensor `{name}`")))?;
    if e.shape != expect_shape {
        return Err(RditError::shape(
            format!("checkpoint tensor `{name}`"),
            format!("{expect_shape:?}"),
            format!("{:?}", e.shape),
        ));
    }
    if e.dtype != "f32" {
        return Err(RditError::Checkpoint(format!("tensor `{name}`: unsupported dtype {}", e.dtype)));
    }
    let start = e.offset as usize;
    let bytes = e.len as usize * 4;
    if payload.len() < start + bytes {
        return Err(RditError::Checkpoint(format!("tensor `{name}`: truncated payload")));
    }
    let data: Vec<f32> = payload[start..start + bytes]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Tensor::new(expect_shape.to_vec(), data))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    if s.len() != 64 {
        return Err(RditError::Checkpoint("bad rng seed length".into()));
    }
    let mut out = [0u8; 32];
    for i in 0..32 {
        out[i] = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
            .map_err(|_| RditError::Checkpoint("bad rng seed hex".into()))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{preset, ExperimentConfig};
    use crate::datakit::gen_synthetic;
    use crate::trainer::TrainState;

    fn small_exp() -> ExperimentConfig {
        let mut exp = ExperimentConfig::default();
        exp.model = preset("toy").unwrap();
        exp.model.depth = 2;
        exp.model.width = 16;
        exp.model.heads = 2;
        exp.model.mlp_hidden = 8;
        exp.model.image = 16;
        exp.model.patch = 4;
        exp.model.n_reg = 2;
        exp.model.reg_start = 0;
        exp.model.reg_end = 1;
        exp.train.batch = 4;
        exp.train.warmup = 2;
        exp
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let exp = small_exp();
        let ds = gen_synthetic(4, 4, 16, 1).unwrap();
        let mut state = TrainState::new(&exp).unwrap();
        for _ in 0..2 {
            let b = state.next_batch(&ds);
            state.train_step(&b).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.rdit");
        let p2 = dir.path().join("b.rdit");
        save_checkpoint(&state, &p1).unwrap();
        let restored = load_checkpoint(&p1).unwrap();
        save_checkpoint(&restored, &p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn roundtrip_restores_everything_bit_exact() {
        let exp = small_exp();
        let ds = gen_synthetic(4, 4, 16, 1).unwrap();
        let mut state = TrainState::new(&exp).unwrap();
        for _ in 0..3 {
            let b = state.next_batch(&ds);
            state.train_step(&b).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.rdit");
        save_checkpoint(&state, &p).unwrap();
        let r = load_checkpoint(&p).unwrap();
        assert_eq!(r.step, state.step);
        assert_eq!(r.rng.get_word_pos(), state.rng.get_word_pos());
        for i in 0..state.model.params.len() {
            assert_eq!(r.model.params[i].tensor.data(), state.model.params[i].tensor.data());
            assert_eq!(r.ema[i].data(), state.ema[i].data());
            assert_eq!(r.opt_m[i].data(), state.opt_m[i].data());
            assert_eq!(r.opt_v[i].data(), state.opt_v[i].data());
        }
    }

    #[test]
    fn resume_equals_uninterrupted_training() {
        let exp = small_exp();
        let ds = gen_synthetic(4, 4, 16, 1).unwrap();

        // Uninterrupted: 6 steps.
        let mut full = TrainState::new(&exp).unwrap();
        for _ in 0..6 {
            let b = full.next_batch(&ds);
            full.train_step(&b).unwrap();
        }

        // Interrupted at 3, checkpointed, resumed for 3 more.
        let mut half = TrainState::new(&exp).unwrap();
        for _ in 0..3 {
            let b = half.next_batch(&ds);
            half.train_step(&b).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.rdit");
        save_checkpoint(&half, &p).unwrap();
        let mut resumed = load_checkpoint(&p).unwrap();
        for _ in 0..3 {
            let b = resumed.next_batch(&ds);
            resumed.train_step(&b).unwrap();
        }

        for i in 0..full.model.params.len() {
            assert_eq!(
                full.model.params[i].tensor.data(),
                resumed.model.params[i].tensor.data(),
                "param {} diverged",
                full.model.params[i].name
            );
            assert_eq!(full.ema[i].data(), resumed.ema[i].data());
        }
        assert_eq!(full.step, resumed.step);
    }

    #[test]
    fn mismatched_config_names_offending_tensor() {
        let exp = small_exp();
        let state = TrainState::new(&exp).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.rdit");
        save_checkpoint(&state, &p).unwrap();
        let mut wider = exp.model.clone();
        wider.width = 32;
        wider.heads = 4;
        let err = load_checkpoint_expecting(&p, &wider).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("patch_embed.w") || msg.contains("block0"), "{msg}");
    }

    #[test]
    fn rejects_garbage_and_wrong_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.rdit");
        std::fs::write(&p, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&p).is_err());
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&99u32.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        let err = load_checkpoint(&p).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }
}
