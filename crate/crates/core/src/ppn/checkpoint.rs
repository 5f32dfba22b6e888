use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use super::{PpnConfig, PpnError, PpnModel};
use crate::tensor::{ParameterSet, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "scg-ppn-checkpoint";

fn bad(msg: impl Into<String>) -> PpnError {
    PpnError::Checkpoint(msg.into())
}

/// Serialise `model` plus free-form `metadata` (no newlines or `=` in keys).
///
/// Layout: a text header (`MAGIC version`, `[config]`, `[meta]`, `[vocab]`,
/// `[tensors]` manifest of `name rows cols offset`, `[data]`) followed by the
/// tensors as little-endian `f64` in manifest order.
pub fn write_checkpoint<W: Write>(mut out: W, model: &PpnModel, metadata: &BTreeMap<String, String>) -> Result<(), PpnError> {
    let mut header = format!("{MAGIC} {CHECKPOINT_VERSION}\n[config]\n");
    for (k, v) in model.config().to_pairs() {
        header.push_str(&format!("{k}={v}\n"));
    }
    header.push_str("[meta]\n");
    for (k, v) in metadata {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(bad(format!("metadata entry `{k}` contains a reserved character")));
        }
        header.push_str(&format!("{k}={v}\n"));
    }
    header.push_str(&format!("[vocab] {}\n", model.vocab().len()));
    for t in model.vocab() {
        header.push_str(t);
        header.push('\n');
    }
    header.push_str(&format!("[tensors] {}\n", model.params().len()));
    let mut offset = 0usize;
    for (name, t) in model.params().iter() {
        header.push_str(&format!("{name} {} {} {offset}\n", t.rows(), t.cols()));
        offset += t.len() * 8;
    }
    header.push_str("[data]\n");
    out.write_all(header.as_bytes())?;
    let mut bytes = Vec::with_capacity(offset);
    for (_, t) in model.params().iter() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&bytes)?;
    Ok(())
}

fn line<R: BufRead>(input: &mut R) -> Result<String, PpnError> {
    let mut s = String::new();
    if input.read_line(&mut s)? == 0 {
        return Err(bad("unexpected end of header"));
    }
    Ok(s.trim_end_matches('\n').to_string())
}

fn counted(line: &str, section: &str) -> Result<usize, PpnError> {
    line.strip_prefix(section)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| bad(format!("expected `{section} <count>`, found `{line}`")))
}

pub fn read_checkpoint<R: BufRead>(mut input: R) -> Result<(PpnModel, BTreeMap<String, String>), PpnError> {
    let first = line(&mut input)?;
    let version = first
        .strip_prefix(MAGIC)
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| bad("not a checkpoint file"))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    if line(&mut input)? != "[config]" {
        return Err(bad("missing [config] section"));
    }
    let mut config = PpnConfig::default();
    let mut next = line(&mut input)?;
    while next != "[meta]" {
        let (k, v) = next.split_once('=').ok_or_else(|| bad(format!("malformed config line `{next}`")))?;
        config.set(k, v)?;
        next = line(&mut input)?;
    }
    config.validate()?;
    let mut metadata = BTreeMap::new();
    next = line(&mut input)?;
    while !next.starts_with("[vocab]") {
        let (k, v) = next.split_once('=').ok_or_else(|| bad(format!("malformed metadata line `{next}`")))?;
        metadata.insert(k.to_string(), v.to_string());
        next = line(&mut input)?;
    }
    let n_vocab = counted(&next, "[vocab]")?;
    let vocab = (0..n_vocab).map(|_| line(&mut input)).collect::<Result<Vec<_>, _>>()?;
    let n_tensors = counted(&line(&mut input)?, "[tensors]")?;
    let mut manifest = Vec::with_capacity(n_tensors);
    let mut expected_offset = 0usize;
    for _ in 0..n_tensors {
        let l = line(&mut input)?;
        let parts: Vec<&str> = l.split(' ').collect();
        let parsed = match parts.as_slice() {
            [name, r, c, o] => match (r.parse::<usize>(), c.parse::<usize>(), o.parse::<usize>()) {
                (Ok(r), Ok(c), Ok(o)) => Some((name.to_string(), r, c, o)),
                _ => None,
            },
            _ => None,
        };
        let (name, rows, cols, offset) = parsed.ok_or_else(|| bad(format!("malformed manifest line `{l}`")))?;
        if offset != expected_offset {
            return Err(bad(format!("tensor `{name}` at offset {offset}, expected {expected_offset}")));
        }
        expected_offset += rows * cols * 8;
        manifest.push((name, rows, cols));
    }
    if line(&mut input)? != "[data]" {
        return Err(bad("missing [data] section"));
    }
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    if data.len() != expected_offset {
        return Err(bad(format!("data section has {} bytes, expected {expected_offset}", data.len())));
    }
    let mut params = ParameterSet::new();
    let mut cursor = 0;
    for (name, rows, cols) in manifest {
        if params.id(&name).is_some() {
            return Err(bad(format!("duplicate tensor `{name}`")));
        }
        let values = data[cursor..cursor + rows * cols * 8]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect();
        cursor += rows * cols * 8;
        params.insert(name, Tensor::from_vec(rows, cols, values), true);
    }
    Ok((PpnModel::from_parts(config, params, vocab)?, metadata))
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &PpnModel, metadata: &BTreeMap<String, String>) -> Result<(), PpnError> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, model, metadata)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(PpnModel, BTreeMap<String, String>), PpnError> {
    read_checkpoint(std::io::BufReader::new(fs::File::open(path)?))
}
