//! Self-describing model checkpoints.
//!
//! Layout: a UTF-8 header of newline-terminated lines
//!
//! ```text
//! res2ctx-checkpoint
//! version 1
//! config {"width":64,...}
//! tensors 3
//! stem.conv.weight	param	64,80,5	0	102400
//! ...
//! end
//! ```
//!
//! followed by the tensor payloads as little-endian IEEE-754 32-bit floats.
//! Offsets are relative to the first payload byte.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamKind;
use crate::tensor::Tensor;

const MAGIC: &str = "res2ctx-checkpoint";
const VERSION: u32 = 1;

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let config = serde_json::to_string(&model.config).map_err(|e| fmt_err(e.to_string()))?;
    let entries = model.params.entries();
    let mut header = format!("{MAGIC}\nversion {VERSION}\nconfig {config}\ntensors {}\n", entries.len());
    let mut offset = 0usize;
    for e in entries {
        let shape: Vec<String> = e.value.shape().iter().map(|d| d.to_string()).collect();
        let nbytes = 4 * e.value.numel();
        header.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", e.name, e.kind.as_str(), shape.join(","), offset, nbytes));
        offset += nbytes;
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.reserve(offset);
    for e in entries {
        for &v in e.value.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct DirEntry {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

fn parse_entry(line: &str) -> Result<DirEntry> {
    let f: Vec<&str> = line.split('\t').collect();
    if f.len() != 5 {
        return Err(fmt_err(format!("directory line has {} fields: {line:?}", f.len())));
    }
    let kind = ParamKind::parse(f[1]).ok_or_else(|| fmt_err(format!("unknown tensor kind {:?}", f[1])))?;
    let shape = f[2]
        .split(',')
        .map(|d| d.parse::<usize>().map_err(|_| fmt_err(format!("bad shape {:?}", f[2]))))
        .collect::<Result<Vec<_>>>()?;
    let num = |s: &str| s.parse::<usize>().map_err(|_| fmt_err(format!("bad number {s:?}")));
    Ok(DirEntry {
        name: f[0].to_string(),
        kind,
        shape,
        offset: num(f[3])?,
        nbytes: num(f[4])?,
    })
}

pub fn from_reader<R: Read>(reader: R) -> Result<Model> {
    let mut r = BufReader::new(reader);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<R>| -> Result<String> {
        line.clear();
        let n = r.read_line(&mut line).map_err(|e| fmt_err(e.to_string()))?;
        if n == 0 || !line.ends_with('\n') {
            return Err(fmt_err("truncated header"));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut r)? != MAGIC {
        return Err(fmt_err("not a res2ctx checkpoint"));
    }
    let version = next_line(&mut r)?;
    if version != format!("version {VERSION}") {
        return Err(fmt_err(format!("unsupported {version:?}")));
    }
    let config_line = next_line(&mut r)?;
    let json = config_line.strip_prefix("config ").ok_or_else(|| fmt_err("missing config line"))?;
    let config: ModelConfig = serde_json::from_str(json).map_err(|e| fmt_err(format!("config: {e}")))?;
    let count_line = next_line(&mut r)?;
    let count: usize = count_line
        .strip_prefix("tensors ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| fmt_err("missing tensor count"))?;
    let dir = (0..count).map(|_| parse_entry(&next_line(&mut r)?)).collect::<Result<Vec<_>>>()?;
    if next_line(&mut r)? != "end" {
        return Err(fmt_err("missing end marker"));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| fmt_err(e.to_string()))?;

    let mut model = Model::build(&config, 0)?;
    if dir.len() != model.params.len() {
        return Err(fmt_err(format!(
            "checkpoint has {} tensors, config implies {}",
            dir.len(),
            model.params.len()
        )));
    }
    let mut expected_offset = 0;
    for d in dir {
        let id = model.params.find(&d.name).ok_or_else(|| fmt_err(format!("unknown tensor {}", d.name)))?;
        let entry = model.params.entry(id);
        if entry.kind != d.kind || entry.value.shape() != d.shape.as_slice() {
            return Err(fmt_err(format!("tensor {} does not match the configured model", d.name)));
        }
        let numel: usize = d.shape.iter().product();
        if d.nbytes != 4 * numel || d.offset != expected_offset || d.offset + d.nbytes > payload.len() {
            return Err(fmt_err(format!("tensor {} has an inconsistent byte range", d.name)));
        }
        expected_offset += d.nbytes;
        let data = payload[d.offset..d.offset + d.nbytes]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        model.params.set(id, Tensor::new(&d.shape, data)?)?;
    }
    if expected_offset != payload.len() {
        return Err(fmt_err("trailing bytes after payload"));
    }
    Ok(model)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    from_reader(f)
}
