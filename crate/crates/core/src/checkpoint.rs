//! Binary checkpoints of trained fixed networks.
//!
//! Layout: the line `cellsearch-ckpt v1`, a line `meta <bytes>` followed by
//! that many bytes of JSON, then one record per tensor: a line
//! `<param|buffer> <name> <f32|f64> <shape>` followed by the raw
//! little-endian values. Records are sorted by name.

use std::fs;
use std::io::{BufRead, Cursor, Read};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::params::Mode;
use crate::supernet::{NetMode, NetworkConfig, SuperNet};
use crate::tensor::{Real, Shape, Tensor};

pub const MAGIC: &str = "cellsearch-ckpt v1";

/// Everything needed to rebuild and feed the network.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub network: NetworkConfig,
    pub genotype: Genotype,
    pub norm: NormStats,
    pub class_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMeta {
    network: NetworkConfig,
    genotype: serde_json::Value,
    norm: NormStats,
    class_names: Vec<String>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn encode_tensor<T: Real>(out: &mut Vec<u8>, kind: &str, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(format!("{kind} {name} {} {}\n", T::NAME, t.shape()).as_bytes());
    for v in t.data() {
        if T::NAME == "f64" {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        } else {
            out.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
    }
}

pub fn to_bytes<T: Real>(net: &SuperNet<T>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let raw = RawMeta {
        network: meta.network.clone(),
        genotype: serde_json::from_str(&meta.genotype.to_json())?,
        norm: meta.norm.clone(),
        class_names: meta.class_names.clone(),
    };
    let json = serde_json::to_vec(&raw)?;
    let mut out = format!("{MAGIC}\nmeta {}\n", json.len()).into_bytes();
    out.extend_from_slice(&json);
    let mut records: Vec<(&str, &str, &Tensor<T>)> = net
        .params
        .iter()
        .map(|(n, p)| ("param", n, &p.value))
        .chain(net.params.buffers().map(|(n, b)| ("buffer", n, b)))
        .collect();
    records.sort_by_key(|r| r.1);
    for (kind, name, t) in records {
        encode_tensor(&mut out, kind, name, t);
    }
    Ok(out)
}

pub fn save<T: Real>(path: &Path, net: &SuperNet<T>, meta: &CheckpointMeta) -> Result<()> {
    if net.is_relaxed() {
        return Err(bad("only fixed networks are checkpointed"));
    }
    let bytes = to_bytes(net, meta)?;
    fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

fn read_line(r: &mut Cursor<&[u8]>) -> Result<String> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if !line.ends_with('\n') {
        return Err(bad("truncated file"));
    }
    line.pop();
    Ok(line)
}

fn parse_shape(text: &str) -> Result<Shape> {
    let dims = text
        .split('x')
        .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad shape {text}"))))
        .collect::<Result<Vec<_>>>()?;
    Shape::new(dims)
}

/// Rebuilds the fixed network and overwrites every tensor from the file.
pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<(SuperNet<T>, CheckpointMeta)> {
    let mut r = Cursor::new(bytes);
    if read_line(&mut r)? != MAGIC {
        return Err(bad(format!("missing `{MAGIC}` header")));
    }
    let meta_line = read_line(&mut r)?;
    let len: usize = meta_line
        .strip_prefix("meta ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| bad("missing meta record"))?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| bad("truncated meta record"))?;
    let raw: RawMeta = serde_json::from_slice(&json).map_err(|e| bad(format!("meta: {e}")))?;
    let meta = CheckpointMeta {
        network: raw.network,
        genotype: Genotype::from_json(&raw.genotype.to_string())?,
        norm: raw.norm,
        class_names: raw.class_names,
    };
    let mut net = SuperNet::<T>::build(
        &meta.network,
        NetMode::Fixed(meta.genotype.clone()),
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    let mut seen = 0usize;
    while (r.position() as usize) < bytes.len() {
        let header = read_line(&mut r)?;
        let fields: Vec<&str> = header.split(' ').collect();
        let [kind, name, dtype, shape] = fields[..] else {
            return Err(bad(format!("malformed record header `{header}`")));
        };
        let shape = parse_shape(shape)?;
        let width = match dtype {
            "f32" => 4,
            "f64" => 8,
            other => return Err(bad(format!("{name}: unknown dtype {other}"))),
        };
        let mut raw = vec![0u8; shape.numel() * width];
        r.read_exact(&mut raw)
            .map_err(|_| bad(format!("{name}: truncated values")))?;
        let values: Vec<T> = raw
            .chunks_exact(width)
            .map(|c| {
                let v = if width == 8 {
                    f64::from_le_bytes(c.try_into().expect("8 bytes"))
                } else {
                    f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64
                };
                T::lit(v)
            })
            .collect();
        let target = match kind {
            "param" => net.params.get_mut(name).map(|p| &mut p.value),
            "buffer" => net.params.buffer_mut(name),
            other => return Err(bad(format!("{name}: unknown record kind {other}"))),
        };
        let target = target.ok_or_else(|| bad(format!("{name}: not present in the network")))?;
        if target.shape() != &shape {
            return Err(bad(format!(
                "{name}: shape {shape} in checkpoint, {} in network",
                target.shape()
            )));
        }
        target.data_mut().copy_from_slice(&values);
        seen += 1;
    }
    let expected = net.params.len() + net.params.buffers().count();
    if seen != expected {
        return Err(bad(format!("{seen} tensors in checkpoint, network has {expected}")));
    }
    net.set_mode(Mode::Eval);
    Ok((net, meta))
}

pub fn load<T: Real>(path: &Path) -> Result<(SuperNet<T>, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::file(path, format!("checkpoint: {m}")),
        other => other,
    })
}
