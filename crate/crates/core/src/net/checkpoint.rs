//! Binary model container: magic, format version, a JSON manifest, raw
//! little-endian `f64` parameter blocks and a trailing SHA-256 of
//! everything before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gradients::{Constraint, ParameterStore};
use crate::numerics::DenseMatrix;

use super::model::DistGpNet;
use super::spec::NetworkSpec;

pub const MAGIC: &[u8; 8] = b"DGPCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    group: String,
    constraint: Constraint,
    trainable: bool,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    spec: NetworkSpec,
    jitter: f64,
    params: Vec<ParamEntry>,
    metadata: serde_json::Value,
}

/// A loaded model plus whatever metadata was stored with it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: DistGpNet,
    pub metadata: serde_json::Value,
}

pub fn to_bytes(net: &DistGpNet, metadata: &serde_json::Value) -> Result<Vec<u8>> {
    let store = net.params();
    let params = store
        .ids()
        .map(|id| {
            let (rows, cols) = store.raw(id).shape();
            ParamEntry {
                name: store.name(id).to_string(),
                group: store.group(id).to_string(),
                constraint: store.constraint(id),
                trainable: store.is_trainable(id),
                rows,
                cols,
            }
        })
        .collect();
    let manifest = Manifest { spec: net.spec().clone(), jitter: net.jitter, params, metadata: metadata.clone() };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(json.len() + 8 * store.num_scalars() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for id in store.ids() {
        for v in store.raw(id).data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or_else(|| {
        Error::Checkpoint(format!("truncated: need {n} bytes at offset {}", *pos))
    })?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 12 + 32 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut pos = 0;
    if take(body, &mut pos, 8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(body, &mut pos, 4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(take(body, &mut pos, 8)?.try_into().expect("8 bytes")) as usize;
    let manifest: Manifest = serde_json::from_slice(take(body, &mut pos, len)?)
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    let mut store = ParameterStore::new();
    for e in manifest.params {
        let n = e.rows * e.cols;
        let raw: Vec<f64> = take(body, &mut pos, 8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let raw = DenseMatrix::new(e.rows, e.cols, raw).map_err(|err| Error::Checkpoint(format!("{}: {err}", e.name)))?;
        if store.id(&e.name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {}", e.name)));
        }
        store.push_raw(e.name, e.group, raw, e.constraint, e.trainable);
    }
    if pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - pos)));
    }
    manifest.spec.validate()?;
    let net = DistGpNet::from_parts(manifest.spec, store, manifest.jitter)?;
    Ok(Checkpoint { net, metadata: manifest.metadata })
}

/// Writes through a temporary file in the same directory, then renames.
pub fn save_checkpoint(path: &Path, net: &DistGpNet, metadata: &serde_json::Value) -> Result<()> {
    let bytes = to_bytes(net, metadata)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::spec::NetworkSpec;

    fn small_net() -> DistGpNet {
        let spec = NetworkSpec::from_json(
            r#"{"input": {"height": 4, "width": 4, "channels": 1},
                "layers": [
                  {"type": "conv_svgp", "kernel_size": 2, "inducing": 3, "channels_out": 2},
                  {"type": "affine_conv", "kernel_size": 1, "channels_out": 2, "lipschitz_normalized": true},
                  {"type": "distgp_activation", "inducing": 3, "channels_out": 2},
                  {"type": "dense_distgp", "inducing": 4, "channels_out": 3}
                ]}"#,
        )
        .unwrap();
        DistGpNet::new(spec, 11).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let net = small_net();
        let meta = serde_json::json!({"task": "classification"});
        let bytes = to_bytes(&net, &meta).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.metadata, meta);
        assert_eq!(back.net.spec(), net.spec());
        for id in net.params().ids() {
            assert_eq!(back.net.params().raw(id), net.params().raw(id));
            assert_eq!(back.net.params().name(id), net.params().name(id));
        }
        let x = DenseMatrix::from_fn(2, 16, |i, j| ((i + j) % 3) as f64 * 0.3);
        assert_eq!(back.net.forward(&x).unwrap(), net.forward(&x).unwrap());
        assert_eq!(to_bytes(&back.net, &meta).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = to_bytes(&small_net(), &serde_json::Value::Null).unwrap();
        let mut flipped = bytes.clone();
        let k = flipped.len() / 2;
        flipped[k] ^= 1;
        assert!(matches!(from_bytes(&flipped), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes(b"nope"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let net = small_net();
        save_checkpoint(&path, &net, &serde_json::Value::Null).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.net.params().num_scalars(), net.params().num_scalars());
    }
}
