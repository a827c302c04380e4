//! On-disk model bundles.
//!
//! Container layout, shared with latent-trace files: an 8-byte magic, a
//! little-endian u64 header length, a JSON header, then the named tensor
//! payloads back to back. The header carries everything needed to rebuild
//! the model objects plus a `blobs` table of `(name, byte length)` entries
//! locating each payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degrade::Kernel;
use crate::denoiser::{ArchDescriptor, ConvNetParams};
use crate::error::{CoreError, CoreResult};
use crate::schedule::{Schedule, ScheduleMeta};
use crate::tensor::{read_udt1, write_udt1, Precision};

pub(crate) const CHECKPOINT_MAGIC: &[u8; 8] = b"UDPMCKP1";
pub(crate) const LATENT_MAGIC: &[u8; 8] = b"UDPMLAT1";

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    len: u64,
}

/// Write a bundle file. `header` must be a JSON object; a `blobs` table is
/// added to it.
pub(crate) fn write_bundle(
    path: &Path,
    magic: &[u8; 8],
    header: serde_json::Value,
    blobs: &[(String, Vec<u8>)],
) -> CoreResult<()> {
    let mut header = header;
    let table: Vec<BlobEntry> = blobs
        .iter()
        .map(|(name, data)| BlobEntry {
            name: name.clone(),
            len: data.len() as u64,
        })
        .collect();
    let obj = header
        .as_object_mut()
        .ok_or_else(|| CoreError::Format("bundle header must be a JSON object".into()))?;
    obj.insert(
        "blobs".to_string(),
        serde_json::to_value(&table).expect("blob table serialization cannot fail"),
    );
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| CoreError::Format(format!("header serialization failed: {e}")))?;

    let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| CoreError::io(path, e);
    w.write_all(magic).map_err(io_err)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&header_bytes).map_err(io_err)?;
    for (_, data) in blobs {
        w.write_all(data).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Named binary payloads of a bundle, in file order.
pub(crate) type NamedBlobs = Vec<(String, Vec<u8>)>;

/// Read a bundle file back: the header (with its `blobs` table removed)
/// and the named payloads.
pub(crate) fn read_bundle(
    path: &Path,
    magic: &[u8; 8],
) -> CoreResult<(serde_json::Value, NamedBlobs)> {
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e| CoreError::io(path, e);
    let mut got_magic = [0u8; 8];
    r.read_exact(&mut got_magic).map_err(io_err)?;
    if &got_magic != magic {
        return Err(CoreError::Format(format!(
            "bad file magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got_magic),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes).map_err(io_err)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    // A header larger than the file is corrupt; cap reads defensively.
    if header_len > 1 << 30 {
        return Err(CoreError::Format(format!(
            "implausible header length {header_len}"
        )));
    }
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(io_err)?;
    let mut header: serde_json::Value = serde_json::from_slice(&header_bytes)
        .map_err(|e| CoreError::Format(format!("header is not valid JSON: {e}")))?;
    let table: Vec<BlobEntry> = header
        .as_object_mut()
        .and_then(|o| o.remove("blobs"))
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| CoreError::Format(format!("bad blob table: {e}")))?
        .ok_or_else(|| CoreError::Format("bundle header lacks a blob table".into()))?;
    let mut blobs = Vec::with_capacity(table.len());
    for entry in table {
        let mut data = vec![0u8; entry.len as usize];
        r.read_exact(&mut data).map_err(io_err)?;
        blobs.push((entry.name, data));
    }
    Ok((header, blobs))
}

#[derive(Serialize, Deserialize)]
struct KernelSpec {
    taps: Vec<f64>,
    tap_rows: usize,
    tap_cols: usize,
    stride: usize,
}

impl KernelSpec {
    fn of(kernel: &Kernel) -> Self {
        KernelSpec {
            taps: kernel.taps().to_vec(),
            tap_rows: kernel.tap_rows(),
            tap_cols: kernel.tap_cols(),
            stride: kernel.stride(),
        }
    }

    fn build(&self) -> CoreResult<Kernel> {
        Kernel::new(self.taps.clone(), self.tap_rows, self.tap_cols, self.stride)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    arch: ArchDescriptor,
    arch_hash: String,
    schedule: ScheduleMeta,
    kernel: KernelSpec,
    ema_decay: f64,
    step_count: usize,
    seed: u64,
    precision: Precision,
}

const CHECKPOINT_FORMAT: &str = "udpm-checkpoint-v1";

/// A trained model: live and averaged parameters plus the degradation
/// setup they were trained under.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ConvNetParams,
    pub ema: ConvNetParams,
    pub schedule: ScheduleMeta,
    pub kernel: Kernel,
    pub ema_decay: f64,
    pub step_count: usize,
    pub seed: u64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> CoreResult<()> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            arch: self.params.arch.clone(),
            arch_hash: self.params.arch.hash(),
            schedule: self.schedule.clone(),
            kernel: KernelSpec::of(&self.kernel),
            ema_decay: self.ema_decay,
            step_count: self.step_count,
            seed: self.seed,
            precision: self.params.precision,
        };
        let mut blobs = Vec::new();
        for (prefix, params) in [("live", &self.params), ("ema", &self.ema)] {
            for (name, tensor) in params.named_tensors() {
                let mut bytes = Vec::new();
                write_udt1(&mut bytes, &[tensor.len() as u32], tensor, params.precision)
                    .map_err(|e| CoreError::io(path, e))?;
                blobs.push((format!("{prefix}.{name}"), bytes));
            }
        }
        write_bundle(
            path,
            CHECKPOINT_MAGIC,
            serde_json::to_value(&header)
                .map_err(|e| CoreError::Format(format!("header encoding failed: {e}")))?,
            &blobs,
        )
    }

    pub fn load(path: &Path) -> CoreResult<Self> {
        let (header_value, blobs) = read_bundle(path, CHECKPOINT_MAGIC)?;
        let header: CheckpointHeader = serde_json::from_value(header_value)
            .map_err(|e| CoreError::Format(format!("bad checkpoint header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(CoreError::Format(format!(
                "unsupported checkpoint format {:?}",
                header.format
            )));
        }
        if header.arch_hash != header.arch.hash() {
            return Err(CoreError::Format(
                "architecture hash does not match the stored descriptor".into(),
            ));
        }
        let kernel = header.kernel.build()?;
        if header.schedule.stride != kernel.stride() {
            return Err(CoreError::Format(format!(
                "schedule stride {} disagrees with kernel stride {}",
                header.schedule.stride,
                kernel.stride()
            )));
        }

        let mut tensors: std::collections::HashMap<String, Vec<f64>> = blobs
            .into_iter()
            .map(|(name, bytes)| {
                let (dims, data, _) = read_udt1(&mut bytes.as_slice())?;
                if dims.len() != 1 || dims[0] as usize != data.len() {
                    return Err(CoreError::Format(format!(
                        "tensor {name} has unexpected dims {dims:?}"
                    )));
                }
                Ok((name, data))
            })
            .collect::<CoreResult<_>>()?;

        let mut take = |prefix: &str| -> CoreResult<ConvNetParams> {
            let mut params = ConvNetParams::zeros(&header.arch)?;
            params.precision = header.precision;
            for (name, tensor) in params.named_tensors_mut() {
                let key = format!("{prefix}.{name}");
                let data = tensors
                    .remove(&key)
                    .ok_or_else(|| CoreError::Format(format!("missing tensor {key}")))?;
                if data.len() != tensor.len() {
                    return Err(CoreError::Format(format!(
                        "tensor {key} has {} entries, expected {}",
                        data.len(),
                        tensor.len()
                    )));
                }
                tensor.copy_from_slice(&data);
            }
            Ok(params)
        };
        let params = take("live")?;
        let ema = take("ema")?;

        Ok(Checkpoint {
            params,
            ema,
            schedule: header.schedule,
            kernel,
            ema_decay: header.ema_decay,
            step_count: header.step_count,
            seed: header.seed,
        })
    }

    /// The parameter set to run inference with.
    pub fn denoiser(&self, use_ema: bool) -> &ConvNetParams {
        if use_ema {
            &self.ema
        } else {
            &self.params
        }
    }

    pub fn build_schedule(&self) -> CoreResult<Schedule> {
        Schedule::from_meta(&self.schedule)
    }
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> CoreResult<String> {
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = r.read(&mut buf).map_err(|e| CoreError::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}
