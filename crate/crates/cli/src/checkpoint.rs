//! Single-file container for a model, its level stack and run metadata.
//!
//! Layout: the magic `ECNN1`, a little-endian `u64` header length, a pretty
//! JSON header, then the payload. The header carries the graph topology,
//! origin maps, prune records (tensor values replaced by blob indices),
//! per-level costs, the run configuration and the blob directory. The
//! payload holds every tensor as little-endian IEEE-754, row-major, in
//! directory order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use elastic_core::depgraph::CouplingEntry;
use elastic_core::elastic::{
    CostReport, ElasticModel, GroupRecord, LevelStack, PipelineConfig, PruneRecord, SavedSlice,
};
use elastic_core::graph::{ArchSpec, GraphHeader, ModelGraph, ParamKey, Slot};
use elastic_core::trainer::{SynthDataset, TrainConfig};
use elastic_core::{DType, Error, Result, Scalar, Tensor};

pub const MAGIC: &[u8; 5] = b"ECNN1";

/// How the stored model came to be. Everything here is informational except
/// `data`, which later commands reuse to regenerate the same samples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: Option<SynthDataset>,
    pub train: Option<TrainConfig>,
    pub prune: Option<PipelineConfig>,
    /// Fine-tuning epochs used when growing levels back.
    pub rebuild_epochs: Option<usize>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SliceHeader {
    slot: Slot,
    key: ParamKey,
    axis: usize,
    block: usize,
    blob: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GroupHeader {
    entries: Vec<CouplingEntry>,
    pre_width: usize,
    dropped: Vec<usize>,
    slices: Vec<SliceHeader>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RecordHeader {
    step: usize,
    pre_checksum: String,
    post_structure: String,
    groups: Vec<GroupHeader>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StackHeader {
    arch: Option<ArchSpec>,
    costs: Vec<CostReport>,
    records: Vec<RecordHeader>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    dtype: DType,
    level: usize,
    graph: GraphHeader,
    stack: StackHeader,
    config: RunConfig,
    blobs: Vec<BlobEntry>,
}

/// An elastic model plus its run configuration.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub elastic: ElasticModel<T>,
    pub config: RunConfig,
}

struct PayloadWriter {
    blobs: Vec<BlobEntry>,
    payload: Vec<u8>,
}

impl PayloadWriter {
    fn push<T: Scalar>(&mut self, name: String, t: &Tensor<T>) -> usize {
        let offset = self.payload.len() as u64;
        t.data().iter().for_each(|v| v.write_le(&mut self.payload));
        self.blobs.push(BlobEntry {
            name,
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            offset,
            length: self.payload.len() as u64 - offset,
        });
        self.blobs.len() - 1
    }
}

impl<T: Scalar> Checkpoint<T> {
    /// A plain model with an empty level stack.
    pub fn single(model: ModelGraph<T>, config: RunConfig) -> Result<Self> {
        let stack = LevelStack {
            arch: model.arch().cloned(),
            records: Vec::new(),
            costs: vec![elastic_core::elastic::cost_report(&model)?],
        };
        Ok(Checkpoint {
            elastic: ElasticModel::new(stack, model, 0)?,
            config,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let model = self.elastic.model();
        let stack = &self.elastic.stack;
        let mut w = PayloadWriter {
            blobs: Vec::new(),
            payload: Vec::new(),
        };
        for (key, t) in model.params() {
            w.push(format!("model/{}", key), t);
        }
        let records = stack
            .records
            .iter()
            .map(|r| RecordHeader {
                step: r.step,
                pre_checksum: r.pre_checksum.clone(),
                post_structure: r.post_structure.clone(),
                groups: r
                    .groups
                    .iter()
                    .enumerate()
                    .map(|(gi, g)| GroupHeader {
                        entries: g.entries.clone(),
                        pre_width: g.pre_width,
                        dropped: g.dropped.clone(),
                        slices: g
                            .slices
                            .iter()
                            .map(|s| SliceHeader {
                                slot: s.slot,
                                key: s.key,
                                axis: s.axis,
                                block: s.block,
                                blob: w.push(format!("record{}/group{}/{}/{}", r.step, gi, s.slot, s.key), &s.values),
                            })
                            .collect(),
                    })
                    .collect(),
            })
            .collect();
        let header = Header {
            dtype: T::DTYPE,
            level: self.elastic.level(),
            graph: model.header(),
            stack: StackHeader {
                arch: stack.arch.clone(),
                costs: stack.costs.clone(),
                records,
            },
            config: self.config.clone(),
            blobs: w.blobs,
        };
        let json = serde_json::to_vec_pretty(&header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + w.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&w.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (json, payload) = split(bytes)?;
        let header: Header = serde_json::from_slice(json)?;
        if header.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "file stores {} tensors, expected {}",
                header.dtype,
                T::DTYPE
            )));
        }
        check_directory(&header.blobs, payload.len())?;
        let tensor = |i: usize| -> Result<Tensor<T>> {
            let b = header
                .blobs
                .get(i)
                .ok_or_else(|| Error::Checkpoint(format!("blob index {} out of range", i)))?;
            if b.dtype != T::DTYPE {
                return Err(Error::Checkpoint(format!("blob {} has dtype {}", b.name, b.dtype)));
            }
            let raw = &payload[b.offset as usize..(b.offset + b.length) as usize];
            let data = raw.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
            Tensor::new(&b.shape, data).map_err(|e| Error::Checkpoint(format!("blob {}: {}", b.name, e)))
        };
        let by_name: BTreeMap<&str, usize> = header
            .blobs
            .iter()
            .enumerate()
            .map(|(i, b)| (b.name.as_str(), i))
            .collect();
        let mut tensors = BTreeMap::new();
        for key in &header.graph.params {
            let name = format!("model/{}", key);
            let i = *by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("no blob for {}", name)))?;
            tensors.insert(*key, tensor(i)?);
        }
        let model = ModelGraph::from_header(header.graph.clone(), tensors)?;
        let mut records = Vec::new();
        for r in &header.stack.records {
            let mut groups = Vec::new();
            for g in &r.groups {
                let slices = g
                    .slices
                    .iter()
                    .map(|s| {
                        Ok(SavedSlice {
                            slot: s.slot,
                            key: s.key,
                            axis: s.axis,
                            block: s.block,
                            values: tensor(s.blob)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                groups.push(GroupRecord {
                    entries: g.entries.clone(),
                    pre_width: g.pre_width,
                    dropped: g.dropped.clone(),
                    slices,
                });
            }
            records.push(PruneRecord {
                step: r.step,
                groups,
                pre_checksum: r.pre_checksum.clone(),
                post_structure: r.post_structure.clone(),
            });
        }
        if header.stack.costs.len() != records.len() + 1 {
            return Err(Error::Checkpoint(format!(
                "{} cost entries for {} records",
                header.stack.costs.len(),
                records.len()
            )));
        }
        let stack = LevelStack {
            arch: header.stack.arch,
            records,
            costs: header.stack.costs,
        };
        Ok(Checkpoint {
            elastic: ElasticModel::new(stack, model, header.level)?,
            config: header.config,
        })
    }

    /// Writes via a temporary file in the target directory and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

/// Splits a checkpoint into its JSON header and payload.
pub fn split(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("not an ECNN1 checkpoint"));
    }
    let len_bytes: [u8; 8] = bytes[MAGIC.len()..MAGIC.len() + 8].try_into().expect("8 bytes");
    let len = u64::from_le_bytes(len_bytes) as usize;
    let start = MAGIC.len() + 8;
    if bytes.len() - start < len {
        return Err(bad("truncated header"));
    }
    Ok((&bytes[start..start + len], &bytes[start + len..]))
}

/// Reads only the payload section of a checkpoint file.
pub fn payload(bytes: &[u8]) -> Result<&[u8]> {
    Ok(split(bytes)?.1)
}

fn check_directory(blobs: &[BlobEntry], payload_len: usize) -> Result<()> {
    let mut end = 0u64;
    for b in blobs {
        let numel: usize = b.shape.iter().product();
        if b.offset != end || b.length != (numel * b.dtype.size()) as u64 {
            return Err(Error::Checkpoint(format!(
                "blob {} at offset {} with length {} does not follow the previous blob (end {}) or match shape {:?}",
                b.name, b.offset, b.length, end, b.shape
            )));
        }
        end += b.length;
    }
    if end != payload_len as u64 {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes, directory covers {}",
            payload_len, end
        )));
    }
    Ok(())
}
