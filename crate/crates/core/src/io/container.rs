//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "XATNTSR1"
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON:
//!              { "metadata": { "<key>": "<value>", ... },
//!                "tensors":  [ { "name": "...", "shape": [d0, d1, ...] }, ... ] }
//! data         f32 values of every tensor, row-major, in header order
//! ```
//!
//! Inversion records store metadata `kind=inversion`, `num_steps`, `seed`,
//! `eta`, `prompt`, and tensors `terminal` plus `noise.<t>` for
//! `t = 1..=num_steps` (zero-padded to four digits).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentGrid;
use crate::schedule::InversionRecord;

pub const MAGIC: &[u8; 8] = b"XATNTSR1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    pub metadata: BTreeMap<String, String>,
    pub tensors: Vec<(String, ArrayD<f32>)>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: ArrayD<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("missing metadata key '{key}'")))
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = Header {
            metadata: self.metadata.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &self.tensors {
            for v in t.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a tensor container (bad magic)".into()));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| Error::Format(format!("header: {e}")))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes).map_err(|e| {
                Error::Format(format!("tensor '{}' truncated: {e}", entry.name))
            })?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| Error::Format(e.to_string()))?;
            tensors.push((entry.name, t));
        }
        Ok(Self {
            metadata: header.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

pub fn latent_tensor(latent: &LatentGrid) -> ArrayD<f32> {
    latent.data.clone().into_dyn()
}

pub fn tensor_latent(t: &ArrayD<f32>) -> Result<LatentGrid> {
    let data: Array3<f32> = t
        .clone()
        .into_dimensionality()
        .map_err(|_| Error::Format(format!("expected a 3-d latent, got shape {:?}", t.shape())))?;
    LatentGrid::new(data)
}

/// Single-latent file (`kind=latent`, tensor `latent`).
pub fn latent_container(latent: &LatentGrid) -> TensorContainer {
    let mut c = TensorContainer::new().with_meta("kind", "latent");
    c.push("latent", latent_tensor(latent));
    c
}

pub fn container_latent(c: &TensorContainer) -> Result<LatentGrid> {
    let t = c
        .get("latent")
        .ok_or_else(|| Error::Format("container has no 'latent' tensor".into()))?;
    tensor_latent(t)
}

fn noise_name(t: usize) -> String {
    format!("noise.{t:04}")
}

pub fn record_container(record: &InversionRecord) -> TensorContainer {
    let mut c = TensorContainer::new()
        .with_meta("kind", "inversion")
        .with_meta("num_steps", record.num_steps())
        .with_meta("seed", record.seed)
        .with_meta("eta", record.eta)
        .with_meta("prompt", &record.prompt);
    c.push("terminal", latent_tensor(&record.terminal));
    for (i, z) in record.noise_maps.iter().enumerate() {
        c.push(noise_name(i + 1), latent_tensor(z));
    }
    c
}

pub fn container_record(c: &TensorContainer) -> Result<InversionRecord> {
    if c.meta("kind")? != "inversion" {
        return Err(Error::Format("container is not an inversion record".into()));
    }
    let parse = |key: &str| -> Result<String> { Ok(c.meta(key)?.to_string()) };
    let bad = |key: &str| Error::Format(format!("bad metadata value for '{key}'"));
    let steps: usize = parse("num_steps")?.parse().map_err(|_| bad("num_steps"))?;
    let seed: u64 = parse("seed")?.parse().map_err(|_| bad("seed"))?;
    let eta: f64 = parse("eta")?.parse().map_err(|_| bad("eta"))?;
    let terminal = tensor_latent(
        c.get("terminal")
            .ok_or_else(|| Error::Format("record has no terminal latent".into()))?,
    )?;
    let mut noise_maps = Vec::with_capacity(steps);
    for t in 1..=steps {
        let name = noise_name(t);
        let z = c
            .get(&name)
            .ok_or_else(|| Error::Format(format!("record is missing '{name}'")))?;
        let mut z = tensor_latent(z)?;
        z.timestep_index = t;
        noise_maps.push(z);
    }
    let mut terminal = terminal;
    terminal.timestep_index = steps;
    Ok(InversionRecord {
        terminal,
        noise_maps,
        prompt: parse("prompt")?,
        seed,
        eta,
    })
}
