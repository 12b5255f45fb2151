//! Self-describing binary container: magic, format version, a JSON header
//! and little-endian `f64` arrays.
//!
//! Layout: `b"NLAB"`, `u32` version, `u64` header length, header JSON,
//! then every array listed in the header, back to back.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{LabError, Result};
use crate::model::{ChannelData, ModelConfig, PlantedInstance};
use crate::posterior::ReplicaBatch;

pub const MAGIC: &[u8; 4] = b"NLAB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ArrayInfo {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub meta: Value,
    pub arrays: Vec<ArrayInfo>,
}

/// A header plus its arrays, in header order.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    pub arrays: Vec<Vec<f64>>,
}

impl Container {
    pub fn new(kind: &str, meta: Value) -> Container {
        Container { header: Header { kind: kind.into(), meta, arrays: vec![] }, arrays: vec![] }
    }

    pub fn push(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> Result<()> {
        let info = ArrayInfo { name: name.into(), shape };
        if info.len() != values.len() {
            return Err(LabError::Container(format!(
                "array '{name}': shape {:?} vs {} values",
                info.shape,
                values.len()
            )));
        }
        self.header.arrays.push(info);
        self.arrays.push(values);
        Ok(())
    }

    pub fn array(&self, name: &str) -> Result<&[f64]> {
        self.header
            .arrays
            .iter()
            .position(|a| a.name == name)
            .map(|i| self.arrays[i].as_slice())
            .ok_or_else(|| LabError::Container(format!("missing array '{name}'")))
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind != kind {
            return Err(LabError::Container(format!("expected a {kind} container, found {}", self.header.kind)));
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for a in &self.arrays {
            let mut buf = Vec::with_capacity(a.len() * 8);
            for x in a {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from(mut r: impl Read) -> Result<Container> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(LabError::Container("not a nishimori-lab container".into()));
        }
        let mut b4 = [0u8; 4];
        read_exact(&mut r, &mut b4, "version")?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(LabError::Container(format!("unsupported format version {version}")));
        }
        let mut b8 = [0u8; 8];
        read_exact(&mut r, &mut b8, "header length")?;
        let len = usize::try_from(u64::from_le_bytes(b8)).map_err(|_| LabError::Container("header too long".into()))?;
        let mut header = vec![0u8; len];
        read_exact(&mut r, &mut header, "header")?;
        let header: Header = serde_json::from_slice(&header)?;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for info in &header.arrays {
            let mut buf = vec![0u8; info.len() * 8];
            read_exact(&mut r, &mut buf, &info.name)?;
            arrays.push(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect());
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(LabError::Container("trailing bytes after the last array".into()));
        }
        Ok(Container { header, arrays })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Container> {
        Container::read_from(bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Container> {
        Container::from_bytes(&std::fs::read(path)?)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => LabError::Container(format!("truncated while reading {what}")),
        _ => LabError::Io(e),
    })
}

#[derive(Serialize, Deserialize)]
struct InstanceMeta {
    config: ModelConfig,
    seed: u64,
    layout: String,
    data_shape: Vec<usize>,
}

/// Instances store the config plus σ*, θ*, the design and the data. Prior and
/// channel are rebuilt from the config on load; stored θ* and design win, so
/// infinite fields survive the round trip.
pub fn instance_to_container(inst: &PlantedInstance) -> Result<Container> {
    let meta = InstanceMeta {
        config: inst.config.clone(),
        seed: inst.seed,
        layout: inst.data.layout.clone(),
        data_shape: inst.data.shape.clone(),
    };
    let mut c = Container::new("instance", serde_json::to_value(meta)?);
    c.push("signal", vec![inst.signal.len()], inst.signal.clone())?;
    c.push("theta_star", vec![inst.theta_star.len()], inst.theta_star.clone())?;
    c.push("theta_out", vec![inst.theta_out.len()], inst.theta_out.clone())?;
    c.push("data", vec![inst.data.values.len()], inst.data.values.clone())?;
    Ok(c)
}

pub fn instance_from_container(c: &Container) -> Result<PlantedInstance> {
    c.expect_kind("instance")?;
    let meta: InstanceMeta = serde_json::from_value(c.header.meta.clone())?;
    let (mut prior, mut channel) = meta.config.materialize()?;
    let theta_star = c.array("theta_star")?.to_vec();
    let theta_out = c.array("theta_out")?.to_vec();
    if theta_star.len() != prior.theta_star.len() || theta_out.len() != channel.design.len() {
        return Err(LabError::Container("stored parameters do not fit the config".into()));
    }
    prior.theta_star = theta_star.clone();
    channel.design = theta_out.clone();
    let data = ChannelData { values: c.array("data")?.to_vec(), shape: meta.data_shape, layout: meta.layout };
    Ok(PlantedInstance {
        config: meta.config,
        prior,
        channel,
        signal: c.array("signal")?.to_vec(),
        data,
        theta_star,
        theta_out,
        seed: meta.seed,
    })
}

#[derive(Serialize, Deserialize)]
struct BatchMeta {
    n: usize,
    chains: usize,
    samples: usize,
    provenance: String,
}

pub fn batch_to_container(b: &ReplicaBatch) -> Result<Container> {
    let meta = BatchMeta { n: b.n, chains: b.chains, samples: b.samples, provenance: b.provenance.clone() };
    let mut c = Container::new("replica_batch", serde_json::to_value(meta)?);
    c.push("states", vec![b.chains, b.samples, b.n], b.states.clone())?;
    c.push("acceptance", vec![b.chains], b.acceptance.clone())?;
    c.push("ess", vec![b.ess.len()], b.ess.clone())?;
    Ok(c)
}

pub fn batch_from_container(c: &Container) -> Result<ReplicaBatch> {
    c.expect_kind("replica_batch")?;
    let meta: BatchMeta = serde_json::from_value(c.header.meta.clone())?;
    let states = c.array("states")?.to_vec();
    if states.len() != meta.chains * meta.samples * meta.n {
        return Err(LabError::Container("states do not match chains x samples x N".into()));
    }
    Ok(ReplicaBatch {
        n: meta.n,
        chains: meta.chains,
        samples: meta.samples,
        states,
        acceptance: c.array("acceptance")?.to_vec(),
        ess: c.array("ess")?.to_vec(),
        provenance: meta.provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ChannelSpec, FieldValue, PriorSpec};

    fn config(prior: PriorSpec) -> ModelConfig {
        ModelConfig { prior, channel: ChannelSpec::SpikedTensor { p: 3, snr: 2.0 }, n: 5, seed: 11 }
    }

    #[test]
    fn instance_roundtrip_is_bitwise() {
        let inst = PlantedInstance::generate(&config(PriorSpec::Rademacher)).unwrap();
        let bytes = instance_to_container(&inst).unwrap().to_bytes().unwrap();
        assert_eq!(&bytes[..4], MAGIC);
        let back = instance_from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, inst);
        let again = instance_to_container(&back).unwrap().to_bytes().unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn infinite_fields_survive() {
        let prior =
            PriorSpec::FieldRademacher { fields: vec![], field: Some(FieldValue(f64::NEG_INFINITY)), field_std: 0.0 };
        let inst = PlantedInstance::generate(&config(prior)).unwrap();
        let c = instance_to_container(&inst).unwrap();
        let back = instance_from_container(&Container::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert!(back.theta_star.iter().all(|t| *t == f64::NEG_INFINITY));
        assert_eq!(back.signal, inst.signal);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let inst = PlantedInstance::generate(&config(PriorSpec::Rademacher)).unwrap();
        let bytes = instance_to_container(&inst).unwrap().to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(Container::from_bytes(&long).is_err());
    }

    #[test]
    fn batch_roundtrip() {
        let b = ReplicaBatch {
            n: 2,
            chains: 2,
            samples: 3,
            states: (0..12).map(|x| if x % 3 == 0 { 1.0 } else { -1.0 }).collect(),
            acceptance: vec![0.5, 0.25],
            ess: vec![3.0, 2.5],
            provenance: "mcmc".into(),
        };
        let c = batch_to_container(&b).unwrap();
        assert_eq!(batch_from_container(&Container::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap(), b);
        assert!(instance_from_container(&c).is_err());
    }
}
