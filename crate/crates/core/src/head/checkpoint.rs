//! Refiner checkpoints: `VDCK`, u32 LE header length, JSON header, then raw
//! f32 LE blobs for the parameters and, if present, both AdamW moments.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{DataConfig, TrainConfig, TrainState};
use super::{RefinerConfig, RefinerParams, TensorInfo};
use crate::error::{Error, Result};
use crate::io::write_file_atomic;

const MAGIC: &[u8; 4] = b"VDCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: u32,
    pub config: RefinerConfig,
    pub step: usize,
    pub tensors: Vec<TensorInfo>,
    pub value_count: usize,
    pub has_moments: bool,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub data: Option<DataConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(state: TrainState, train: Option<TrainConfig>, data: Option<DataConfig>) -> Self {
        let header = CheckpointHeader {
            format: FORMAT_VERSION,
            config: state.params.config,
            step: state.step,
            tensors: state.params.tensors.clone(),
            value_count: state.params.len(),
            has_moments: true,
            train,
            data,
        };
        Self { header, state }
    }

    pub fn params(&self) -> &RefinerParams {
        &self.state.params
    }
}

fn push_f32(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&ck.header)?;
    let mut out = Vec::with_capacity(8 + header.len() + 12 * ck.state.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    push_f32(&mut out, &ck.state.params.values);
    if ck.header.has_moments {
        push_f32(&mut out, &ck.state.m);
        push_f32(&mut out, &ck.state.v);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let fail = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(fail("missing VDCK magic"));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| fail("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.format != FORMAT_VERSION {
        return Err(fail(&format!("unsupported checkpoint format {}", header.format)));
    }
    let n = header.value_count;
    let blobs = if header.has_moments { 3 } else { 1 };
    let data = &bytes[8 + hlen..];
    if data.len() != blobs * n * 4 {
        return Err(fail(&format!("expected {} tensor bytes, found {}", blobs * n * 4, data.len())));
    }
    let read = |k: usize| -> Vec<f64> {
        data[k * n * 4..(k + 1) * n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect()
    };
    let params = RefinerParams::from_parts(header.config, header.tensors.clone(), read(0))?;
    let (m, v) = if header.has_moments {
        (read(1), read(2))
    } else {
        (vec![0.0; n], vec![0.0; n])
    };
    Ok(Checkpoint {
        state: TrainState {
            params,
            m,
            v,
            step: header.step,
        },
        header,
    })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_file_atomic(path, &encode(ck)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::init_params;

    #[test]
    fn round_trip_is_exact() {
        let cfg = RefinerConfig {
            channels: 8,
            heads: 2,
            layers: 1,
            ..RefinerConfig::default()
        };
        let mut st = TrainState::new(&cfg).unwrap();
        st.m.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f32 * 0.25) as f64);
        st.step = 7;
        let ck = Checkpoint::new(st, Some(TrainConfig::default()), None);
        let bytes = encode(&ck).unwrap();
        assert_eq!(&bytes[..4], b"VDCK");
        let back = decode(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.params(), &init_params(&cfg).unwrap());
    }

    #[test]
    fn corrupt_input_rejected() {
        let st = TrainState::new(&RefinerConfig::default()).unwrap();
        let mut bytes = encode(&Checkpoint::new(st, None, None)).unwrap();
        bytes.pop();
        assert!(matches!(decode(&bytes, Path::new("x")), Err(Error::Format { .. })));
        assert!(decode(b"NOPE0000", Path::new("x")).is_err());
    }
}
