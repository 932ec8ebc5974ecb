//! Parameter checkpoints: a JSON document with a format tag, version, model
//! type, a dimension header and the named tensors in a fixed order. Identical
//! parameters always serialize to identical bytes.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ParamSet;
use crate::teacher::{TeacherConfig, TeacherParams};
use crate::two_tower::{ModelConfig, PrerankParams, Vocab};

pub const FORMAT: &str = "prerank-checkpoint";
pub const VERSION: u32 = 1;
pub const TWO_TOWER: &str = "two_tower";
pub const TEACHER: &str = "teacher";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model_type: String,
    pub header: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

pub fn encode<P: ParamSet, H: Serialize>(model_type: &str, header: &H, params: &P) -> Result<String> {
    let ckpt = Checkpoint {
        format: FORMAT.into(),
        version: VERSION,
        model_type: model_type.into(),
        header: serde_json::to_value(header)?,
        tensors: params
            .tensors()
            .into_iter()
            .map(|(name, m)| NamedTensor { name, rows: m.rows, cols: m.cols, data: m.data.clone() })
            .collect(),
    };
    Ok(serde_json::to_string(&ckpt)?)
}

pub fn decode(text: &str, model_type: &str) -> Result<Checkpoint> {
    let ckpt: Checkpoint = serde_json::from_str(text)?;
    if ckpt.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format tag {:?}", ckpt.format)));
    }
    if ckpt.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", ckpt.version)));
    }
    if ckpt.model_type != model_type {
        return Err(Error::Checkpoint(format!("expected model type {model_type}, found {}", ckpt.model_type)));
    }
    Ok(ckpt)
}

pub fn header<H: DeserializeOwned>(ckpt: &Checkpoint) -> Result<H> {
    Ok(serde_json::from_value(ckpt.header.clone())?)
}

/// Copies tensors into `params`, requiring identical names, order and shapes.
pub fn fill<P: ParamSet>(ckpt: &Checkpoint, params: &mut P) -> Result<()> {
    let mut slots = params.tensors_mut();
    if slots.len() != ckpt.tensors.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {}", slots.len(), ckpt.tensors.len())));
    }
    for ((name, m), t) in slots.iter_mut().zip(&ckpt.tensors) {
        if *name != t.name || m.rows != t.rows || m.cols != t.cols || t.data.len() != t.rows * t.cols {
            return Err(Error::Checkpoint(format!("tensor {} does not match {name} {}x{}", t.name, m.rows, m.cols)));
        }
        m.data.copy_from_slice(&t.data);
    }
    drop(slots);
    if !params.is_finite() {
        return Err(Error::Checkpoint("non-finite tensor".into()));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TwoTowerHeader {
    config: ModelConfig,
    vocab: Vocab,
    widths: Widths,
}

#[derive(Serialize, Deserialize)]
struct Widths {
    user_query_input: usize,
    item_input: usize,
    attention_input: usize,
    behavior: usize,
    output: usize,
}

pub fn save_two_tower(params: &PrerankParams) -> Result<String> {
    let c = &params.config;
    let header = TwoTowerHeader {
        config: c.clone(),
        vocab: params.vocab,
        widths: Widths {
            user_query_input: c.user_query_width(),
            item_input: c.item_width(),
            attention_input: c.attention_input_width(),
            behavior: c.behavior_width(),
            output: c.output_width,
        },
    };
    encode(TWO_TOWER, &header, params)
}

pub fn load_two_tower(text: &str) -> Result<PrerankParams> {
    let ckpt = decode(text, TWO_TOWER)?;
    let h: TwoTowerHeader = header(&ckpt)?;
    let mut params = PrerankParams::init(&h.config, h.vocab, 0)?;
    fill(&ckpt, &mut params)?;
    params.check()?;
    Ok(params)
}

#[derive(Serialize, Deserialize)]
struct TeacherHeader {
    config: TeacherConfig,
    vocab: Vocab,
}

pub fn save_teacher(params: &TeacherParams) -> Result<String> {
    encode(TEACHER, &TeacherHeader { config: params.config.clone(), vocab: params.vocab }, params)
}

pub fn load_teacher(text: &str) -> Result<TeacherParams> {
    let ckpt = decode(text, TEACHER)?;
    let h: TeacherHeader = header(&ckpt)?;
    let mut params = TeacherParams::init(&h.config, h.vocab)?;
    fill(&ckpt, &mut params)?;
    Ok(params)
}
