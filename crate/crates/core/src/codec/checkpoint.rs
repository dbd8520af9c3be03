use std::path::Path;

use serde_json::json;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::rollout::NormMatcher;

use super::{Codec, CodecConfig};

pub const CODEC_KIND: &str = "codec";
const SCHEMA_VERSION: u32 = 1;

impl Codec {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new(json!({
            "kind": CODEC_KIND,
            "schema_version": SCHEMA_VERSION,
            "model_id": self.model_id,
            "d": self.d,
            "config": self.config,
            "norm": self.norm,
        }));
        for p in self.params.iter() {
            c.push(p.name.clone(), p.value.clone());
        }
        c
    }

    pub fn from_container(c: &Container, origin: &Path) -> Result<Self> {
        let bad = |detail: String| Error::Format {
            path: origin.to_path_buf(),
            detail,
        };
        let h = &c.header;
        if h["kind"] != CODEC_KIND {
            return Err(bad(format!("expected a codec checkpoint, found kind {}", h["kind"])));
        }
        if h["schema_version"] != SCHEMA_VERSION {
            return Err(bad(format!("unsupported codec schema {}", h["schema_version"])));
        }
        let model_id = h["model_id"].as_str().ok_or_else(|| bad("missing model_id".into()))?;
        let d = h["d"].as_u64().ok_or_else(|| bad("missing d".into()))? as usize;
        let config: CodecConfig = serde_json::from_value(h["config"].clone())?;
        let norm: NormMatcher = serde_json::from_value(h["norm"].clone())?;
        let norm = NormMatcher::new(norm.alpha, norm.eps)?;
        let mut codec = Codec::new(model_id, d, config, norm, 0)?;
        if c.arrays.len() != codec.params.len() {
            return Err(bad(format!(
                "expected {} parameter arrays, found {}",
                codec.params.len(),
                c.arrays.len()
            )));
        }
        for p in codec.params.iter_mut() {
            let stored = c.get(&p.name).ok_or_else(|| bad(format!("missing array {}", p.name)))?;
            if stored.shape() != p.value.shape() {
                return Err(bad(format!(
                    "array {} has shape {:?}, expected {:?}",
                    p.name,
                    stored.shape(),
                    p.value.shape()
                )));
            }
            p.value = stored.clone();
        }
        Ok(codec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Codec::from_container(&Container::load(path)?, path)
    }
}
