//! Parameter directories: one T4F file per tensor plus a `key=value` text manifest.
//!
//! ```text
//! format=dirmask-params/1
//! config_hash=<sha256 hex>
//! offset.grid=2
//! conv.fuse.stride=1
//! conv.fuse.padding=0
//! tensor.fuse.weight=1,2,1,1
//! tensor.fuse.bias=1,1,1,1
//! ...
//! backbone.logit_stride=2
//! ```
//!
//! `backbone.*` keys and tensors are present only when a backbone was trained.
//!
//! Tensors are stored as f32, so loaded parameters are the trained values rounded to f32.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::backbone::BackboneParams;
use crate::conv::ConvParams;
use crate::error::{Error, Result};
use crate::heads::HeadParams;
use crate::offset_net::OffsetNet;
use crate::t4f::{decode_t4f, encode_t4f};
use crate::tensor::Tensor4;

pub const PARAMS_FORMAT: &str = "dirmask-params/1";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamsManifest {
    pub entries: BTreeMap<String, String>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(format!("params manifest: {}", msg.into()))
}

/// Parses `key=value` lines. Blank lines and lines starting with `#` are skipped; keys use
/// ASCII letters, digits, `.`, `_` and `-`; duplicate keys are rejected.
pub fn parse_params_manifest(text: &str) -> Result<ParamsManifest> {
    let mut entries = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| fmt_err(format!("line {}: missing '='", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c)) {
            return Err(fmt_err(format!("line {}: bad key {:?}", n + 1, k)));
        }
        if entries.insert(k.to_string(), v.to_string()).is_some() {
            return Err(fmt_err(format!("line {}: duplicate key {:?}", n + 1, k)));
        }
    }
    let m = ParamsManifest { entries };
    if m.get("format")? != PARAMS_FORMAT {
        return Err(fmt_err(format!("unknown format {:?}", m.get("format")?)));
    }
    m.get("config_hash")?;
    Ok(m)
}

impl ParamsManifest {
    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| fmt_err(format!("missing key {:?}", key)))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        self.get(key)?
            .parse()
            .map_err(|_| fmt_err(format!("{} is not a non-negative integer", key)))
    }

    pub fn shape(&self, name: &str) -> Result<[usize; 4]> {
        let v = self.get(&format!("tensor.{}", name))?;
        let dims: Vec<usize> = v
            .split(',')
            .map(|d| d.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| fmt_err(format!("tensor.{}: bad shape {:?}", name, v)))?;
        <[usize; 4]>::try_from(dims).map_err(|_| fmt_err(format!("tensor.{}: shape needs 4 dims", name)))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in ["format", "config_hash"] {
            if let Some(v) = self.entries.get(key) {
                s.push_str(&format!("{}={}\n", key, v));
            }
        }
        for (k, v) in &self.entries {
            if k != "format" && k != "config_hash" {
                s.push_str(&format!("{}={}\n", k, v));
            }
        }
        s
    }
}

/// Parameters loaded from a directory.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedModel {
    pub config_hash: String,
    pub heads: HeadParams,
    pub backbone: Option<BackboneParams>,
}

fn named_convs<'a>(heads: &'a HeadParams, backbone: Option<&'a BackboneParams>) -> Vec<(String, &'a ConvParams)> {
    let mut v = vec![("fuse".to_string(), &heads.fuse)];
    for (i, p) in heads.refine.iter().enumerate() {
        v.push((format!("refine{}", i), p));
    }
    v.push(("offset.conv".into(), &heads.offset.conv));
    v.push(("offset.fc".into(), &heads.offset.fc));
    if let Some(b) = backbone {
        for (name, p) in b.convs() {
            v.push((format!("backbone.{}", name), p));
        }
    }
    v
}

fn shape_text(s: [usize; 4]) -> String {
    s.map(|d| d.to_string()).join(",")
}

pub fn save_params(dir: &Path, config_hash: &str, heads: &HeadParams, backbone: Option<&BackboneParams>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut m = ParamsManifest::default();
    m.entries.insert("format".into(), PARAMS_FORMAT.into());
    m.entries.insert("config_hash".into(), config_hash.into());
    m.entries.insert("offset.grid".into(), heads.offset.grid.to_string());
    if let Some(b) = backbone {
        m.entries.insert("backbone.logit_stride".into(), b.logit_stride.to_string());
    }
    for (name, p) in named_convs(heads, backbone) {
        let bias = Tensor4::from_vec([1, p.bias.len(), 1, 1], p.bias.clone())?;
        for (suffix, t) in [("weight", &p.weight), ("bias", &bias)] {
            let key = format!("{}.{}", name, suffix);
            fs::write(dir.join(format!("{}.t4f", key)), encode_t4f(t))?;
            m.entries.insert(format!("tensor.{}", key), shape_text(t.shape()));
        }
        m.entries.insert(format!("conv.{}.stride", name), p.stride.to_string());
        m.entries.insert(format!("conv.{}.padding", name), p.padding.to_string());
    }
    fs::write(dir.join(MANIFEST_FILE), m.to_text())?;
    Ok(())
}

fn load_conv(dir: &Path, m: &ParamsManifest, name: &str) -> Result<ConvParams> {
    let mut parts = Vec::with_capacity(2);
    for suffix in ["weight", "bias"] {
        let key = format!("{}.{}", name, suffix);
        let t = decode_t4f(&fs::read(dir.join(format!("{}.t4f", key)))?)?;
        if t.shape() != m.shape(&key)? {
            return Err(fmt_err(format!("{}: file shape {:?} differs from manifest", key, t.shape())));
        }
        parts.push(t);
    }
    let bias = parts.pop().expect("two tensors");
    let weight = parts.pop().expect("two tensors");
    if bias.shape() != [1, weight.n(), 1, 1] {
        return Err(fmt_err(format!("{}: bias shape {:?}", name, bias.shape())));
    }
    ConvParams::new(
        weight,
        bias.into_data(),
        m.get_usize(&format!("conv.{}.stride", name))?,
        m.get_usize(&format!("conv.{}.padding", name))?,
    )
}

/// Reads a parameter directory, refusing it when its config hash differs from `expected_hash`.
pub fn load_params(dir: &Path, expected_hash: &str) -> Result<SavedModel> {
    let m = parse_params_manifest(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let stored = m.get("config_hash")?;
    if stored != expected_hash {
        return Err(Error::ConfigMismatch {
            expected: stored.to_string(),
            actual: expected_hash.to_string(),
        });
    }
    let grid = m.get_usize("offset.grid")?;
    let fc = load_conv(dir, &m, "offset.fc")?;
    if grid == 0 || fc.out_channels() != 2 * grid * grid {
        return Err(fmt_err("offset net output does not match the sub-box grid"));
    }
    let heads = HeadParams {
        fuse: load_conv(dir, &m, "fuse")?,
        refine: (0..3).map(|i| load_conv(dir, &m, &format!("refine{}", i))).collect::<Result<_>>()?,
        offset: OffsetNet {
            conv: load_conv(dir, &m, "offset.conv")?,
            fc,
            grid,
        },
    };
    let backbone = if m.entries.contains_key("tensor.backbone.conv1.weight") {
        Some(BackboneParams {
            conv1: load_conv(dir, &m, "backbone.conv1")?,
            conv2: load_conv(dir, &m, "backbone.conv2")?,
            semantic_head: load_conv(dir, &m, "backbone.semantic_head")?,
            direction_head: load_conv(dir, &m, "backbone.direction_head")?,
            logit_stride: match m.get_usize("backbone.logit_stride")? {
                0 => return Err(fmt_err("backbone logit stride must be positive")),
                k => k,
            },
        })
    } else {
        None
    };
    Ok(SavedModel {
        config_hash: stored.to_string(),
        heads,
        backbone,
    })
}
