//! Checkpoint files.
//!
//! ```text
//! physiopref-checkpoint 1
//! role trainable
//! label physio
//! config {"alphabet":"HP2","length":12,...}
//! tensor ngram.emb 3,8
//! 3fb999999999999a bfe0000000000000 ...
//! ...
//! end
//! ```
//!
//! Values are the raw IEEE-754 bit patterns in hex, so loading is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParameterSet, Tensor};

use super::{PolicyConfig, PolicyModel, Role};

const MAGIC: &str = "physiopref-checkpoint";
const VERSION: u32 = 1;

/// Serialises a model. `label` names the method that produced it.
pub fn encode(model: &PolicyModel, label: &str) -> String {
    let mut out = String::new();
    writeln!(out, "{MAGIC} {VERSION}").unwrap();
    writeln!(out, "role {}", model.role().name()).unwrap();
    writeln!(out, "label {label}").unwrap();
    let cfg = serde_json::to_string(model.config()).expect("config serialises");
    writeln!(out, "config {cfg}").unwrap();
    for (name, t) in model.params().iter() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        writeln!(out, "tensor {name} {}", dims.join(",")).unwrap();
        let words: Vec<String> = t.data().iter().map(|x| format!("{:016x}", x.to_bits())).collect();
        writeln!(out, "{}", words.join(" ")).unwrap();
    }
    out.push_str("end\n");
    out
}

pub fn save(model: &PolicyModel, label: &str, path: &Path) -> Result<()> {
    fs::write(path, encode(model, label)).map_err(|e| Error::io(path, e))
}

/// Parsed checkpoint: the model and its label.
pub fn decode(text: &str, origin: &str) -> Result<(PolicyModel, String)> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| err(0, format!("unexpected end of file, expected {what}")))
    };

    let (n, header) = next("header")?;
    let version = header
        .strip_prefix(MAGIC)
        .map(str::trim)
        .ok_or_else(|| err(n, "not a physiopref checkpoint".into()))?;
    if version != VERSION.to_string() {
        return Err(err(n, format!("unsupported checkpoint version {version}")));
    }
    let (n, role_line) = next("role")?;
    let role = match role_line.strip_prefix("role ") {
        Some("trainable") => Role::Trainable,
        Some("frozen") => Role::FrozenReference,
        _ => return Err(err(n, format!("bad role line {role_line:?}"))),
    };
    let (n, label_line) = next("label")?;
    let label = label_line
        .strip_prefix("label ")
        .ok_or_else(|| err(n, "missing label".into()))?
        .to_string();
    let (n, cfg_line) = next("config")?;
    let config: PolicyConfig = cfg_line
        .strip_prefix("config ")
        .ok_or_else(|| err(n, "missing config".into()))
        .and_then(|j| serde_json::from_str(j).map_err(|e| err(n, format!("bad config: {e}"))))?;

    let mut params = ParameterSet::new();
    loop {
        let (n, line) = next("tensor or end")?;
        if line == "end" {
            break;
        }
        let mut parts = line.split_whitespace();
        if parts.next() != Some("tensor") {
            return Err(err(n, format!("expected tensor header, got {line:?}")));
        }
        let name = parts
            .next()
            .ok_or_else(|| err(n, "tensor name missing".into()))?;
        let shape = parts
            .next()
            .ok_or_else(|| err(n, "tensor shape missing".into()))?
            .split(',')
            .map(|d| d.parse::<usize>().map_err(|e| err(n, format!("bad dim {d:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let (n, body) = next("tensor values")?;
        let data = body
            .split_whitespace()
            .map(|w| {
                u64::from_str_radix(w, 16)
                    .map(f64::from_bits)
                    .map_err(|e| err(n, format!("bad value {w:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let t = Tensor::from_vec(&shape, data).map_err(|e| err(n, e.to_string()))?;
        params.insert(name, t).map_err(|e| err(n, e.to_string()))?;
    }
    let model = PolicyModel::from_parts(config, params, role)?;
    Ok((model, label))
}

pub fn load(path: &Path) -> Result<(PolicyModel, String)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode(&text, &path.display().to_string())
}
