//! Single-file checkpoint: a text header followed by little-endian `f64`
//! tensor data in header order.
//!
//! ```text
//! anonygan-checkpoint 1
//! config_hash <hex>
//! step <n>
//! rng <seed-hex> <stream> <word-pos>
//! adam_g_t <n>
//! adam_d_t <n>
//! config <byte-len>
//! <config toml>
//! tensor <name> <d0>x<d1>...      (one line per tensor, `-` for scalars)
//! end
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "anonygan-checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub config_toml: String,
    pub step: u64,
    pub rng: RngState,
    pub adam_g_t: u64,
    pub adam_d_t: u64,
    /// Namespaced: `param/…`, `adam_g.m/…`, `adam_g.v/…`, `adam_d.m/…`, `adam_d.v/…`.
    pub tensors: BTreeMap<String, TensorData>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        writeln!(out, "{MAGIC} {FORMAT_VERSION}")?;
        writeln!(out, "config_hash {}", self.config_hash)?;
        writeln!(out, "step {}", self.step)?;
        writeln!(
            out,
            "rng {} {} {}",
            hex::encode(self.rng.seed),
            self.rng.stream,
            self.rng.word_pos
        )?;
        writeln!(out, "adam_g_t {}", self.adam_g_t)?;
        writeln!(out, "adam_d_t {}", self.adam_d_t)?;
        writeln!(out, "config {}", self.config_toml.len())?;
        out.extend_from_slice(self.config_toml.as_bytes());
        out.push(b'\n');
        for (name, t) in &self.tensors {
            if name.contains(char::is_whitespace) {
                return Err(bad(format!("tensor name `{name}` contains whitespace")));
            }
            if t.dims.iter().product::<usize>() != t.values.len() {
                return Err(bad(format!("tensor `{name}` dims {:?} vs {} values", t.dims, t.values.len())));
            }
            let dims = if t.dims.is_empty() {
                "-".to_string()
            } else {
                t.dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            };
            writeln!(out, "tensor {name} {dims}")?;
        }
        writeln!(out, "end")?;
        for t in self.tensors.values() {
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))
        };
        let magic = line()?;
        if magic != format!("{MAGIC} {FORMAT_VERSION}") {
            return Err(bad(format!("unsupported header `{magic}`")));
        }
        let config_hash = field(line()?, "config_hash")?.to_string();
        let step = parse(field(line()?, "step")?)?;
        let rng_line = field(line()?, "rng")?;
        let parts: Vec<&str> = rng_line.split(' ').collect();
        if parts.len() != 3 {
            return Err(bad("malformed rng line"));
        }
        let seed_vec = hex::decode(parts[0]).map_err(|e| bad(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = seed_vec.try_into().map_err(|_| bad("rng seed must be 32 bytes"))?;
        let rng = RngState {
            seed,
            stream: parse(parts[1])?,
            word_pos: parse(parts[2])?,
        };
        let adam_g_t = parse(field(line()?, "adam_g_t")?)?;
        let adam_d_t = parse(field(line()?, "adam_d_t")?)?;
        let config_len: usize = parse(field(line()?, "config")?)?;
        if pos + config_len + 1 > bytes.len() || bytes[pos + config_len] != b'\n' {
            return Err(bad("truncated config block"));
        }
        let config_toml = std::str::from_utf8(&bytes[pos..pos + config_len])
            .map_err(|_| bad("config is not UTF-8"))?
            .to_string();
        pos += config_len + 1;

        let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated tensor list"))?;
            let text = std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))?;
            pos += end + 1;
            if text == "end" {
                break;
            }
            let mut it = text.split(' ');
            let (Some("tensor"), Some(name), Some(dims), None) = (it.next(), it.next(), it.next(), it.next()) else {
                return Err(bad(format!("malformed tensor line `{text}`")));
            };
            let dims = if dims == "-" {
                Vec::new()
            } else {
                dims.split('x').map(parse).collect::<Result<Vec<usize>>>()?
            };
            specs.push((name.to_string(), dims));
        }
        let mut tensors = BTreeMap::new();
        for (name, dims) in specs {
            let n: usize = dims.iter().product();
            let need = n * 8;
            if pos + need > bytes.len() {
                return Err(bad(format!("data for `{name}` truncated")));
            }
            let values = bytes[pos..pos + need]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += need;
            if tensors.insert(name.clone(), TensorData { dims, values }).is_some() {
                return Err(bad(format!("duplicate tensor `{name}`")));
            }
        }
        if pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Checkpoint {
            config_hash,
            config_toml,
            step,
            rng,
            adam_g_t,
            adam_d_t,
            tensors,
        })
    }

    /// Writes via a temporary file and rename so a crash never leaves a
    /// half-written checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile {
                path: path.to_path_buf(),
                what: "checkpoint".into(),
            },
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }
}

fn field<'a>(line: &'a str, key: &str) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| bad(format!("expected `{key}`, found `{line}`")))
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| bad(format!("cannot parse `{s}`")))
}
