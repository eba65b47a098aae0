//! Plain-text model checkpoints.
//!
//! ```text
//! format_version=1
//! variant=graphmage
//! num_layers=1
//! width=2
//! dropout_p=0.2
//! aggregator=mean
//! input_dim=3
//! horizon=0
//! seed=1
//! scaler=scaler.txt
//! columns=a,b,c
//! tensor embed.weight 3 2
//! 0.1 -0.25
//! ...
//! ```
//!
//! Values are written in shortest round-trip form, so loading restores
//! every parameter bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParameters};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub horizon: u32,
    pub seed: u64,
    /// Path of the scaler file used to build the features, as given.
    pub scaler: String,
    /// Feature column names in input order.
    pub columns: Vec<String>,
    pub params: ModelParameters,
}

impl Checkpoint {
    pub fn file_name(horizon: u32, seed: u64) -> String {
        format!("model_h{horizon}_s{seed}.ckpt")
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        s.push_str(&format!("format_version={FORMAT_VERSION}\n"));
        s.push_str(&format!("variant={}\n", c.variant));
        s.push_str(&format!("num_layers={}\n", c.num_layers));
        s.push_str(&format!("width={}\n", c.width));
        s.push_str(&format!("dropout_p={}\n", fmt_f64(c.dropout_p)));
        s.push_str(&format!("aggregator={}\n", c.aggregator));
        s.push_str(&format!("input_dim={}\n", c.input_dim));
        s.push_str(&format!("horizon={}\n", self.horizon));
        s.push_str(&format!("seed={}\n", self.seed));
        s.push_str(&format!("scaler={}\n", self.scaler));
        s.push_str(&format!("columns={}\n", self.columns.join(",")));
        for (name, t) in self.params.names().iter().zip(self.params.tensors()) {
            let (r, cols) = t.dims2().expect("parameters are matrices");
            s.push_str(&format!("tensor {name} {r} {cols}\n"));
            for i in 0..r {
                let row: Vec<String> = t.row(i).iter().map(|&v| fmt_f64(v)).collect();
                s.push_str(&row.join(" "));
                s.push('\n');
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().peekable();
        let mut header = std::collections::BTreeMap::new();
        while let Some((_, line)) = lines.peek() {
            if line.starts_with("tensor ") {
                break;
            }
            let (i, line) = lines.next().expect("peeked");
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("checkpoint line {}: expected key=value", i + 1))
            })?;
            if header.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Parse(format!("checkpoint repeats key {k}")));
            }
        }
        let mut take = |key: &str| {
            header
                .remove(key)
                .ok_or_else(|| Error::Parse(format!("checkpoint is missing {key}")))
        };
        let version: u32 = parse_field("format_version", &take("format_version")?)?;
        if version != FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "checkpoint format_version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let config = ModelConfig {
            variant: take("variant")?.parse()?,
            num_layers: parse_field("num_layers", &take("num_layers")?)?,
            width: parse_field("width", &take("width")?)?,
            dropout_p: parse_field("dropout_p", &take("dropout_p")?)?,
            aggregator: take("aggregator")?.parse()?,
            input_dim: parse_field("input_dim", &take("input_dim")?)?,
        };
        config.validate()?;
        let horizon = parse_field("horizon", &take("horizon")?)?;
        let seed = parse_field("seed", &take("seed")?)?;
        let scaler = take("scaler")?;
        let columns_raw = take("columns")?;
        if let Some(k) = header.keys().next() {
            return Err(Error::Parse(format!("checkpoint has unknown key {k}")));
        }
        let columns: Vec<String> = if columns_raw.is_empty() {
            Vec::new()
        } else {
            columns_raw.split(',').map(str::to_string).collect()
        };

        let mut params = ModelParameters::zeros(&config);
        let names = params.names();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let (i, line) = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("checkpoint ends before tensor {name}")))?;
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 4 || parts[0] != "tensor" || parts[1] != name {
                return Err(Error::Parse(format!(
                    "checkpoint line {}: expected header for tensor {name}",
                    i + 1
                )));
            }
            let rows: usize = parse_field("rows", parts[2])?;
            let cols: usize = parse_field("cols", parts[3])?;
            if [rows, cols] != slot.shape() {
                return Err(Error::Shape(format!(
                    "checkpoint tensor {name} is {rows}x{cols}, config implies {:?}",
                    slot.shape()
                )));
            }
            let mut values = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (i, line) = lines
                    .next()
                    .ok_or_else(|| Error::Parse(format!("checkpoint truncated inside {name}")))?;
                let row = line
                    .split(' ')
                    .map(|v| parse_field::<f64>(name, v))
                    .collect::<Result<Vec<_>>>()?;
                if row.len() != cols {
                    return Err(Error::Parse(format!(
                        "checkpoint line {}: {} values, expected {cols}",
                        i + 1,
                        row.len()
                    )));
                }
                values.extend(row);
            }
            let t = Tensor::matrix(rows, cols, values)?;
            if !t.is_finite() {
                return Err(Error::Numeric(format!(
                    "checkpoint tensor {name} is not finite"
                )));
            }
            *slot = t;
        }
        if let Some((i, _)) = lines.find(|(_, l)| !l.is_empty()) {
            return Err(Error::Parse(format!(
                "checkpoint line {}: trailing content",
                i + 1
            )));
        }
        Ok(Self {
            config,
            horizon,
            seed,
            scaler,
            columns,
            params,
        })
    }

    /// Writes to a temporary sibling then renames, so readers never see a
    /// partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_text(&text)
    }
}

/// Shortest round-trip form, switching to exponent notation for very
/// large or small magnitudes.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn parse_field<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Parse(format!("checkpoint field {key}: cannot parse {v:?}")))
}

/// Write-temp-then-rename in the destination directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |e| Error::io(path.display().to_string(), e);
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Param(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Aggregator, Variant};

    fn small() -> Checkpoint {
        let config = ModelConfig {
            variant: Variant::ResGcnOverSage,
            num_layers: 2,
            width: 3,
            dropout_p: 0.1,
            aggregator: Aggregator::InverseDistance,
            input_dim: 2,
        };
        Checkpoint {
            config,
            horizon: 3,
            seed: 11,
            scaler: "out/scaler.txt".into(),
            columns: vec!["a".into(), "b".into()],
            params: ModelParameters::init(&config, 11).unwrap(),
        }
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let c = small();
        let back = Checkpoint::from_text(&c.to_text()).unwrap();
        for (a, b) in c.params.tensors().iter().zip(back.params.tensors()) {
            let ab: Vec<u64> = a.values().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(back, c);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let text = small().to_text();
        assert!(
            Checkpoint::from_text(&text.replace("format_version=1", "format_version=9")).is_err()
        );
        assert!(Checkpoint::from_text(&text.replace("width=3", "width=4")).is_err());
        assert!(Checkpoint::from_text(&format!("{text}junk\n")).is_err());
        let cut: String = text.lines().take(20).collect::<Vec<_>>().join("\n");
        assert!(Checkpoint::from_text(&cut).is_err());
        assert!(Checkpoint::from_text(&text.replace("seed=11", "seed=11\nextra=1")).is_err());
    }

    #[test]
    fn save_is_atomic_and_loadable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested").join(Checkpoint::file_name(3, 11));
        let c = small();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        let leftovers: Vec<_> = fs::read_dir(path.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(leftovers.len(), 1);
    }
}
