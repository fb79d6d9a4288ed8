//! Checkpoints: a text header naming every tensor and its shape, then the
//! raw little-endian `f64` data of those tensors in header order.
//!
//! ```text
//! ppcm-checkpoint 1
//! config hidden=64 depth=4 kernel=5 patch=4 n_classes=10 image_size=32 use_adaptive_matrix=false lambda=0.0001
//! tensor stem.weight 64,3,4,4
//! ...
//! end
//! <binary payload>
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &str = "ppcm-checkpoint 1";

fn parse_err(msg: impl Into<String>) -> Error {
    Error::Parse(format!("checkpoint: {}", msg.into()))
}

fn config_line(c: &ModelConfig) -> String {
    format!(
        "config hidden={} depth={} kernel={} patch={} n_classes={} image_size={} use_adaptive_matrix={} lambda={}",
        c.hidden, c.depth, c.kernel, c.patch, c.n_classes, c.image_size, c.use_adaptive_matrix, c.lambda
    )
}

fn parse_config(line: &str) -> Result<ModelConfig> {
    let rest = line.strip_prefix("config ").ok_or_else(|| parse_err("missing config line"))?;
    let mut c = ModelConfig {
        hidden: 0,
        depth: 0,
        kernel: 0,
        patch: 0,
        n_classes: 0,
        image_size: 0,
        use_adaptive_matrix: false,
        lambda: 0.0,
    };
    for field in rest.split_whitespace() {
        let (k, v) = field.split_once('=').ok_or_else(|| parse_err(format!("bad config field {field:?}")))?;
        let bad = || parse_err(format!("bad value for {k}: {v:?}"));
        match k {
            "hidden" => c.hidden = v.parse().map_err(|_| bad())?,
            "depth" => c.depth = v.parse().map_err(|_| bad())?,
            "kernel" => c.kernel = v.parse().map_err(|_| bad())?,
            "patch" => c.patch = v.parse().map_err(|_| bad())?,
            "n_classes" => c.n_classes = v.parse().map_err(|_| bad())?,
            "image_size" => c.image_size = v.parse().map_err(|_| bad())?,
            "use_adaptive_matrix" => c.use_adaptive_matrix = v.parse().map_err(|_| bad())?,
            "lambda" => c.lambda = v.parse().map_err(|_| bad())?,
            _ => return Err(parse_err(format!("unknown config field {k:?}"))),
        }
    }
    c.validate()?;
    Ok(c)
}

pub fn write_checkpoint<T: Scalar, W: Write>(model: &Model<T>, mut w: W) -> Result<()> {
    let tensors: Vec<(String, &crate::tensor::Tensor<T>)> = model
        .params()
        .into_iter()
        .map(|(n, _, t)| (n, t))
        .chain(model.buffers())
        .collect();
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "{}", config_line(model.config()))?;
    for (name, t) in &tensors {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(w, "tensor {name} {}", dims.join(","))?;
    }
    writeln!(w, "end")?;
    for (_, t) in &tensors {
        for v in t.data() {
            w.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(r: R) -> Result<Model<T>> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<R>| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(parse_err("unexpected end of header"));
        }
        Ok(line.trim_end_matches(['\n', '\r']).to_string())
    };
    if next_line(&mut r)? != MAGIC {
        return Err(parse_err("bad magic line"));
    }
    let cfg = parse_config(&next_line(&mut r)?)?;
    let mut header = Vec::new();
    loop {
        let l = next_line(&mut r)?;
        if l == "end" {
            break;
        }
        let mut parts = l.split_whitespace();
        let (Some("tensor"), Some(name), Some(dims), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(parse_err(format!("bad tensor line {l:?}")));
        };
        let shape = dims
            .split(',')
            .map(|d| d.parse::<usize>().map_err(|_| parse_err(format!("bad shape {dims:?}"))))
            .collect::<Result<Vec<_>>>()?;
        header.push((name.to_string(), shape));
    }

    let mut model = Model::<T>::build(&cfg, 0)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .params()
        .into_iter()
        .map(|(n, _, t)| (n, t.shape().to_vec()))
        .chain(model.buffers().into_iter().map(|(n, t)| (n, t.shape().to_vec())))
        .collect();
    if header != expected {
        return Err(parse_err("tensor list does not match the configured architecture"));
    }
    let mut buf = [0u8; 8];
    for t in model.params_mut() {
        for v in t.data_mut() {
            r.read_exact(&mut buf).map_err(|_| parse_err("payload truncated"))?;
            *v = T::from_f64_lossy(f64::from_le_bytes(buf));
        }
    }
    for t in model.buffers_mut() {
        for v in t.data_mut() {
            r.read_exact(&mut buf).map_err(|_| parse_err("payload truncated"))?;
            *v = T::from_f64_lossy(f64::from_le_bytes(buf));
        }
    }
    if r.read(&mut buf)? != 0 {
        return Err(parse_err("trailing bytes after payload"));
    }
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let f = fs::File::create(path)?;
    write_checkpoint(model, std::io::BufWriter::new(f))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    read_checkpoint(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{NormMode, Tensor};

    fn cfg() -> ModelConfig {
        ModelConfig {
            hidden: 4,
            depth: 2,
            kernel: 3,
            patch: 2,
            n_classes: 3,
            image_size: 4,
            use_adaptive_matrix: true,
            lambda: 1e-4,
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let mut m = Model::<f64>::build(&cfg(), 7).unwrap();
        let x = Tensor::from_fn(&[3, 3, 4, 4], |i| (i % 5) as f64 - 2.0);
        m.logits(&x, NormMode::Train).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&m, &mut bytes).unwrap();
        let back: Model<f64> = read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let m = Model::<f64>::build(&cfg(), 7).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&m, &mut bytes).unwrap();
        assert!(read_checkpoint::<f64, _>(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_checkpoint::<f64, _>(&extra[..]).is_err());
        assert!(read_checkpoint::<f64, _>(&b"garbage\n"[..]).is_err());
        let text = String::from_utf8_lossy(&bytes).replace("tensor head.bias 3", "tensor head.bias 4");
        assert!(read_checkpoint::<f64, _>(text.as_bytes()).is_err());
    }
}
