//! Model file: a text header of `key=value` lines closed by `end`, then DPTN tensors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{build_network, Network, NetworkConfig, Preprocess, Trunk};
use crate::cnn::ConvStageParams;
use crate::data::{read_tensor, write_tensor, Standardization};
use crate::deconv::FilterBank;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "deconvparse-model 1";
const END: &[u8] = b"end\n";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub network: Network,
    /// Caller-defined header entries (e.g. the validation metric).
    pub extras: BTreeMap<String, String>,
}

fn floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn parse_floats(s: &str, key: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.parse::<f64>()
                .map_err(|_| Error::Config(format!("model header {key}: bad number {x:?}")))
        })
        .collect()
}

pub fn save_model(path: &Path, net: &Network, extras: &BTreeMap<String, String>) -> Result<()> {
    let mut header = format!("{MAGIC}\n");
    for (k, v) in net.config.to_pairs() {
        header.push_str(&format!("{k}={v}\n"));
    }
    header.push_str(&format!("trunks={}\n", net.trunks.len()));
    if let Some(p) = &net.preprocess {
        header.push_str(&format!("pre_mean={}\n", floats(&p.standardization.mean)));
        header.push_str(&format!("pre_std={}\n", floats(&p.standardization.std)));
        header.push_str(&format!("pre_lcn={}\n", p.lcn_window.unwrap_or(0)));
    }
    for (k, v) in extras {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::Config(format!("extra header entry {k:?} is not a single key=value line")));
        }
        header.push_str(&format!("extra.{k}={v}\n"));
    }
    let mut out = header.into_bytes();
    out.extend_from_slice(END);
    for t in &net.trunks {
        for p in &t.conv {
            write_tensor(&mut out, &p.filters);
            write_tensor(&mut out, &p.biases);
        }
        for b in &t.banks {
            write_tensor(&mut out, &b.filters);
        }
        write_tensor(&mut out, &t.feature_mean);
        write_tensor(&mut out, &t.feature_std);
    }
    for h in &net.heads {
        write_tensor(&mut out, &h.weights);
        write_tensor(&mut out, &h.biases);
    }
    Ok(fs::write(path, out)?)
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let bytes = fs::read(path)?;
    let fmt = |offset: usize, message: String| Error::Format { offset, message };
    let mut pos = 0;
    let mut lines = Vec::new();
    loop {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fmt(bytes.len(), "model header not terminated".into()))?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| fmt(pos, "header is not UTF-8".into()))?;
        let start = pos;
        pos += nl + 1;
        if line == "end" {
            break;
        }
        lines.push((start, line.to_string()));
    }
    if lines.first().map(|l| l.1.as_str()) != Some(MAGIC) {
        return Err(fmt(0, "not a model file".into()));
    }
    let mut cfg = NetworkConfig::default();
    let mut meta = BTreeMap::new();
    let mut extras = BTreeMap::new();
    for (offset, line) in &lines[1..] {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| fmt(*offset, format!("expected key=value, got {line:?}")))?;
        if let Some(x) = k.strip_prefix("extra.") {
            extras.insert(x.to_string(), v.to_string());
        } else if NetworkConfig::KEYS.contains(&k) {
            cfg.set(k, v)?;
        } else {
            meta.insert(k.to_string(), v.to_string());
        }
    }
    let mut net = build_network(&cfg)?;
    let trunks: usize = meta
        .get("trunks")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Config("model header lacks trunks".into()))?;
    if trunks != net.trunks.len() {
        return Err(Error::Config(format!(
            "model has {trunks} trunks, config implies {}",
            net.trunks.len()
        )));
    }
    if let (Some(m), Some(s)) = (meta.get("pre_mean"), meta.get("pre_std")) {
        let lcn: usize = meta.get("pre_lcn").and_then(|v| v.parse().ok()).unwrap_or(0);
        net.preprocess = Some(Preprocess {
            standardization: Standardization {
                mean: parse_floats(m, "pre_mean")?,
                std: parse_floats(s, "pre_std")?,
            },
            lcn_window: (lcn > 0).then_some(lcn),
        });
    }
    let mut next = |like: &Tensor<f64>| -> Result<Tensor<f64>> {
        let (t, end) = read_tensor(&bytes, pos)?;
        if t.shape() != like.shape() {
            return Err(fmt(pos, format!("tensor shape {:?}, expected {:?}", t.shape(), like.shape())));
        }
        pos = end;
        Ok(t)
    };
    let mut loaded = Vec::with_capacity(net.trunks.len());
    for t in &net.trunks {
        let mut conv = Vec::with_capacity(t.conv.len());
        for p in &t.conv {
            conv.push(ConvStageParams {
                filters: next(&p.filters)?,
                biases: next(&p.biases)?,
                pool: p.pool,
            });
        }
        let mut banks = Vec::with_capacity(t.banks.len());
        for b in &t.banks {
            banks.push(FilterBank::new(b.layer, next(&b.filters)?)?);
        }
        loaded.push(Trunk {
            conv,
            banks,
            feature_mean: next(&t.feature_mean)?,
            feature_std: next(&t.feature_std)?,
        });
    }
    for h in &mut net.heads {
        h.weights = next(&h.weights)?;
        h.biases = next(&h.biases)?;
    }
    if pos != bytes.len() {
        return Err(fmt(pos, "trailing bytes after model tensors".into()));
    }
    net.trunks = loaded;
    Ok(ModelFile { network: net, extras })
}
