//! Checkpoints: a key/value text manifest plus a little-endian `f64` blob.
//!
//! ```text
//! schema_version = 1
//! blob = policy.bin
//! arch.m = 8
//! ...
//! scenario.snr_db = 0
//! array.bn0.gamma = 0 24 24 1
//! ```
//!
//! Array lines read `byte_offset length rows cols`; arrays are stored in
//! manifest order, column-major.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::network::{Architecture, PolicyNetwork, RangeMode};
use crate::numerics::{Matrix, RngStream};

pub const SCHEMA_VERSION: u32 = 1;

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub network: PolicyNetwork,
    /// Free-form scenario entries saved alongside the network.
    pub scenario: BTreeMap<String, String>,
}

fn arrays(net: &PolicyNetwork) -> Vec<(String, Matrix)> {
    let col = |v: &nalgebra::DVector<f64>| Matrix::from_column_slice(v.len(), 1, v.as_slice());
    let mut out = Vec::new();
    for (l, bn) in net.norms.iter().enumerate() {
        out.push((format!("bn{l}.gamma"), col(&bn.gamma)));
        out.push((format!("bn{l}.beta"), col(&bn.beta)));
        out.push((format!("bn{l}.running_mean"), col(&bn.running_mean)));
        out.push((format!("bn{l}.running_var"), col(&bn.running_var)));
    }
    for (l, d) in net.hidden.iter().enumerate() {
        out.push((format!("hidden{l}.weight"), d.weight.clone()));
        out.push((format!("hidden{l}.bias"), col(&d.bias)));
    }
    for (i, d) in net.heads.iter().enumerate() {
        out.push((format!("head{i}.weight"), d.weight.clone()));
        out.push((format!("head{i}.bias"), col(&d.bias)));
    }
    out.push(("scales".into(), net.scales.clone()));
    out.push(("ranges".into(), net.ranges.clone()));
    out.push(("running_std".into(), net.running_std.clone()));
    if let Some(c) = &net.calibration_std {
        out.push(("calibration_std".into(), c.clone()));
    }
    out
}

/// Writes `<manifest>` and its blob next to it (same stem, `.bin`).
pub fn save(net: &PolicyNetwork, scenario: &BTreeMap<String, String>, manifest: &Path) -> Result<PathBuf> {
    let blob_path = manifest.with_extension("bin");
    let blob_name = blob_path
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidInput(format!("bad checkpoint path {}", manifest.display())))?
        .to_string();
    let arch = &net.arch;
    let mut text = format!("schema_version = {SCHEMA_VERSION}\nblob = {blob_name}\n");
    text += &format!(
        "arch.m = {}\narch.n = {}\narch.agents = {}\narch.k_max = {}\n",
        arch.m, arch.n, arch.agents, arch.k_max
    );
    let hidden: Vec<String> = arch.hidden.iter().map(|w| w.to_string()).collect();
    text += &format!(
        "arch.hidden = {}\narch.tied_heads = {}\n",
        hidden.join(","),
        arch.tied_heads
    );
    text += &format!("range_mode = {}\n", net.range_mode.as_str());
    for (k, v) in scenario {
        if k.contains('\n') || v.contains('\n') || k.contains('=') {
            return Err(Error::InvalidInput(format!("scenario entry `{k}` not representable")));
        }
        text += &format!("scenario.{k} = {v}\n");
    }
    let mut blob = Vec::new();
    for (name, a) in arrays(net) {
        text += &format!(
            "array.{name} = {} {} {} {}\n",
            blob.len(),
            a.len(),
            a.nrows(),
            a.ncols()
        );
        for v in a.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    fs::write(manifest, text).map_err(|e| Error::io(manifest, e))?;
    Ok(blob_path)
}

struct ArrayEntry {
    offset: usize,
    len: usize,
    rows: usize,
    cols: usize,
}

fn field<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    map.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Schema(format!("checkpoint manifest lacks `{key}`")))
}

fn parse<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    field(map, key)?
        .parse()
        .map_err(|_| Error::Schema(format!("checkpoint field `{key}` is malformed")))
}

pub fn load(manifest: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut map = BTreeMap::new();
    let mut order = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| Error::Schema(format!("manifest line {} is not `key = value`", lineno + 1)))?;
        if k.starts_with("array.") {
            order.push(k.to_string());
        }
        map.insert(k.to_string(), v.to_string());
    }
    let version: u32 = parse(&map, "schema_version")?;
    if version != SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "unsupported checkpoint schema version {version}"
        )));
    }
    let hidden = field(&map, "arch.hidden")?;
    let hidden = if hidden.is_empty() {
        Vec::new()
    } else {
        hidden
            .split(',')
            .map(|w| {
                w.parse()
                    .map_err(|_| Error::Schema("checkpoint field `arch.hidden` is malformed".into()))
            })
            .collect::<Result<Vec<usize>>>()?
    };
    let arch = Architecture {
        m: parse(&map, "arch.m")?,
        n: parse(&map, "arch.n")?,
        agents: parse(&map, "arch.agents")?,
        k_max: parse(&map, "arch.k_max")?,
        hidden,
        tied_heads: parse(&map, "arch.tied_heads")?,
    };
    let range_mode = RangeMode::parse(field(&map, "range_mode")?)?;
    let blob_path = manifest.with_file_name(field(&map, "blob")?);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;

    let mut network = PolicyNetwork::new(arch, range_mode, &RngStream::new(0, "checkpoint"))?;
    if map.contains_key("array.calibration_std") {
        network.calibration_std = Some(Matrix::zeros(network.arch.agents, network.arch.k_max));
    }
    let expected: Vec<(String, Matrix)> = arrays(&network);
    let names: Vec<String> = order.iter().map(|k| k["array.".len()..].to_string()).collect();
    if names != expected.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>() {
        return Err(Error::Schema("checkpoint arrays do not match the architecture".into()));
    }
    let mut loaded = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let raw = field(&map, &format!("array.{name}"))?;
        let nums: Vec<usize> = raw
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::Schema(format!("array `{name}` entry is malformed")))
            })
            .collect::<Result<_>>()?;
        let [offset, len, rows, cols] = nums[..] else {
            return Err(Error::Schema(format!(
                "array `{name}` needs offset, length, rows, cols"
            )));
        };
        let entry = ArrayEntry {
            offset,
            len,
            rows,
            cols,
        };
        if (entry.rows, entry.cols) != shape.shape() || entry.len != entry.rows * entry.cols {
            return Err(Error::Schema(format!("array `{name}` has the wrong shape")));
        }
        let end = entry.offset + 8 * entry.len;
        if end > blob.len() {
            return Err(Error::Schema(format!("array `{name}` runs past the blob")));
        }
        let values: Vec<f64> = blob[entry.offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        loaded.push(Matrix::from_column_slice(entry.rows, entry.cols, &values));
    }

    let mut it = loaded.into_iter();
    let mut next = || it.next().unwrap();
    let vector = |m: Matrix| nalgebra::DVector::from_column_slice(m.as_slice());
    for bn in &mut network.norms {
        bn.gamma = vector(next());
        bn.beta = vector(next());
        bn.running_mean = vector(next());
        bn.running_var = vector(next());
    }
    for d in network.hidden.iter_mut().chain(network.heads.iter_mut()) {
        d.weight = next();
        d.bias = vector(next());
    }
    network.scales = next();
    network.ranges = next();
    network.running_std = next();
    if network.calibration_std.is_some() {
        network.calibration_std = Some(next());
    }

    let scenario = map
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("scenario.").map(|s| (s.to_string(), v.clone())))
        .collect();
    Ok(Checkpoint { network, scenario })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Mode;
    use crate::numerics::sample_standard_gaussian;

    fn trained_looking() -> PolicyNetwork {
        let arch = Architecture {
            m: 4,
            n: 2,
            agents: 2,
            k_max: 2,
            hidden: vec![5, 3],
            tied_heads: false,
        };
        let mut net = PolicyNetwork::new(arch, RangeMode::BatchStatistic, &RngStream::new(9, "net")).unwrap();
        let cache = net
            .forward_cached(
                &sample_standard_gaussian(&mut RngStream::new(1, "x"), 8, 10),
                0,
                Mode::Train,
            )
            .unwrap();
        net.absorb_batch_stats(&cache.batch_stats());
        net.scales[(1, 0)] = -3.25;
        net.calibration_std = Some(Matrix::from_element(2, 2, 0.7));
        net
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ckpt");
        let net = trained_looking();
        let mut scenario = BTreeMap::new();
        scenario.insert("snr_db".to_string(), "0".to_string());
        save(&net, &scenario, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.network, net);
        assert_eq!(back.scenario, scenario);
        let x = sample_standard_gaussian(&mut RngStream::new(2, "x"), 8, 4);
        for i in 0..2 {
            assert_eq!(
                net.forward(&x, i, Mode::Eval).unwrap(),
                back.network.forward(&x, i, Mode::Eval).unwrap()
            );
        }
    }

    #[test]
    fn rejects_damaged_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        save(&trained_looking(), &BTreeMap::new(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();

        fs::write(&path, text.replace("schema_version = 1", "schema_version = 7")).unwrap();
        assert!(matches!(load(&path), Err(Error::Schema(_))));
        fs::write(&path, text.replace("arch.m = 4", "arch.m = 5")).unwrap();
        assert!(matches!(load(&path), Err(Error::Schema(_))));
        fs::write(&path, text.replace("arch.k_max = 2\n", "")).unwrap();
        assert!(matches!(load(&path), Err(Error::Schema(m)) if m.contains("arch.k_max")));

        fs::write(&path, &text).unwrap();
        let blob = dir.path().join("p.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load(&path), Err(Error::Schema(_))));
    }
}
