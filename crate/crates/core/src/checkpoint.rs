//! Checkpoint files.
//!
//! One JSON manifest line (terminated by `\n`) followed by concatenated DTNS
//! records. Each manifest entry names a tensor, its role and the byte offset
//! of its record counted from the first byte after the manifest line.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::{MetaState, Nesterov, Snapshot};
use crate::tensorcore::{dtns, ParamRole, ParamSet, Tensor};

pub const FORMAT: &str = "duometa-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub name: String,
    pub role: ParamRole,
    pub offset: u64,
}

/// Scalar state stored next to the tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Header {
    pub kind: String,
    pub t: u64,
    pub seed: u64,
    pub val_loss: Option<f64>,
    pub initial_val: Option<f64>,
    pub best_t: Option<u64>,
    pub best_val_loss: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    /// Free-form provenance, e.g. the variant or the shot subjects.
    pub note: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    header: Header,
    entries: Vec<Entry>,
}

/// Named groups of tensors; entry names are `<group>/<param>`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub groups: IndexMap<String, ParamSet>,
}

impl Checkpoint {
    pub fn new(header: Header) -> Self {
        Self {
            header,
            groups: IndexMap::new(),
        }
    }

    pub fn with(mut self, group: &str, set: &ParamSet) -> Self {
        self.groups.insert(group.to_string(), set.detach());
        self
    }

    pub fn group(&self, name: &str) -> Result<&ParamSet> {
        self.groups
            .get(name)
            .ok_or_else(|| Error::Missing(format!("checkpoint group {name:?}")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut body = Vec::new();
        let mut entries = Vec::new();
        for (group, set) in &self.groups {
            if group.contains('/') {
                return Err(Error::Config(format!("group name {group:?} contains '/'")));
            }
            for (name, t) in set.iter() {
                entries.push(Entry {
                    name: format!("{group}/{name}"),
                    role: set.role(),
                    offset: body.len() as u64,
                });
                body.extend(dtns::encode(t));
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            header: self.header.clone(),
            entries,
        };
        let mut out = serde_json::to_vec(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        out.push(b'\n');
        out.extend(body);
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, "missing manifest line"))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::format(path, format!("manifest: {e}")))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint {} v{}", manifest.format, manifest.version),
            ));
        }
        let body = &bytes[nl + 1..];
        let mut groups: IndexMap<String, ParamSet> = IndexMap::new();
        let mut expected = 0u64;
        for e in &manifest.entries {
            if e.offset != expected {
                return Err(Error::format(path, format!("entry {} at offset {} (expected {expected})", e.name, e.offset)));
            }
            let (group, name) = e
                .name
                .split_once('/')
                .ok_or_else(|| Error::format(path, format!("entry name {:?} has no group", e.name)))?;
            let mut rest = &body[e.offset as usize..];
            let before = rest.len();
            let t = dtns::decode_from(&mut rest).map_err(|m| Error::format(path, format!("{}: {m}", e.name)))?;
            expected += (before - rest.len()) as u64;
            let set = groups
                .entry(group.to_string())
                .or_insert_with(|| ParamSet::new(e.role));
            if set.role() != e.role {
                return Err(Error::format(path, format!("mixed roles in group {group}")));
            }
            set.insert(name, t)?;
        }
        if expected as usize != body.len() {
            return Err(Error::format(path, format!("{} trailing bytes", body.len() - expected as usize)));
        }
        Ok(Self {
            header: manifest.header,
            groups,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        dtns::write_atomic(path, &self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::Missing(format!("checkpoint {}", path.display()))
            } else {
                Error::io(path, e)
            }
        })?;
        Self::decode(&bytes, path)
    }
}

fn buffer_set(params: &ParamSet, opt: &Nesterov) -> Result<Option<ParamSet>> {
    let Some(buf) = opt.buffer() else { return Ok(None) };
    let mut set = ParamSet::new(ParamRole::Aux);
    for ((name, t), b) in params.iter().zip(buf) {
        set.insert(name, Tensor::new(b.clone(), t.shape())?)?;
    }
    Ok(Some(set))
}

fn restore_buffer(ck: &Checkpoint, group: &str, params: &ParamSet, opt: &mut Nesterov) -> Result<()> {
    let buf = match ck.groups.get(group) {
        None => None,
        Some(set) => Some(
            params
                .names()
                .map(|n| set.get(n).map(|t| t.to_vec()))
                .collect::<std::result::Result<Vec<_>, _>>()?,
        ),
    };
    opt.set_buffer(params, buf)
}

/// Full resumable training state.
pub fn state_checkpoint(state: &MetaState) -> Result<Checkpoint> {
    let header = Header {
        kind: "state".into(),
        t: state.t,
        seed: state.seed,
        initial_val: state.initial_val,
        best_t: state.best.as_ref().map(|b| b.t),
        best_val_loss: state.best.as_ref().map(|b| b.val_loss),
        momentum: Some(state.opt_theta.momentum),
        weight_decay: Some(state.opt_theta.weight_decay),
        ..Header::default()
    };
    let mut ck = Checkpoint::new(header).with("theta", &state.theta).with("phi", &state.phi);
    if let Some(b) = &state.best {
        ck = ck.with("best_theta", &b.theta).with("best_phi", &b.phi);
    }
    if let Some(s) = buffer_set(&state.theta, &state.opt_theta)? {
        ck = ck.with("momentum_theta", &s);
    }
    if let Some(s) = buffer_set(&state.phi, &state.opt_phi)? {
        ck = ck.with("momentum_phi", &s);
    }
    Ok(ck)
}

pub fn restore_state(ck: &Checkpoint) -> Result<MetaState> {
    if ck.header.kind != "state" {
        return Err(Error::Config(format!("expected a training-state checkpoint, found {:?}", ck.header.kind)));
    }
    let h = &ck.header;
    let theta = ck.group("theta")?.clone();
    let phi = ck.group("phi")?.clone();
    let (momentum, wd) = (h.momentum.unwrap_or(0.0), h.weight_decay.unwrap_or(0.0));
    let mut opt_theta = Nesterov::new(momentum, wd);
    let mut opt_phi = Nesterov::new(momentum, wd);
    restore_buffer(ck, "momentum_theta", &theta, &mut opt_theta)?;
    restore_buffer(ck, "momentum_phi", &phi, &mut opt_phi)?;
    let best = match (h.best_t, h.best_val_loss) {
        (Some(t), Some(val_loss)) => Some(Snapshot {
            theta: ck.group("best_theta")?.clone(),
            phi: ck.group("best_phi")?.clone(),
            t,
            val_loss,
        }),
        _ => None,
    };
    Ok(MetaState {
        theta,
        phi,
        t: h.t,
        seed: h.seed,
        opt_theta,
        opt_phi,
        best,
        initial_val: h.initial_val,
    })
}

/// Trained model: extractor plus head (initialization or fine-tuned).
pub fn model_checkpoint(kind: &str, theta: &ParamSet, head: &ParamSet, header: Header) -> Checkpoint {
    Checkpoint::new(Header {
        kind: kind.into(),
        ..header
    })
    .with("theta", theta)
    .with("head", head)
}

pub fn model_parts(ck: &Checkpoint) -> Result<(ParamSet, ParamSet)> {
    Ok((ck.group("theta")?.clone(), ck.group("head")?.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::TrainConfig;
    use crate::segnet::{NetConfig, SegNet};

    fn net() -> SegNet {
        SegNet::new(NetConfig {
            scales: 2,
            base_width: 2,
            image_size: 8,
            ..NetConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn state_round_trip_is_bit_exact() {
        let net = net();
        let mut s = MetaState::new(&net, &TrainConfig::default(), 3).unwrap();
        s.t = 7;
        s.initial_val = Some(1.25);
        let g = s.theta.map(|_, t| Tensor::new(t.data().iter().map(|v| v * 0.5 + 1e-3).collect(), t.shape()).unwrap());
        s.opt_theta.step(&s.theta, &g, 0.1).unwrap();
        s.best = Some(Snapshot {
            theta: s.theta.clone(),
            phi: s.phi.clone(),
            t: 5,
            val_loss: 0.75,
        });
        let ck = state_checkpoint(&s).unwrap();
        let bytes = ck.encode().unwrap();
        let back = restore_state(&Checkpoint::decode(&bytes, Path::new("x")).unwrap()).unwrap();
        assert!(back.theta.bit_eq(&s.theta) && back.phi.bit_eq(&s.phi));
        assert_eq!(back.phi.role(), s.phi.role());
        assert_eq!((back.t, back.seed, back.initial_val), (7, 3, Some(1.25)));
        assert_eq!(back.opt_theta.buffer(), s.opt_theta.buffer());
        assert!(back.opt_phi.buffer().is_none());
        let b = back.best.unwrap();
        assert_eq!((b.t, b.val_loss), (5, 0.75));
        // re-encoding is byte-identical
        assert_eq!(state_checkpoint(&restore_state(&ck).unwrap()).unwrap().encode().unwrap(), bytes);
    }

    #[test]
    fn manifest_offsets_point_at_records() {
        let net = net();
        let (theta, phi) = net.init(1).unwrap();
        let ck = model_checkpoint("model", &theta, &phi, Header::default());
        let bytes = ck.encode().unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let m: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        let entries = m["entries"].as_array().unwrap();
        assert_eq!(entries.len(), theta.len() + phi.len());
        for e in entries {
            let off = e["offset"].as_u64().unwrap() as usize;
            assert_eq!(&bytes[nl + 1 + off..nl + 5 + off], b"DTNS");
        }
    }

    #[test]
    fn corrupt_files_are_rejected_with_the_path() {
        let net = net();
        let (theta, phi) = net.init(1).unwrap();
        let bytes = model_checkpoint("model", &theta, &phi, Header::default()).encode().unwrap();
        let p = Path::new("bad.ckpt");
        let err = Checkpoint::decode(&bytes[..bytes.len() - 3], p).unwrap_err().to_string();
        assert!(err.contains("bad.ckpt"), "{err}");
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra, p).is_err());
        assert!(Checkpoint::decode(b"{}", p).is_err());
        assert!(matches!(Checkpoint::load(Path::new("/nonexistent/x.ckpt")), Err(Error::Missing(_))));
    }
}
