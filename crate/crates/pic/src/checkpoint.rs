//! Checkpoint files.
//!
//! Layout: the magic line `PIC-CHECKPOINT 1`, one line of JSON header, then
//! the raw arrays back to back as little-endian `f32`, in header order. The
//! header carries the model config, seed, step and epoch, the optimizer
//! options, the resolved run config, and `(name, shape)` for every array.
//! Optimizer moments are stored as `adam.m/<param>` and `adam.v/<param>`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use pic_core::model::ParamStore;
use pic_core::train::{TrainOptions, TrainState};
use pic_core::{Model, ModelConfig};
use serde::{Deserialize, Serialize};

pub const MAGIC: &str = "PIC-CHECKPOINT 1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelConfig,
    pub seed: u64,
    pub step: u64,
    pub epoch: u64,
    pub options: TrainOptions,
    #[serde(default)]
    pub run_config: Option<serde_json::Value>,
    pub arrays: Vec<ArrayInfo>,
}

fn push_store(store: &ParamStore<f32>, prefix: &str, arrays: &mut Vec<ArrayInfo>, data: &mut Vec<u8>) {
    for id in store.ids() {
        arrays.push(ArrayInfo { name: format!("{prefix}{}", store.name(id)), shape: store.shape(id).to_vec() });
        data.extend(store.get(id).iter().flat_map(|v| v.to_le_bytes()));
    }
}

pub fn save(path: &Path, state: &TrainState<f32>, run_config: Option<serde_json::Value>) -> Result<()> {
    let mut arrays = Vec::new();
    let mut data = Vec::new();
    push_store(state.model.params(), "", &mut arrays, &mut data);
    push_store(&state.first_moment, "adam.m/", &mut arrays, &mut data);
    push_store(&state.second_moment, "adam.v/", &mut arrays, &mut data);
    let header = Header {
        model: state.model.config().clone(),
        seed: state.seed,
        step: state.step,
        epoch: state.epoch,
        options: state.options,
        run_config,
        arrays,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        writeln!(f, "{MAGIC}")?;
        writeln!(f, "{}", serde_json::to_string(&header)?)?;
        f.write_all(&data)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

fn split_line(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let i = bytes.iter().position(|&b| b == b'\n')?;
    Some((&bytes[..i], &bytes[i + 1..]))
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let (magic, rest) = split_line(bytes).context("truncated checkpoint")?;
    if magic != MAGIC.as_bytes() {
        bail!("not a checkpoint (bad magic line)");
    }
    let (json, body) = split_line(rest).context("truncated checkpoint header")?;
    Ok((serde_json::from_slice(json).context("parsing checkpoint header")?, body))
}

/// Fills `store` (already laid out by the model config) from the arrays
/// whose names carry `prefix`.
fn fill(store: &mut ParamStore<f32>, prefix: &str, header: &Header, body: &[u8]) -> Result<()> {
    let mut offset = 0;
    let mut filled = 0;
    for a in &header.arrays {
        let n: usize = a.shape.iter().product();
        let end = offset + 4 * n;
        ensure!(end <= body.len(), "checkpoint data truncated at {}", a.name);
        if let Some(name) = a.name.strip_prefix(prefix).filter(|n| prefix.is_empty() || !n.is_empty()) {
            if prefix.is_empty() && name.starts_with("adam.") {
                offset = end;
                continue;
            }
            let id = store.find(name).with_context(|| format!("unexpected array {}", a.name))?;
            ensure!(store.shape(id) == a.shape.as_slice(), "shape mismatch for {}: {:?} vs {:?}", a.name, a.shape, store.shape(id));
            let values: Vec<f32> = body[offset..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            store.set(id, values)?;
            filled += 1;
        }
        offset = end;
    }
    ensure!(offset == body.len(), "checkpoint has {} trailing bytes", body.len() - offset);
    ensure!(filled == store.len(), "checkpoint holds {filled} of {} arrays for prefix {prefix:?}", store.len());
    Ok(())
}

pub fn load_state(path: &Path) -> Result<(TrainState<f32>, Header)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let (header, body) = read_header(&bytes)?;
    let mut model = Model::<f32>::new(header.model.clone(), 0)?;
    fill(model.params_mut(), "", &header, body)?;
    let mut state = TrainState::new(model, header.options, header.seed);
    fill(&mut state.first_moment, "adam.m/", &header, body)?;
    fill(&mut state.second_moment, "adam.v/", &header, body)?;
    state.step = header.step;
    state.epoch = header.epoch;
    Ok((state, header))
}

pub fn load_model(path: &Path) -> Result<Model<f32>> {
    Ok(load_state(path)?.0.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pic_core::train::Schedule;
    use pic_core::Variant;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::tiny(Variant::Cat);
        let opts = TrainOptions::new(Schedule::new(1e-3, 10));
        let mut state = TrainState::new(Model::<f32>::new(cfg, 4).unwrap(), opts, 17);
        let id = state.first_moment.ids().next().unwrap();
        state.first_moment.get_mut(id)[0] = 0.25;
        state.step = 7;
        state.epoch = 2;
        let path = dir.path().join("a.ckpt");
        save(&path, &state, Some(serde_json::json!({"k": 1}))).unwrap();
        let (back, header) = load_state(&path).unwrap();
        assert_eq!(back.model.params(), state.model.params());
        assert_eq!(back.first_moment, state.first_moment);
        assert_eq!(back.second_moment, state.second_moment);
        assert_eq!((back.step, back.epoch, back.seed), (7, 2, 17));
        assert_eq!(header.run_config, Some(serde_json::json!({"k": 1})));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"hello\n{}\n").unwrap();
        assert!(load_state(&path).is_err());
        let opts = TrainOptions::new(Schedule::new(1e-3, 10));
        let state = TrainState::new(Model::<f32>::new(ModelConfig::tiny(Variant::Sep), 1).unwrap(), opts, 0);
        save(&path, &state, None).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, bytes).unwrap();
        assert!(load_state(&path).is_err());
    }
}
