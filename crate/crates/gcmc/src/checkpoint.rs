//! Checkpoint directories: `manifest.txt` (key = value) plus the parameter
//! tensors in `params.ltns` and, optionally, the Adam moments in
//! `optimizer.ltns`.

use std::io::BufReader;
use std::path::Path;

use gcmc_core::codec::{CodecModel, ModelConfig};
use gcmc_core::train::{Adam, TrainConfig};
use gcmc_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::atomic;
use crate::config::{self, KeyValues};
use crate::error::{Error, Result};
use crate::ltns;

pub const MANIFEST: &str = "manifest.txt";
pub const PARAMS: &str = "params.ltns";
pub const OPTIMIZER: &str = "optimizer.ltns";
const FORMAT: &str = "gcmc-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone)]
pub struct Checkpoint {
    pub model: CodecModel,
    pub train: TrainConfig,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub optimizer: Option<Adam>,
}

fn write_ltns(path: &Path, tensors: &[&Tensor]) -> Result<()> {
    atomic::write_file(path, |w| {
        for t in tensors {
            ltns::write_tensor(w, t).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    })
}

fn read_ltns(path: &Path) -> Result<Vec<Tensor>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ltns::read_all(&mut BufReader::new(f)).map_err(|e| Error::format(path, e.to_string()))
}

impl Checkpoint {
    pub fn new(model: CodecModel, train: TrainConfig) -> Self {
        Checkpoint {
            model,
            train,
            step: 0,
            optimizer: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let store = &self.model.store;
        let mut kv = KeyValues::default();
        kv.set("format", FORMAT);
        kv.set("version", VERSION);
        kv.set("step", self.step);
        kv.set("config_hash", format!("{:016x}", self.model.config_hash()));
        config::model_pairs(&self.model.config, &mut kv);
        config::train_pairs(&self.train, &mut kv);
        kv.set("tensors", store.len());
        for (i, id) in store.ids().enumerate() {
            kv.set(&format!("param.{i:04}"), store.name(id));
        }
        if let Some(adam) = &self.optimizer {
            kv.set("optimizer_steps", adam.steps());
        }
        atomic::write_dir(path, |dir| {
            let params: Vec<&Tensor> = store.ids().map(|id| store.get(id)).collect();
            write_ltns(&dir.join(PARAMS), &params)?;
            if let Some(adam) = &self.optimizer {
                let (m, v) = adam.moments();
                let all: Vec<&Tensor> = m.iter().chain(v).collect();
                write_ltns(&dir.join(OPTIMIZER), &all)?;
            }
            let manifest = dir.join(MANIFEST);
            atomic::write_file(&manifest, |w| w.write_all(kv.render().as_bytes()).map_err(|e| Error::io(&manifest, e)))
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = path.join(MANIFEST);
        if !manifest_path.is_file() {
            return Err(Error::usage(format!("{}: not a checkpoint directory", path.display())));
        }
        let kv = KeyValues::load(&manifest_path)?;
        let bad = |msg: String| Error::format(&manifest_path, msg);
        if kv.get("format") != Some(FORMAT) || kv.get("version") != Some(&VERSION.to_string()) {
            return Err(bad("unsupported checkpoint format".into()));
        }
        let model_config = config::model_config(&kv, ModelConfig::desk()).map_err(bad)?;
        let train = config::train_config(&kv, TrainConfig::default()).map_err(bad)?;
        let step: u64 = kv.get("step").and_then(|s| s.parse().ok()).ok_or_else(|| bad("missing step".into()))?;
        let count: usize = kv.get("tensors").and_then(|s| s.parse().ok()).ok_or_else(|| bad("missing tensor count".into()))?;
        let names = (0..count)
            .map(|i| kv.get(&format!("param.{i:04}")).map(str::to_string).ok_or_else(|| bad(format!("missing param.{i:04}"))))
            .collect::<Result<Vec<_>>>()?;

        let tensors = read_ltns(&path.join(PARAMS))?;
        if tensors.len() != count {
            return Err(Error::format(path.join(PARAMS), format!("expected {count} tensors, found {}", tensors.len())));
        }
        let mut model = CodecModel::new(model_config, &mut ChaCha8Rng::seed_from_u64(0))?;
        model.load_params(names.into_iter().zip(tensors).collect())?;
        if let Some(h) = kv.get("config_hash") {
            if h != format!("{:016x}", model.config_hash()) {
                return Err(bad("parameters do not match the recorded hash".into()));
            }
        }

        let optimizer = match kv.get("optimizer_steps") {
            None => None,
            Some(s) => {
                let steps: u64 = s.parse().map_err(|_| bad("bad optimizer_steps".into()))?;
                let mut moments = read_ltns(&path.join(OPTIMIZER))?;
                if moments.len() != 2 * count {
                    return Err(Error::format(path.join(OPTIMIZER), "moment count does not match the parameters"));
                }
                let v = moments.split_off(count);
                let mut adam = Adam::new(&model.store);
                adam.restore(steps, moments, v)?;
                Some(adam)
            }
        };
        Ok(Checkpoint {
            model,
            train,
            step,
            optimizer,
        })
    }
}
