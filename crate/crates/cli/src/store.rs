//! On-disk layout under the data root.
//!
//! ```text
//! config.json
//! synth/<split>.jsonl          id, ground truth, features path
//! features/<id>.bin
//! models/{lm,weak,strong}.ckpt
//! hyps/<source>/<split>.jsonl
//! runs/<label>/{adapter.ckpt, loss.csv, outcome.json, report.json}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use whisperfuse::acoustic::ToyAcoustic;
use whisperfuse::io::checkpoint::{load_acoustic, load_lm};
use whisperfuse::io::manifest::load_manifest;
use whisperfuse::io::{read_features, read_json, write_bytes, write_features, write_json};
use whisperfuse::lm::ToyLm;
use whisperfuse::pipeline::{ExperimentConfig, HypothesisSets, Split};
use whisperfuse::synth::SyntheticUtterance;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceEntry {
    pub id: String,
    pub ground_truth: String,
    /// Relative to the manifest's directory.
    pub features_path: String,
}

pub struct Store {
    pub root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        let p = self.config_path();
        if !p.exists() {
            bail!("{} not found; run `whisperfuse synth` first", p.display());
        }
        Ok(read_json(&p)?)
    }

    pub fn save_config(&self, config: &ExperimentConfig) -> Result<()> {
        Ok(write_json(&self.config_path(), config)?)
    }

    pub fn synth_manifest(&self, split: &str) -> PathBuf {
        self.root.join("synth").join(format!("{split}.jsonl"))
    }

    pub fn model(&self, name: &str) -> PathBuf {
        self.root.join("models").join(format!("{name}.ckpt"))
    }

    pub fn hyps(&self, source: &str, split: &str) -> PathBuf {
        self.root.join("hyps").join(source).join(format!("{split}.jsonl"))
    }

    pub fn run_dir(&self, label: &str) -> PathBuf {
        self.root.join("runs").join(label)
    }

    pub fn save_utterances(&self, split: &str, utterances: &[SyntheticUtterance]) -> Result<()> {
        let mut text = String::new();
        for u in utterances {
            write_features(&self.root.join("features").join(format!("{}.bin", u.id)), &u.features)?;
            let entry = UtteranceEntry {
                id: u.id.clone(),
                ground_truth: u.ground_truth.clone(),
                features_path: format!("../features/{}.bin", u.id),
            };
            text.push_str(&serde_json::to_string(&entry)?);
            text.push('\n');
        }
        Ok(write_bytes(&self.synth_manifest(split), text.as_bytes())?)
    }

    pub fn load_utterances(&self, split: &str) -> Result<Vec<SyntheticUtterance>> {
        let path = self.synth_manifest(split);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}; run `whisperfuse synth` first", path.display()))?;
        let dir = path.parent().expect("manifest has a parent");
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, line)| {
                let e: UtteranceEntry = serde_json::from_str(line).with_context(|| format!("{}: line {}", path.display(), i + 1))?;
                let features = read_features(&dir.join(&e.features_path))?;
                Ok(SyntheticUtterance { id: e.id, ground_truth: e.ground_truth, features })
            })
            .collect()
    }

    pub fn load_split(&self, source: &str, split: &str) -> Result<Split> {
        let path = self.hyps(source, split);
        if !path.exists() {
            bail!("{} not found; run `whisperfuse hypgen --source {source}` first", path.display());
        }
        let records = load_manifest(&path)?;
        let dir = path.parent().expect("manifest has a parent");
        let features = records.iter().map(|r| read_features(&dir.join(&r.features_path))).collect::<Result<_, _>>()?;
        Ok(Split { records, features })
    }

    pub fn load_sets(&self, source: &str) -> Result<HypothesisSets> {
        Ok(HypothesisSets {
            train: self.load_split(source, "train")?,
            val: self.load_split(source, "val")?,
            test: self.load_split(source, "test")?,
        })
    }

    pub fn acoustic(&self, name: &str) -> Result<ToyAcoustic> {
        let p = self.model(name);
        load_acoustic(&p).with_context(|| format!("loading {}; run `whisperfuse pretrain` first", p.display()))
    }

    pub fn lm(&self, path: &Path) -> Result<ToyLm> {
        load_lm(path).with_context(|| format!("loading {}", path.display()))
    }
}
