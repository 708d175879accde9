//! Run manifests: the fully resolved inputs of a command, written before any
//! work starts and completed with output hashes when it finishes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use fpmine_core::training::GradcheckOptions;
use fpmine_core::{Fusion, SyntheticConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::{Split, Table};
use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
pub const LOG: &str = "log.ndjson";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const RESULTS: &str = "results.json";
pub const ABLATION: &str = "ablation.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenDataSettings {
    pub seed: u64,
    pub identities: usize,
    pub per_identity: usize,
    pub synthetic: SyntheticConfig,
    pub binary: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub data: PathBuf,
    pub config: TrainConfig,
    pub resume: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub fusions: Vec<Fusion>,
    pub split: Split,
    pub reports: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateSettings {
    pub data: PathBuf,
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
    pub table: Table,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSettings {
    pub config: TrainConfig,
    /// `None` means the small synthetic set derived from `options.seed`.
    pub data: Option<PathBuf>,
    pub options: GradcheckOptions,
    pub attempts: usize,
}

/// Resolved settings of one command, with every default materialized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Settings {
    GenData(GenDataSettings),
    Train(TrainSettings),
    Eval(EvalSettings),
    Ablate(AblateSettings),
    Gradcheck(GradcheckSettings),
}

impl Settings {
    pub fn seed(&self) -> Option<u64> {
        match self {
            Settings::GenData(s) => Some(s.seed),
            Settings::Train(s) => Some(s.config.seed),
            Settings::Eval(_) => None,
            Settings::Ablate(s) => s.seeds.first().copied(),
            Settings::Gradcheck(s) => Some(s.options.seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Started,
    Complete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub seed: Option<u64>,
    pub settings: Settings,
    pub inputs: BTreeMap<String, Artifact>,
    pub outputs: BTreeMap<String, Artifact>,
    pub status: Status,
}

impl RunManifest {
    /// Hashes every input and records the settings; nothing is written yet.
    pub fn begin(settings: Settings, inputs: &[(&str, &Path)]) -> CliResult<Self> {
        let inputs = inputs
            .iter()
            .map(|(name, path)| Ok((name.to_string(), artifact(path)?)))
            .collect::<CliResult<_>>()?;
        Ok(Self {
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed: settings.seed(),
            settings,
            inputs,
            outputs: BTreeMap::new(),
            status: Status::Started,
        })
    }

    pub fn write(&self, run_dir: &Path) -> CliResult<()> {
        let json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        write_atomic(&run_dir.join(MANIFEST), &json)
    }

    /// Records output hashes and marks the run complete.
    pub fn finish(&mut self, run_dir: &Path, outputs: &[&str]) -> CliResult<()> {
        for name in outputs {
            self.outputs.insert(name.to_string(), artifact(&run_dir.join(name))?);
        }
        self.status = Status::Complete;
        self.write(run_dir)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    /// Fails when an input has changed since the manifest was written.
    pub fn verify_inputs(&self) -> CliResult<()> {
        for (name, a) in &self.inputs {
            let now = artifact(&a.path)?;
            if now.sha256 != a.sha256 {
                return Err(CliError::Data(format!(
                    "input `{name}` ({}) changed since the run was recorded",
                    a.path.display()
                )));
            }
        }
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn artifact(path: &Path) -> CliResult<Artifact> {
    let abs = fs::canonicalize(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(Artifact {
        sha256: sha256_file(&abs)?,
        path: abs,
    })
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let io = |e: std::io::Error| CliError::Data(format!("{}: {e}", path.display()));
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

/// Creates the run directory and returns it in absolute form.
pub fn prepare_run_dir(dir: &Path) -> CliResult<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    fs::canonicalize(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}
