use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::feature_store::{load_episode_file, Episode};
use crate::synthgen::{generate_episode, SynthConfig};

/// Indexed, deterministic stream of episodes.
pub trait EpisodeSource: Sync {
    fn episode(&self, index: usize) -> Result<Episode>;

    /// Number of available episodes, if bounded.
    fn len(&self) -> Option<usize>;

    /// Stable description used in run fingerprints.
    fn describe(&self) -> String;
}

/// Synthetic episodes; episode `i` is generated from `seed ⊕ i`.
#[derive(Clone, Debug)]
pub struct SynthSource {
    pub config: SynthConfig,
}

impl SynthSource {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }
}

impl EpisodeSource for SynthSource {
    fn episode(&self, index: usize) -> Result<Episode> {
        generate_episode(&self.config.for_episode(index as u64)).map(|(e, _)| e)
    }

    fn len(&self) -> Option<usize> {
        None
    }

    fn describe(&self) -> String {
        format!("synth:{}", serde_json::to_string(&self.config).unwrap_or_default())
    }
}

/// Episodes stored on disk: every `manifest.json` below a directory, in
/// lexicographic path order.
#[derive(Clone, Debug)]
pub struct DirSource {
    pub manifests: Vec<PathBuf>,
}

impl DirSource {
    pub fn scan(root: &Path) -> Result<Self> {
        let mut manifests = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            let entries = std::fs::read_dir(&dir).map_err(|source| Error::File {
                path: dir.clone(),
                source,
            })?;
            for entry in entries {
                let path = entry
                    .map_err(|source| Error::File {
                        path: dir.clone(),
                        source,
                    })?
                    .path();
                if path.is_dir() {
                    stack.push(path);
                } else if path.file_name().is_some_and(|n| n == "manifest.json") {
                    manifests.push(path);
                }
            }
        }
        manifests.sort();
        if manifests.is_empty() {
            return Err(Error::Manifest(format!("no manifest.json under {}", root.display())));
        }
        Ok(Self { manifests })
    }
}

impl EpisodeSource for DirSource {
    fn episode(&self, index: usize) -> Result<Episode> {
        let path = self
            .manifests
            .get(index)
            .ok_or_else(|| Error::invalid(format!("episode {index} out of range ({} on disk)", self.manifests.len())))?;
        load_episode_file(path)
    }

    fn len(&self) -> Option<usize> {
        Some(self.manifests.len())
    }

    fn describe(&self) -> String {
        let names: Vec<String> = self.manifests.iter().map(|p| p.display().to_string()).collect();
        format!("dir:{}", names.join(";"))
    }
}
