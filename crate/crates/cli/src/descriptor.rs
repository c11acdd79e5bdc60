use std::path::{Path, PathBuf};

use kptransfer::transfer::ExperimentDescriptor;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Where training images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Directory written by `gen-data` (or any saved dataset).
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// MPII-style annotation file; needs `images` and `resolution`.
    #[serde(default)]
    pub mpii_annotations: Option<PathBuf>,
    #[serde(default)]
    pub images: Option<PathBuf>,
    #[serde(default)]
    pub resolution: Option<usize>,
    pub val_count: usize,
}

/// One `train` invocation, read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunDescriptor {
    pub run_id: String,
    pub data: DataSection,
    pub experiment: ExperimentDescriptor,
}

impl RunDescriptor {
    /// Parses and validates; relative paths resolve against the file's
    /// directory.
    pub fn parse(text: &str, path: &Path) -> Result<Self, CliError> {
        let mut d: RunDescriptor = toml::from_str(text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        d.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        let bad = |detail: String| CliError::Config {
            path: path.to_path_buf(),
            detail,
        };
        if d.run_id.is_empty() || !d.run_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) {
            return Err(bad(format!("run_id `{}` must be non-empty [A-Za-z0-9._-]", d.run_id)));
        }
        if d.run_id.starts_with('.') {
            return Err(bad("run_id must not start with a dot".into()));
        }
        match (&d.data.dir, &d.data.mpii_annotations) {
            (Some(_), None) => {}
            (None, Some(_)) if d.data.images.is_some() && d.data.resolution.is_some() => {}
            (None, Some(_)) => return Err(bad("mpii_annotations needs `images` and `resolution`".into())),
            _ => return Err(bad("data needs exactly one of `dir` or `mpii_annotations`".into())),
        }
        d.experiment.validate().map_err(|e| bad(e.to_string()))?;
        Ok(d)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fix(&mut self.data.dir);
        fix(&mut self.data.mpii_annotations);
        fix(&mut self.data.images);
        fix(&mut self.experiment.stage1_checkpoint);
        if let kptransfer::transfer::SplitRef::File { file } = &mut self.experiment.split {
            if file.is_relative() {
                *file = base.join(&*file);
            }
        }
    }
}
