//! Workspace directory layout and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lmf_core::io;
use lmf_core::scenegen::{GroundTruth, MotionMask};
use lmf_core::trainer::Dataset;
use lmf_core::{Aabb, Error, RgbImage, Vec3};
use serde::{Deserialize, Serialize};

pub const DIRS: [&str; 6] = ["frames", "masks", "pseudo", "checkpoints", "renders", "reports"];

/// Scene facts the learned field needs but the images do not carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub preset: String,
    pub seed: u64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub world_min: [f64; 3],
    pub world_max: [f64; 3],
    pub near: f64,
    pub pseudo_threshold: f64,
}

impl SceneMeta {
    pub fn world(&self) -> Aabb {
        Aabb::new(Vec3::from(self.world_min), Vec3::from(self.world_max))
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Entry {
    pub command: String,
    pub seed: u64,
    /// Config file given on the command line, if any.
    pub config_file: Option<String>,
    /// Effective configuration after file and flag overrides.
    pub config: String,
    pub label: Option<String>,
    /// Checkpoint written by this command, relative to the workspace.
    pub checkpoint: Option<String>,
    /// Render directory written by this command, relative to the workspace.
    pub renders: Option<String>,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub workspace: String,
    pub layout: Vec<String>,
    pub entries: Vec<Entry>,
}

pub struct Workspace {
    pub root: PathBuf,
}

/// Lower-case, filesystem-friendly form of a method label.
pub fn tag(label: &str) -> String {
    label.to_lowercase().replace('+', "-")
}

impl Workspace {
    pub fn new(root: &Path) -> Self {
        Workspace { root: root.to_path_buf() }
    }

    pub fn create(&self) -> Result<()> {
        for d in DIRS {
            let p = self.root.join(d);
            fs::create_dir_all(&p).with_context(|| format!("cannot create {}", p.display()))?;
        }
        Ok(())
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().into_owned()
    }

    pub fn frame(&self, t: usize) -> PathBuf {
        self.root.join(format!("frames/frame_{t:03}.ppm"))
    }

    pub fn gt_dyn(&self, t: usize) -> PathBuf {
        self.root.join(format!("masks/dyn_{t:03}.pgm"))
    }

    pub fn gt_ss(&self, t: usize) -> PathBuf {
        self.root.join(format!("masks/ss_{t:03}.pgm"))
    }

    pub fn pseudo(&self, t: usize) -> PathBuf {
        self.root.join(format!("pseudo/pseudo_{t:03}.pgm"))
    }

    pub fn cameras(&self) -> PathBuf {
        self.root.join("cameras.csv")
    }

    pub fn scene(&self) -> PathBuf {
        self.root.join("scene.json")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn checkpoint(&self, label: &str) -> PathBuf {
        self.root.join(format!("checkpoints/{}.lmf", tag(label)))
    }

    pub fn render_dir(&self, label: &str) -> PathBuf {
        self.root.join(format!("renders/{}", tag(label)))
    }

    pub fn require(&self, p: &Path) -> Result<()> {
        if !p.exists() {
            return Err(Error::Missing(p.to_path_buf()).into());
        }
        Ok(())
    }

    pub fn load_scene(&self) -> Result<SceneMeta> {
        let p = self.scene();
        self.require(&p)?;
        let text = fs::read_to_string(&p)?;
        serde_json::from_str(&text).map_err(|e| {
            Error::Format {
                path: p.clone(),
                message: e.to_string(),
            }
            .into()
        })
    }

    pub fn load_dataset(&self, meta: &SceneMeta, with_masks: bool) -> Result<Dataset> {
        let cameras = io::read_cameras_csv(&self.cameras())?;
        if cameras.len() != meta.frames {
            return Err(Error::Data(format!("{} cameras for {} frames", cameras.len(), meta.frames)).into());
        }
        let frames: Vec<RgbImage> = (0..meta.frames)
            .map(|t| io::read_ppm(&self.frame(t)))
            .collect::<lmf_core::Result<_>>()?;
        let pseudo_masks = if with_masks {
            Some(self.load_pseudo(meta)?)
        } else {
            None
        };
        Ok(Dataset {
            cameras,
            frames,
            pseudo_masks,
        })
    }

    pub fn load_pseudo(&self, meta: &SceneMeta) -> Result<Vec<MotionMask>> {
        (0..meta.frames)
            .map(|t| {
                let values = io::read_pgm(&self.pseudo(t))?;
                Ok(MotionMask::new(values, t, meta.pseudo_threshold)?)
            })
            .collect()
    }

    /// Ground-truth masks for every frame; colours are left empty.
    pub fn load_gt(&self, meta: &SceneMeta) -> Result<GroundTruth> {
        let mut gt = GroundTruth {
            rgb: Vec::new(),
            mask_dyn: Vec::with_capacity(meta.frames),
            mask_ss: Vec::with_capacity(meta.frames),
        };
        for t in 0..meta.frames {
            gt.mask_dyn.push(io::read_mask(&self.gt_dyn(t))?);
            gt.mask_ss.push(io::read_mask(&self.gt_ss(t))?);
        }
        Ok(gt)
    }

    pub fn load_manifest(&self) -> Result<Manifest> {
        let p = self.manifest_path();
        if !p.exists() {
            return Ok(Manifest {
                workspace: self.root.display().to_string(),
                layout: DIRS.iter().map(|d| format!("{d}/")).collect(),
                entries: Vec::new(),
            });
        }
        let text = fs::read_to_string(&p)?;
        serde_json::from_str(&text).map_err(|e| {
            Error::Format {
                path: p.clone(),
                message: e.to_string(),
            }
            .into()
        })
    }

    pub fn record(&self, entry: Entry) -> Result<()> {
        let mut m = self.load_manifest()?;
        m.entries.push(entry);
        fs::write(self.manifest_path(), serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    }

    /// Most recent checkpoint written by one of `commands`.
    pub fn latest_checkpoint(&self, commands: &[&str]) -> Result<Option<PathBuf>> {
        Ok(self
            .load_manifest()?
            .entries
            .iter()
            .rev()
            .filter(|e| commands.contains(&e.command.as_str()))
            .find_map(|e| e.checkpoint.as_ref().map(|c| self.path(c))))
    }

    /// Render directories in the order they were first produced, keeping
    /// the latest entry for each label.
    pub fn render_sets(&self) -> Result<Vec<(String, PathBuf)>> {
        let mut out: Vec<(String, PathBuf)> = Vec::new();
        for e in self.load_manifest()?.entries {
            if let (Some(label), Some(dir)) = (e.label, e.renders) {
                let path = self.path(&dir);
                match out.iter_mut().find(|(l, _)| *l == label) {
                    Some(slot) => slot.1 = path,
                    None => out.push((label, path)),
                }
            }
        }
        Ok(out)
    }
}
