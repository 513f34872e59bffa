//! JSON demonstration files: images and action chunks stored as flat arrays
//! with their shapes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use lab_core::tensor::Tensor;
use lab_core::trainer::{DemoFrame, Demonstration};

use crate::error::{CliError, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayFile {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ArrayFile {
    fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }

    fn into_tensor(self) -> Result<Tensor> {
        Ok(Tensor::new(&self.shape, self.data)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameFile {
    image: ArrayFile,
    state: Vec<f64>,
    task: usize,
    actions: ArrayFile,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemoFile {
    /// Perturbation the demo was recorded under, for the record only.
    perturb: String,
    frames: Vec<FrameFile>,
}

pub fn save(demo: &Demonstration, perturb: &str, path: &Path) -> Result<()> {
    let file = DemoFile {
        perturb: perturb.to_string(),
        frames: demo
            .frames
            .iter()
            .map(|f| FrameFile {
                image: ArrayFile::from_tensor(&f.image),
                state: f.state.clone(),
                task: f.task,
                actions: ArrayFile::from_tensor(&f.actions),
            })
            .collect(),
    };
    std::fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Demonstration> {
    let file: DemoFile = serde_json::from_slice(&std::fs::read(path)?)?;
    if file.frames.is_empty() {
        return Err(CliError::Usage(format!("{} holds no frames", path.display())));
    }
    let frames = file
        .frames
        .into_iter()
        .map(|f| {
            Ok(DemoFrame {
                image: f.image.into_tensor()?,
                state: f.state,
                task: f.task,
                actions: f.actions.into_tensor()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Demonstration { frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use lab_core::rollout::expert_demo;
    use lab_core::scene::EnvConfig;

    #[test]
    fn roundtrip_is_exact() {
        let env = EnvConfig::default();
        let demo = expert_demo(&env, None, 4, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("demo.json");
        save(&demo, "none", &p).unwrap();
        assert_eq!(load(&p).unwrap(), demo);
    }
}
