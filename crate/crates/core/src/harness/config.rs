//! Run configuration: defaults, file parsing (flat key=value lines, `#`
//! comments), and the canonical hash that ties checkpoints to the settings
//! that produced them.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::robust::AblationFlags;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub seed: u64,
    /// Robust-path training epochs.
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    /// Foreground points per prompt during training.
    pub prompt_points: usize,
    pub flags: AblationFlags,
    /// Cap on train-split scenes used per epoch (0 = all).
    pub max_train_scenes: usize,
    /// Teacher pretraining.
    pub teacher_lr: f64,
    pub teacher_epochs: usize,
    pub teacher_miou_floor: f64,
    pub teacher_miou_target: f64,
    /// Dataset generation.
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub test_scenes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 40,
            lr: 5e-4,
            batch_size: 8,
            weights: LossWeights::default(),
            prompt_points: 1,
            flags: AblationFlags::all(),
            max_train_scenes: 0,
            teacher_lr: 1e-3,
            teacher_epochs: 12,
            teacher_miou_floor: 0.85,
            teacher_miou_target: 0.88,
            train_scenes: 2000,
            val_scenes: 200,
            test_scenes: 200,
        }
    }
}

impl TrainConfig {
    /// Apply `key=value` overrides from a config file.
    pub fn load_overrides(&mut self, path: &Path) -> Result<()> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (ln, line) in raw.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{}:{}: expected key=value", path.display(), ln + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), ln + 1)))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad {what} value '{value}'"));
        match key {
            "seed" => self.seed = value.parse().map_err(|_| bad("u64"))?,
            "epochs" => self.epochs = value.parse().map_err(|_| bad("usize"))?,
            "lr" => self.lr = value.parse().map_err(|_| bad("float"))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad("usize"))?,
            "lambda1" => self.weights.lambda1 = value.parse().map_err(|_| bad("float"))?,
            "lambda2" => self.weights.lambda2 = value.parse().map_err(|_| bad("float"))?,
            "lambda3" => self.weights.lambda3 = value.parse().map_err(|_| bad("float"))?,
            "prompt_points" => self.prompt_points = value.parse().map_err(|_| bad("usize"))?,
            "use_amfg" => self.flags.use_amfg = parse_bool(value)?,
            "use_fourier" => self.flags.use_fourier = parse_bool(value)?,
            "use_aotg" => self.flags.use_aotg = parse_bool(value)?,
            "use_rot" => self.flags.use_rot = parse_bool(value)?,
            "max_train_scenes" => self.max_train_scenes = value.parse().map_err(|_| bad("usize"))?,
            "teacher_lr" => self.teacher_lr = value.parse().map_err(|_| bad("float"))?,
            "teacher_epochs" => self.teacher_epochs = value.parse().map_err(|_| bad("usize"))?,
            "teacher_miou_floor" => self.teacher_miou_floor = value.parse().map_err(|_| bad("float"))?,
            "teacher_miou_target" => self.teacher_miou_target = value.parse().map_err(|_| bad("float"))?,
            "train_scenes" => self.train_scenes = value.parse().map_err(|_| bad("usize"))?,
            "val_scenes" => self.val_scenes = value.parse().map_err(|_| bad("usize"))?,
            "test_scenes" => self.test_scenes = value.parse().map_err(|_| bad("usize"))?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Canonical text form (sorted stable key order).
    pub fn canonical(&self) -> String {
        format!(
            "batch_size={}\nepochs={}\nlambda1={}\nlambda2={}\nlambda3={}\nlr={}\n\
             max_train_scenes={}\nprompt_points={}\nseed={}\nteacher_epochs={}\n\
             teacher_lr={}\nteacher_miou_floor={}\nteacher_miou_target={}\n\
             test_scenes={}\ntrain_scenes={}\nuse_amfg={}\nuse_aotg={}\nuse_fourier={}\n\
             use_rot={}\nval_scenes={}\n",
            self.batch_size,
            self.epochs,
            self.weights.lambda1,
            self.weights.lambda2,
            self.weights.lambda3,
            self.lr,
            self.max_train_scenes,
            self.prompt_points,
            self.seed,
            self.teacher_epochs,
            self.teacher_lr,
            self.teacher_miou_floor,
            self.teacher_miou_target,
            self.test_scenes,
            self.train_scenes,
            self.flags.use_amfg,
            self.flags.use_aotg,
            self.flags.use_fourier,
            self.flags.use_rot,
            self.val_scenes,
        )
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad bool value '{v}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_recipe() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.epochs, 40);
        assert_eq!(cfg.lr, 5e-4);
        assert_eq!(cfg.batch_size, 8);
        assert_eq!(cfg.prompt_points, 1);
        assert_eq!(cfg.weights.lambda1, 1.0);
        assert_eq!(cfg.weights.lambda3, 20.0);
        assert_eq!((cfg.train_scenes, cfg.val_scenes, cfg.test_scenes), (2000, 200, 200));
    }

    #[test]
    fn file_overrides_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nepochs = 3\nlr=0.001\nuse_fourier=false\n").unwrap();
        let mut cfg = TrainConfig::default();
        let h0 = cfg.hash();
        cfg.load_overrides(&path).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.lr, 0.001);
        assert!(!cfg.flags.use_fourier);
        assert_ne!(cfg.hash(), h0);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.set("nonsense", "1").is_err());
        assert!(cfg.set("epochs", "abc").is_err());
    }
}
