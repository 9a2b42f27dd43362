//! Run configuration: a strict `key = value` text format with documented
//! ranges, unknown keys rejected. The defaults describe the desk-scale
//! training setup (four synthetic scenes on a 64x64x8 grid).

use thiserror::Error;

use crate::completion::CompletionConfig;
use crate::fusion::FusionConfig;
use crate::geometry::{CameraModel, GeometryError, VolumeSpec};
use crate::semkitti::ClassTable;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {0}: expected `key = value`")]
    Syntax(usize),
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {msg}")]
    BadValue { line: usize, key: String, msg: String },
    #[error("{key}: {msg}")]
    OutOfRange { key: String, msg: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub scenes: usize,
    pub vol_dims: [usize; 3],
    pub vol_origin: [f64; 3],
    pub voxel_size: f64,
    pub img_width: usize,
    pub img_height: usize,
    pub focal: f64,
    pub cam_pos: [f64; 3],
    pub cam_pitch_deg: f64,
    pub unet_base: usize,
    pub raw_channels: usize,
    pub prop_base: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub points: usize,
    pub dca_layers: usize,
    pub dsa_layers: usize,
    pub pos3d: bool,
    /// `sgd` or `adam`.
    pub optimizer: String,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub momentum: f64,
    pub steps_stage1: usize,
    pub steps_stage2: usize,
    pub lambda: [f64; 4],
    pub proposal_threshold: f64,
    pub proposal_cap_frac: f64,
    pub eval_ranges: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            scenes: 4,
            vol_dims: [64, 64, 8],
            vol_origin: [0.0, -6.4, -0.8],
            voxel_size: 0.2,
            img_width: 80,
            img_height: 64,
            focal: 48.0,
            cam_pos: [-2.0, 0.0, 2.4],
            cam_pitch_deg: 20.0,
            unet_base: 4,
            raw_channels: 32,
            prop_base: 4,
            embed_dim: 32,
            heads: 2,
            points: 4,
            dca_layers: 1,
            dsa_layers: 1,
            pos3d: true,
            optimizer: "adam".to_string(),
            lr_stage1: 0.4,
            lr_stage2: 0.1,
            momentum: 0.9,
            steps_stage1: 600,
            steps_stage2: 1200,
            lambda: [1.0, 1.0, 1.0, 1.0],
            proposal_threshold: 0.5,
            proposal_cap_frac: 0.25,
            eval_ranges: vec![3.2, 6.4, 12.8],
        }
    }
}

impl RunConfig {
    /// Parse the strict key = value format; `#` starts a comment. Every key
    /// must be known and every value within its documented range.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or(ConfigError::Syntax(line_no))?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(key, value, line_no)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        fn scalar<T: std::str::FromStr>(
            key: &str,
            value: &str,
            line: usize,
        ) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::BadValue {
                line,
                key: key.to_string(),
                msg: format!("`{value}`"),
            })
        }
        fn triple<T: std::str::FromStr + Copy>(
            key: &str,
            value: &str,
            line: usize,
        ) -> Result<[T; 3], ConfigError> {
            let parts: Vec<T> = value
                .split_whitespace()
                .map(|p| scalar::<T>(key, p, line))
                .collect::<Result<_, _>>()?;
            parts.try_into().map_err(|_| ConfigError::BadValue {
                line,
                key: key.to_string(),
                msg: "expected three values".to_string(),
            })
        }
        match key {
            "seed" => self.seed = scalar(key, value, line)?,
            "scenes" => self.scenes = scalar(key, value, line)?,
            "vol_dims" => self.vol_dims = triple(key, value, line)?,
            "vol_origin" => self.vol_origin = triple(key, value, line)?,
            "voxel_size" => self.voxel_size = scalar(key, value, line)?,
            "img_width" => self.img_width = scalar(key, value, line)?,
            "img_height" => self.img_height = scalar(key, value, line)?,
            "focal" => self.focal = scalar(key, value, line)?,
            "cam_pos" => self.cam_pos = triple(key, value, line)?,
            "cam_pitch_deg" => self.cam_pitch_deg = scalar(key, value, line)?,
            "unet_base" => self.unet_base = scalar(key, value, line)?,
            "raw_channels" => self.raw_channels = scalar(key, value, line)?,
            "prop_base" => self.prop_base = scalar(key, value, line)?,
            "embed_dim" => self.embed_dim = scalar(key, value, line)?,
            "heads" => self.heads = scalar(key, value, line)?,
            "points" => self.points = scalar(key, value, line)?,
            "dca_layers" => self.dca_layers = scalar(key, value, line)?,
            "dsa_layers" => self.dsa_layers = scalar(key, value, line)?,
            "pos3d" => {
                self.pos3d = match value {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => {
                        return Err(ConfigError::BadValue {
                            line,
                            key: key.to_string(),
                            msg: format!("`{value}` is not a boolean"),
                        })
                    }
                }
            }
            "optimizer" => {
                if value != "sgd" && value != "adam" {
                    return Err(ConfigError::BadValue {
                        line,
                        key: key.to_string(),
                        msg: format!("`{value}` is not sgd or adam"),
                    });
                }
                self.optimizer = value.to_string();
            }
            "lr_stage1" => self.lr_stage1 = scalar(key, value, line)?,
            "lr_stage2" => self.lr_stage2 = scalar(key, value, line)?,
            "momentum" => self.momentum = scalar(key, value, line)?,
            "steps_stage1" => self.steps_stage1 = scalar(key, value, line)?,
            "steps_stage2" => self.steps_stage2 = scalar(key, value, line)?,
            "lambda1" => self.lambda[0] = scalar(key, value, line)?,
            "lambda2" => self.lambda[1] = scalar(key, value, line)?,
            "lambda3" => self.lambda[2] = scalar(key, value, line)?,
            "lambda4" => self.lambda[3] = scalar(key, value, line)?,
            "proposal_threshold" => self.proposal_threshold = scalar(key, value, line)?,
            "proposal_cap_frac" => self.proposal_cap_frac = scalar(key, value, line)?,
            "eval_ranges" => {
                self.eval_ranges = value
                    .split_whitespace()
                    .map(|p| scalar::<f64>(key, p, line))
                    .collect::<Result<_, _>>()?;
            }
            _ => {
                return Err(ConfigError::UnknownKey { line, key: key.to_string() });
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |key: &str, msg: String| {
            Err(ConfigError::OutOfRange { key: key.to_string(), msg })
        };
        if self.scenes == 0 || self.scenes > 64 {
            return err("scenes", format!("{} not in 1..=64", self.scenes));
        }
        let voxels: usize = self.vol_dims.iter().product();
        if voxels == 0 || voxels > 128 * 128 * 128 {
            return err("vol_dims", format!("{:?} exceeds 128^3", self.vol_dims));
        }
        if self.vol_dims.iter().any(|&d| d != 1 && d % 2 != 0) {
            return err("vol_dims", format!("{:?}: each dim must be even or 1", self.vol_dims));
        }
        if !(self.voxel_size > 0.0) {
            return err("voxel_size", format!("{}", self.voxel_size));
        }
        if self.img_width % 16 != 0 || self.img_height % 16 != 0 {
            return err("img_width/img_height", "must be divisible by 16".to_string());
        }
        if self.img_width == 0 || self.img_width > 1024 || self.img_height == 0
            || self.img_height > 1024
        {
            return err("img_width/img_height", "must be in 16..=1024".to_string());
        }
        if !(self.focal > 0.0) {
            return err("focal", format!("{}", self.focal));
        }
        if !(self.cam_pitch_deg.abs() < 89.0) {
            return err("cam_pitch_deg", format!("{} not in (-89, 89)", self.cam_pitch_deg));
        }
        for (key, v, hi) in [
            ("unet_base", self.unet_base, 64),
            ("raw_channels", self.raw_channels, 128),
            ("prop_base", self.prop_base, 64),
            ("embed_dim", self.embed_dim, 256),
            ("heads", self.heads, 16),
            ("points", self.points, 16),
        ] {
            if v == 0 || v > hi {
                return err(key, format!("{v} not in 1..={hi}"));
            }
        }
        if self.embed_dim % self.heads != 0 {
            return err("embed_dim", format!("{} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.dca_layers > 4 || self.dsa_layers > 4 {
            return err("dca_layers/dsa_layers", "at most 4".to_string());
        }
        if !(self.lr_stage1 >= 0.0 && self.lr_stage2 >= 0.0) {
            return err("lr", "learning rates must be non-negative".to_string());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err("momentum", format!("{} not in [0, 1)", self.momentum));
        }
        if self.lambda.iter().any(|&l| !(l >= 0.0)) {
            return err("lambda", format!("{:?} must be non-negative", self.lambda));
        }
        if !(self.proposal_threshold > 0.0 && self.proposal_threshold < 1.0) {
            return err("proposal_threshold", format!("{} not in (0, 1)", self.proposal_threshold));
        }
        if !(self.proposal_cap_frac > 0.0 && self.proposal_cap_frac <= 1.0) {
            return err("proposal_cap_frac", format!("{} not in (0, 1]", self.proposal_cap_frac));
        }
        if self.eval_ranges.is_empty() || self.eval_ranges.iter().any(|&r| !(r > 0.0)) {
            return err("eval_ranges", "need at least one positive range".to_string());
        }
        Ok(())
    }

    /// Default config rendered in the parseable format.
    pub fn to_text(&self) -> String {
        let t3 = |v: &[f64; 3]| format!("{} {} {}", v[0], v[1], v[2]);
        format!(
            "seed = {}\nscenes = {}\nvol_dims = {} {} {}\nvol_origin = {}\nvoxel_size = {}\n\
             img_width = {}\nimg_height = {}\nfocal = {}\ncam_pos = {}\ncam_pitch_deg = {}\n\
             unet_base = {}\nraw_channels = {}\nprop_base = {}\nembed_dim = {}\nheads = {}\n\
             points = {}\ndca_layers = {}\ndsa_layers = {}\npos3d = {}\noptimizer = {}\nlr_stage1 = {}\n\
             lr_stage2 = {}\nmomentum = {}\nsteps_stage1 = {}\nsteps_stage2 = {}\n\
             lambda1 = {}\nlambda2 = {}\nlambda3 = {}\nlambda4 = {}\nproposal_threshold = {}\n\
             proposal_cap_frac = {}\neval_ranges = {}\n",
            self.seed,
            self.scenes,
            self.vol_dims[0],
            self.vol_dims[1],
            self.vol_dims[2],
            t3(&self.vol_origin),
            self.voxel_size,
            self.img_width,
            self.img_height,
            self.focal,
            t3(&self.cam_pos),
            self.cam_pitch_deg,
            self.unet_base,
            self.raw_channels,
            self.prop_base,
            self.embed_dim,
            self.heads,
            self.points,
            self.dca_layers,
            self.dsa_layers,
            self.pos3d,
            self.optimizer,
            self.lr_stage1,
            self.lr_stage2,
            self.momentum,
            self.steps_stage1,
            self.steps_stage2,
            self.lambda[0],
            self.lambda[1],
            self.lambda[2],
            self.lambda[3],
            self.proposal_threshold,
            self.proposal_cap_frac,
            self.eval_ranges.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(" "),
        )
    }

    pub fn volume_spec(&self) -> Result<VolumeSpec, ConfigError> {
        Ok(VolumeSpec::new(self.vol_origin, self.vol_dims, self.voxel_size)?)
    }

    pub fn camera(&self) -> Result<CameraModel, ConfigError> {
        Ok(CameraModel::forward_pitched(
            self.focal,
            self.focal,
            (self.img_width as f64 - 1.0) / 2.0,
            (self.img_height as f64 - 1.0) / 2.0,
            self.img_width,
            self.img_height,
            self.cam_pos,
            self.cam_pitch_deg.to_radians(),
        )?)
    }

    pub fn class_table(&self) -> ClassTable {
        ClassTable::palette()
    }

    pub fn fusion_config(&self) -> FusionConfig {
        let table = self.class_table();
        FusionConfig {
            feat2d_channels: table.n_semantic(),
            unet_base: self.unet_base,
            raw_channels: self.raw_channels,
            prop_base: self.prop_base,
            n_classes: table.n_classes(),
        }
    }

    pub fn completion_config(&self) -> CompletionConfig {
        let table = self.class_table();
        CompletionConfig {
            dim: self.embed_dim,
            heads: self.heads,
            points: self.points,
            dca_layers: self.dca_layers,
            dsa_layers: self.dsa_layers,
            raw_channels: self.raw_channels,
            n_classes: table.n_classes(),
            n_mask_classes: table.n_semantic(),
            vol_dims: self.vol_dims,
            pos3d: self.pos3d,
            head_upsample: [1, 1, 1],
        }
    }

    pub fn proposal_cap(&self) -> usize {
        let voxels: usize = self.vol_dims.iter().product();
        ((self.proposal_cap_frac * voxels as f64).round() as usize).max(1)
    }
}
