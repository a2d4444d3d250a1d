//! Pipeline parameters, dataset presets and the `key = value` run-config format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fpfh::FpfhParams;

/// Dataset presets with the published hyper-parameter rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Preset {
    ModelNet40,
    ObjectScanNN,
    ShapeNetPart,
    ScanNet,
    NuScenes,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::ModelNet40,
        Preset::ObjectScanNN,
        Preset::ShapeNetPart,
        Preset::ScanNet,
        Preset::NuScenes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::ModelNet40 => "modelnet40",
            Preset::ObjectScanNN => "objectscannn",
            Preset::ShapeNetPart => "shapenetpart",
            Preset::ScanNet => "scannet",
            Preset::NuScenes => "nuscenes",
        }
    }

    /// `(gamma_iters, n_super, k1, k2)`.
    pub fn superpoint_row(self) -> (usize, usize, usize, usize) {
        match self {
            Preset::ModelNet40 | Preset::ObjectScanNN | Preset::ShapeNetPart => (16, 256, 32, 24),
            Preset::ScanNet => (8, 3000, 48, 32),
            Preset::NuScenes => (8, 2400, 48, 32),
        }
    }

    pub fn fpfh(self) -> FpfhParams {
        let (m_ref, r1, r2) = match self {
            Preset::ModelNet40 | Preset::ObjectScanNN | Preset::ShapeNetPart => (512, 0.04, 0.08),
            Preset::ScanNet => (4800, 0.05, 0.10),
            Preset::NuScenes => (5200, 0.05, 0.10),
        };
        FpfhParams {
            m_ref,
            k3: 32,
            k4: 100,
            r1,
            r2,
        }
    }

    pub fn pipeline(self) -> PipelineConfig {
        let (gamma_iters, n_super, k1, k2) = self.superpoint_row();
        PipelineConfig {
            gamma_iters,
            n_super,
            k1,
            k2,
            ..PipelineConfig::default()
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidParameter(format!("unknown preset '{s}'")))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which spaces must both exceed their threshold for a centroid to be suppressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NmsMode {
    /// Visual and geometric similarity both above threshold.
    Both,
    /// Either similarity above threshold.
    Either,
}

/// Coordinate kernel used when mixing superpoints back into points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordKernel {
    /// `tanh(D_c - distance)`.
    Tanh,
    /// Row softmax of `D_c - distance`.
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    /// Superpoint refinement rounds.
    pub gamma_iters: usize,
    pub n_super: usize,
    /// Neighbourhood size for the transport support and affinity.
    pub k1: usize,
    /// Patch size for local aggregation.
    pub k2: usize,
    pub sh_iters: usize,
    pub ot_eps: f64,
    pub ot_iters: usize,
    pub ms_iters: usize,
    pub bandwidth_rank: usize,
    /// Rows used when estimating a bandwidth; larger inputs are strided down.
    pub bandwidth_max_rows: usize,
    pub agg_passes: usize,
    /// 0 keeps aggregated features, 1 replaces them by the chosen anchor.
    pub blend: f64,
    pub fps_start: usize,
    /// Recompute the transport scale constants every refinement round.
    pub recompute_scales: bool,
    pub nms_mode: NmsMode,
    pub coord_kernel: CoordKernel,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            gamma_iters: 16,
            n_super: 256,
            k1: 32,
            k2: 24,
            sh_iters: 5,
            ot_eps: 1.0,
            ot_iters: 5,
            ms_iters: 40,
            bandwidth_rank: 16,
            bandwidth_max_rows: 2048,
            agg_passes: 1,
            blend: 1.0,
            fps_start: 0,
            recompute_scales: true,
            nms_mode: NmsMode::Both,
            coord_kernel: CoordKernel::Tanh,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self, n_points: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.n_super == 0 || self.n_super > n_points {
            return bad(format!("n_super = {} must be in 1..={n_points}", self.n_super));
        }
        if self.k1 == 0 || self.k1 > n_points {
            return bad(format!("k1 = {} must be in 1..={n_points}", self.k1));
        }
        if self.k2 == 0 || self.k2 > n_points {
            return bad(format!("k2 = {} must be in 1..={n_points}", self.k2));
        }
        if !(self.ot_eps > 0.0) || !self.ot_eps.is_finite() {
            return bad(format!("ot_eps must be positive, got {}", self.ot_eps));
        }
        if !(0.0..=1.0).contains(&self.blend) {
            return bad(format!("blend must lie in [0, 1], got {}", self.blend));
        }
        if self.bandwidth_rank == 0 || self.bandwidth_max_rows < 2 {
            return bad("bandwidth_rank must be >= 1 and bandwidth_max_rows >= 2".into());
        }
        if self.fps_start >= n_points {
            return bad(format!("fps_start = {} out of range for {n_points} points", self.fps_start));
        }
        Ok(())
    }
}

/// Everything a batch run needs: pipeline and descriptor parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub preset: Option<Preset>,
    pub pipeline: PipelineConfig,
    pub fpfh: FpfhParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_preset(Preset::ModelNet40)
    }
}

impl RunConfig {
    pub fn from_preset(preset: Preset) -> Self {
        Self {
            preset: Some(preset),
            pipeline: preset.pipeline(),
            fpfh: preset.fpfh(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("cannot parse '{v}'"))
        }
        let p = &mut self.pipeline;
        match key {
            "preset" => {
                let preset: Preset = value.parse().map_err(|e: Error| e.to_string())?;
                *self = RunConfig::from_preset(preset);
            }
            "gamma_iters" => p.gamma_iters = num(value)?,
            "n_super" => p.n_super = num(value)?,
            "k1" => p.k1 = num(value)?,
            "k2" => p.k2 = num(value)?,
            "sh_iters" => p.sh_iters = num(value)?,
            "ot_eps" => p.ot_eps = num(value)?,
            "ot_iters" => p.ot_iters = num(value)?,
            "ms_iters" => p.ms_iters = num(value)?,
            "bandwidth_rank" => p.bandwidth_rank = num(value)?,
            "bandwidth_max_rows" => p.bandwidth_max_rows = num(value)?,
            "agg_passes" => p.agg_passes = num(value)?,
            "blend" => p.blend = num(value)?,
            "fps_start" => p.fps_start = num(value)?,
            "recompute_scales" => p.recompute_scales = num(value)?,
            "nms_mode" => {
                p.nms_mode = match value {
                    "both" => NmsMode::Both,
                    "either" => NmsMode::Either,
                    _ => return Err(format!("nms_mode must be 'both' or 'either', got '{value}'")),
                }
            }
            "coord_kernel" => {
                p.coord_kernel = match value {
                    "tanh" => CoordKernel::Tanh,
                    "softmax" => CoordKernel::Softmax,
                    _ => return Err(format!("coord_kernel must be 'tanh' or 'softmax', got '{value}'")),
                }
            }
            "m_ref" => self.fpfh.m_ref = num(value)?,
            "k3" => self.fpfh.k3 = num(value)?,
            "k4" => self.fpfh.k4 = num(value)?,
            "r1" => self.fpfh.r1 = num(value)?,
            "r2" => self.fpfh.r2 = num(value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }
}

impl FromStr for RunConfig {
    type Err = Error;

    /// Parses `key = value` lines. `#` starts a comment. A `preset` line is
    /// applied before every other key regardless of position; repeated keys
    /// and unknown keys are errors.
    fn from_str(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, &str, &str)> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                line: lineno + 1,
                message: format!("expected 'key = value', got '{line}'"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if let Some((first, _, _)) = entries.iter().find(|(_, k, _)| *k == key) {
                return Err(Error::Config {
                    line: lineno + 1,
                    message: format!("duplicate key '{key}' (first set on line {first})"),
                });
            }
            entries.push((lineno + 1, key, value));
        }
        entries.sort_by_key(|(_, k, _)| *k != "preset");
        let mut cfg = RunConfig::default();
        for (line, key, value) in entries {
            cfg.set(key, value)
                .map_err(|message| Error::Config { line, message })?;
        }
        Ok(cfg)
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = &self.pipeline;
        if let Some(preset) = self.preset {
            writeln!(f, "preset = {preset}")?;
        }
        writeln!(f, "gamma_iters = {}", p.gamma_iters)?;
        writeln!(f, "n_super = {}", p.n_super)?;
        writeln!(f, "k1 = {}", p.k1)?;
        writeln!(f, "k2 = {}", p.k2)?;
        writeln!(f, "sh_iters = {}", p.sh_iters)?;
        writeln!(f, "ot_eps = {}", p.ot_eps)?;
        writeln!(f, "ot_iters = {}", p.ot_iters)?;
        writeln!(f, "ms_iters = {}", p.ms_iters)?;
        writeln!(f, "bandwidth_rank = {}", p.bandwidth_rank)?;
        writeln!(f, "bandwidth_max_rows = {}", p.bandwidth_max_rows)?;
        writeln!(f, "agg_passes = {}", p.agg_passes)?;
        writeln!(f, "blend = {}", p.blend)?;
        writeln!(f, "fps_start = {}", p.fps_start)?;
        writeln!(f, "recompute_scales = {}", p.recompute_scales)?;
        let nms = match p.nms_mode {
            NmsMode::Both => "both",
            NmsMode::Either => "either",
        };
        writeln!(f, "nms_mode = {nms}")?;
        let kernel = match p.coord_kernel {
            CoordKernel::Tanh => "tanh",
            CoordKernel::Softmax => "softmax",
        };
        writeln!(f, "coord_kernel = {kernel}")?;
        writeln!(f, "m_ref = {}", self.fpfh.m_ref)?;
        writeln!(f, "k3 = {}", self.fpfh.k3)?;
        writeln!(f, "k4 = {}", self.fpfh.k4)?;
        writeln!(f, "r1 = {}", self.fpfh.r1)?;
        writeln!(f, "r2 = {}", self.fpfh.r2)
    }
}
